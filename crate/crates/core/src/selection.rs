//! Validation-free snapshot ranking from weight-matrix spectra.
//!
//! Every analyzed weight matrix `W` (conv kernels unrolled to
//! `out × in·kh·kw`) contributes its empirical spectral density, the
//! eigenvalues of `WᵀW`. A power law fitted to the tail of that density gives
//! `alpha`; `alpha·log10(λ_max)` is the weighted alpha and `log10‖W‖_F²` the
//! log norm. Models are ranked on the layer means of those two numbers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{LayerSpec, Network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("weight matrix is empty or all zero")]
    DegenerateMatrix,
    #[error("spectrum has no two distinct values")]
    DegenerateSpectrum,
    #[error("power-law fit needs at least {needed} eigenvalues, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("eigenvalues must be positive and finite")]
    NonPositive,
    #[error("asked for top {k} of {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("network has no layer large enough to analyze")]
    NothingToAnalyze,
}

/// Minimum spectrum length for an `xmin` search.
pub const MIN_FIT_SAMPLES: usize = 10;
/// Layers whose smaller weight dimension is below this are skipped.
pub const MIN_LAYER_DIM: usize = 8;
/// Fewest tail points an `xmin` candidate may leave.
const MIN_TAIL: usize = 5;

/// Row-major matrix view used for spectral analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn transpose(&self) -> WeightMatrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        WeightMatrix { rows: self.cols, cols: self.rows, data }
    }

    /// `log10 ‖W‖_F²`.
    pub fn log_frobenius(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().log10()
    }
}

/// Squared singular values of `w`, descending (length `min(rows, cols)`).
///
/// Eigen-decomposes the smaller Gram matrix in `f64`.
pub fn esd(w: &WeightMatrix) -> Result<Vec<f64>, SelectionError> {
    if w.data.is_empty() || w.data.iter().all(|&v| v == 0.0) {
        return Err(SelectionError::DegenerateMatrix);
    }
    let m = DMatrix::from_fn(w.rows, w.cols, |r, c| f64::from(w.data[r * w.cols + c]));
    let gram = if w.rows <= w.cols { &m * m.transpose() } else { m.transpose() * &m };
    let mut eig: Vec<f64> = gram.symmetric_eigenvalues().iter().map(|&v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub xmin: f64,
    /// Kolmogorov-Smirnov distance between the tail and the fitted law.
    pub ks: f64,
    pub tail: usize,
}

/// Continuous MLE `α̂ = 1 + n/Σ ln(x_i/xmin)` over an ascending tail whose
/// values are all `≥ xmin`, with the tail's KS distance to the fitted law.
fn fit_tail(tail: &[f64], xmin: f64, log_sum: f64) -> Option<PowerLawFit> {
    let n = tail.len();
    if n == 0 || !(log_sum > 0.0) {
        return None;
    }
    let alpha = 1.0 + n as f64 / log_sum;
    let mut ks = 0.0f64;
    for (j, &x) in tail.iter().enumerate() {
        let model = 1.0 - (x / xmin).powf(1.0 - alpha);
        let below = j as f64 / n as f64;
        let upto = (j + 1) as f64 / n as f64;
        ks = ks.max((model - below).abs()).max((upto - model).abs());
    }
    Some(PowerLawFit { alpha, xmin, ks, tail: n })
}

fn sorted_positive(eigs: &[f64]) -> Result<Vec<f64>, SelectionError> {
    if eigs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(SelectionError::NonPositive);
    }
    let mut v = eigs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn log_suffix(ascending: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; ascending.len() + 1];
    for i in (0..ascending.len()).rev() {
        s[i] = s[i + 1] + ascending[i].ln();
    }
    s
}

/// Power-law MLE with a fixed lower cutoff.
pub fn powerlaw_fit_fixed(eigs: &[f64], xmin: f64) -> Result<PowerLawFit, SelectionError> {
    if !(xmin > 0.0) {
        return Err(SelectionError::NonPositive);
    }
    let v = sorted_positive(eigs)?;
    let start = v.partition_point(|&x| x < xmin);
    let tail = &v[start..];
    if tail.is_empty() {
        return Err(SelectionError::TooFewSamples { needed: 1, got: 0 });
    }
    let log_sum: f64 = tail.iter().map(|x| (x / xmin).ln()).sum();
    fit_tail(tail, xmin, log_sum).ok_or(SelectionError::DegenerateSpectrum)
}

/// Power-law fit with `xmin` chosen among the observed values to minimize
/// the KS distance (lowest `xmin` on ties).
pub fn powerlaw_fit(eigs: &[f64]) -> Result<PowerLawFit, SelectionError> {
    if eigs.len() < MIN_FIT_SAMPLES {
        return Err(SelectionError::TooFewSamples { needed: MIN_FIT_SAMPLES, got: eigs.len() });
    }
    let v = sorted_positive(eigs)?;
    if v.first() == v.last() {
        return Err(SelectionError::DegenerateSpectrum);
    }
    let suffix = log_suffix(&v);
    let mut best: Option<PowerLawFit> = None;
    let mut i = 0;
    while i + MIN_TAIL <= v.len() {
        let xmin = v[i];
        let log_sum = suffix[i] - (v.len() - i) as f64 * xmin.ln();
        if let Some(fit) = fit_tail(&v[i..], xmin, log_sum) {
            if best.is_none_or(|b| fit.ks < b.ks) {
                best = Some(fit);
            }
        }
        // one candidate per distinct value
        while i < v.len() && v[i] == xmin {
            i += 1;
        }
    }
    best.ok_or(SelectionError::DegenerateSpectrum)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub shape: (usize, usize),
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    pub log_frob: f64,
    /// Absent when the spectrum is too short or degenerate to fit.
    pub fit: Option<PowerLawFit>,
    pub weighted_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralStats {
    pub layers: Vec<LayerSpectrum>,
    /// Mean `log_frob` over analyzed layers: the model's log norm.
    pub log_norm: f64,
    /// Mean weighted alpha over layers with a fit; NaN when none fit.
    pub weighted_alpha: f64,
}

/// Weight matrices of conv (unrolled) and dense layers, with their layer index.
pub fn weight_matrices(net: &Network) -> Vec<(usize, WeightMatrix)> {
    net.layers()
        .iter()
        .zip(net.params())
        .enumerate()
        .filter_map(|(i, (l, p))| match *l {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((i, WeightMatrix::new(out_channels, in_channels * kernel * kernel, p.weights.clone())))
            }
            LayerSpec::Dense { in_features, out_features } => {
                Some((i, WeightMatrix::new(out_features, in_features, p.weights.clone())))
            }
            _ => None,
        })
        .collect()
}

pub fn layer_spectrum(layer: usize, w: &WeightMatrix) -> Result<LayerSpectrum, SelectionError> {
    let eigenvalues = esd(w)?;
    let lambda_max = eigenvalues[0];
    let positive: Vec<f64> = eigenvalues.iter().copied().filter(|&v| v > 0.0).collect();
    let fit = powerlaw_fit(&positive).ok();
    Ok(LayerSpectrum {
        layer,
        shape: (w.rows, w.cols),
        lambda_max,
        log_frob: w.log_frobenius(),
        weighted_alpha: fit.map(|f| f.alpha * lambda_max.log10()),
        fit,
        eigenvalues,
    })
}

/// Spectral statistics of every layer whose smaller dimension is at least
/// `min_dim`.
pub fn spectral_stats(net: &Network, min_dim: usize) -> Result<SpectralStats, SelectionError> {
    let mut layers = Vec::new();
    for (i, w) in weight_matrices(net) {
        if w.rows.min(w.cols) < min_dim {
            continue;
        }
        match layer_spectrum(i, &w) {
            Ok(s) => layers.push(s),
            Err(SelectionError::DegenerateMatrix) => continue,
            Err(e) => return Err(e),
        }
    }
    if layers.is_empty() {
        return Err(SelectionError::NothingToAnalyze);
    }
    let log_norm = layers.iter().map(|l| l.log_frob).sum::<f64>() / layers.len() as f64;
    let alphas: Vec<f64> = layers.iter().filter_map(|l| l.weighted_alpha).collect();
    let weighted_alpha =
        if alphas.is_empty() { f64::NAN } else { alphas.iter().sum::<f64>() / alphas.len() as f64 };
    Ok(SpectralStats { layers, log_norm, weighted_alpha })
}

/// Direction preferred for the weighted-alpha tie-break.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPreference {
    #[default]
    Highest,
    Lowest,
}

/// Indices of the top `k` models: ascending log norm, then weighted alpha
/// (descending by default), then original position.
pub fn rank_snapshots(stats: &[SpectralStats], k: usize) -> Result<Vec<usize>, SelectionError> {
    rank_snapshots_with(stats, k, AlphaPreference::Highest)
}

pub fn rank_snapshots_with(
    stats: &[SpectralStats],
    k: usize,
    preference: AlphaPreference,
) -> Result<Vec<usize>, SelectionError> {
    rank_by_keys(&stats.iter().map(|s| (s.log_norm, s.weighted_alpha)).collect::<Vec<_>>(), k, preference)
}

/// Ranking on raw `(log_norm, weighted_alpha)` pairs. NaN keys sort last.
pub fn rank_by_keys(keys: &[(f64, f64)], k: usize, preference: AlphaPreference) -> Result<Vec<usize>, SelectionError> {
    if k == 0 || k > keys.len() {
        return Err(SelectionError::KTooLarge { k, available: keys.len() });
    }
    let nan_last = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, wa) = keys[a];
        let (nb, wb) = keys[b];
        let (wa, wb) = match preference {
            AlphaPreference::Highest => (nan_last(-wa), nan_last(-wb)),
            AlphaPreference::Lowest => (nan_last(wa), nan_last(wb)),
        };
        nan_last(na).total_cmp(&nan_last(nb)).then(wa.total_cmp(&wb)).then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn esd_simple_matrices() {
        let id = WeightMatrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        for v in esd(&id).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let d = WeightMatrix::new(2, 2, vec![2.0, 0.0, 0.0, 1.0]);
        let e = esd(&d).unwrap();
        assert!((e[0] - 4.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
        let zero = WeightMatrix::new(2, 2, vec![0.0; 4]);
        assert_eq!(esd(&zero).unwrap_err(), SelectionError::DegenerateMatrix);
    }

    #[test]
    fn fixed_xmin_hand_value() {
        let fit = powerlaw_fit_fixed(&[1.0, std::f64::consts::E], 1.0).unwrap();
        assert!((fit.alpha - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fit_preconditions() {
        assert_eq!(powerlaw_fit(&[2.0; 12]).unwrap_err(), SelectionError::DegenerateSpectrum);
        assert!(matches!(powerlaw_fit(&[1.0, 2.0, 3.0]), Err(SelectionError::TooFewSamples { .. })));
        let mut v: Vec<f64> = (1..=12).map(f64::from).collect();
        v[0] = -1.0;
        assert_eq!(powerlaw_fit(&v).unwrap_err(), SelectionError::NonPositive);
    }

    fn stats(log_norm: f64, weighted_alpha: f64) -> SpectralStats {
        SpectralStats { layers: vec![], log_norm, weighted_alpha }
    }

    #[test]
    fn ranking_examples() {
        let s = [stats(2.0, 1.0), stats(1.0, 1.0), stats(3.0, 1.0)];
        assert_eq!(rank_snapshots(&s, 2).unwrap(), vec![1, 0]);
        let s = [stats(1.0, 3.1), stats(1.0, 4.2)];
        assert_eq!(rank_snapshots(&s, 1).unwrap(), vec![1]);
        assert_eq!(rank_snapshots_with(&s, 1, AlphaPreference::Lowest).unwrap(), vec![0]);
        let s = [stats(1.0, 1.0), stats(1.0, 1.0), stats(1.0, 1.0)];
        assert_eq!(rank_snapshots(&s, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(rank_snapshots(&s, 4).unwrap_err(), SelectionError::KTooLarge { k: 4, available: 3 });
    }
}
