//! Combining per-model class posteriors into one prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("invalid posterior row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },
}

/// Rows must sum to one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `M × K` class probabilities, one row per member model.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    classes: usize,
    rows: Vec<Vec<f64>>,
}

impl PosteriorMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        let classes = rows.first().ok_or(EnsembleError::EmptyEnsemble)?.len();
        for (row, r) in rows.iter().enumerate() {
            if r.len() != classes || classes == 0 {
                return Err(EnsembleError::InvalidRow { row, reason: format!("{} entries, expected {classes}", r.len()) });
            }
            if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(EnsembleError::InvalidRow { row, reason: "entry outside [0, 1]".into() });
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(EnsembleError::InvalidRow { row, reason: format!("sums to {sum}") });
            }
        }
        Ok(Self { classes, rows })
    }

    /// From `f32` posteriors as produced by a forward pass.
    pub fn from_f32_rows(rows: &[&[f32]]) -> Result<Self, EnsembleError> {
        Self::new(rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect())
    }

    pub fn members(&self) -> usize {
        self.rows.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `Σ_m P̂_m(k)` for every class.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.classes).map(|k| self.rows.iter().map(|r| r[k]).sum()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub distribution: Vec<f64>,
    pub class: usize,
    /// Member posteriors the prediction was built from.
    pub members: Vec<Vec<f64>>,
}

impl Prediction {
    pub fn probability(&self) -> f64 {
        self.distribution[self.class]
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    /// Softmax of the summed member posteriors.
    Scpa,
    /// Arithmetic mean of the member posteriors.
    ScpaMean,
    /// Class with the highest single-member score.
    Pm,
}

impl EnsembleMethod {
    pub fn combine(&self, p: &PosteriorMatrix) -> Prediction {
        match self {
            EnsembleMethod::Scpa => scpa(p),
            EnsembleMethod::ScpaMean => scpa_mean(p),
            EnsembleMethod::Pm => pm(p),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "scpa" => Some(EnsembleMethod::Scpa),
            "scpa_mean" | "mean" => Some(EnsembleMethod::ScpaMean),
            "pm" => Some(EnsembleMethod::Pm),
            _ => None,
        }
    }
}

/// `P(j) = exp(Σ_m P̂_m(j)) / Σ_k exp(Σ_m P̂_m(k))`.
pub fn scpa(p: &PosteriorMatrix) -> Prediction {
    let distribution = softmax(&p.column_sums());
    Prediction { class: argmax(&distribution), distribution, members: p.rows.clone() }
}

/// Plain posterior averaging.
pub fn scpa_mean(p: &PosteriorMatrix) -> Prediction {
    let m = p.members() as f64;
    let distribution: Vec<f64> = p.column_sums().into_iter().map(|s| s / m).collect();
    Prediction { class: argmax(&distribution), distribution, members: p.rows.clone() }
}

/// Prediction maximization: `score_k = max_m P̂_m(k)`, renormalized for reporting.
pub fn pm(p: &PosteriorMatrix) -> Prediction {
    let scores: Vec<f64> =
        (0..p.classes).map(|k| p.rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let class = argmax(&scores);
    let total: f64 = scores.iter().sum();
    let distribution = scores.iter().map(|s| s / total).collect();
    Prediction { distribution, class, members: p.rows.clone() }
}
