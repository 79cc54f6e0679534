//! Chest-radiograph enhancement chain.
//!
//! Images travel through two pixel regimes: 8-bit grey levels (histogram
//! equalization works here) and unit-interval reals (diffusion, sharpening,
//! resizing). [`normalize`] is the only bridge from the first to the second.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape3, Tensor4};

/// Highest grey level.
pub const MAX_LEVEL: u8 = 255;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stage `{stage}` expects {expected} input")]
    RegimeError { stage: &'static str, expected: &'static str },
    #[error("standard deviation must be positive")]
    ZeroStd,
    #[error("pixel value {0} outside the unit interval")]
    OutOfRange(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Integer,
    Real,
}

#[derive(Clone, Debug, PartialEq)]
enum Pixels {
    Levels(Vec<u8>),
    Unit(Vec<f32>),
}

/// Single-channel raster in either the grey-level or the unit-interval regime.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Pixels,
}

impl GrayImage {
    pub fn from_levels(height: usize, width: usize, levels: Vec<u8>) -> Result<Self, PreprocessError> {
        if levels.len() != height * width {
            return Err(PreprocessError::InvalidConfig(format!(
                "{} levels for a {height}x{width} image",
                levels.len()
            )));
        }
        Ok(Self { height, width, pixels: Pixels::Levels(levels) })
    }

    pub fn from_unit(height: usize, width: usize, values: Vec<f32>) -> Result<Self, PreprocessError> {
        if values.len() != height * width {
            return Err(PreprocessError::InvalidConfig(format!(
                "{} values for a {height}x{width} image",
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PreprocessError::OutOfRange(bad));
        }
        Ok(Self { height, width, pixels: Pixels::Unit(values) })
    }

    pub fn constant_level(height: usize, width: usize, level: u8) -> Self {
        Self { height, width, pixels: Pixels::Levels(vec![level; height * width]) }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn regime(&self) -> Regime {
        match self.pixels {
            Pixels::Levels(_) => Regime::Integer,
            Pixels::Unit(_) => Regime::Real,
        }
    }

    pub fn levels(&self) -> Option<&[u8]> {
        match &self.pixels {
            Pixels::Levels(v) => Some(v),
            Pixels::Unit(_) => None,
        }
    }

    pub fn unit(&self) -> Option<&[f32]> {
        match &self.pixels {
            Pixels::Unit(v) => Some(v),
            Pixels::Levels(_) => None,
        }
    }

    /// Pixel values on a unit scale regardless of regime.
    pub fn unit_values(&self) -> Vec<f32> {
        match &self.pixels {
            Pixels::Levels(v) => v.iter().map(|&l| f32::from(l) / 255.0).collect(),
            Pixels::Unit(v) => v.clone(),
        }
    }

    /// Grey levels, converting real pixels with half-up rounding.
    pub fn to_levels(&self) -> Vec<u8> {
        match &self.pixels {
            Pixels::Levels(v) => v.clone(),
            Pixels::Unit(v) => v.iter().map(|&x| round_half_up(f64::from(x) * 255.0).clamp(0.0, 255.0) as u8).collect(),
        }
    }

    fn raw_values(&self) -> Vec<f32> {
        match &self.pixels {
            Pixels::Levels(v) => v.iter().map(|&l| f32::from(l)).collect(),
            Pixels::Unit(v) => v.clone(),
        }
    }

    /// Rebuilds an image in this image's regime from raw values
    /// (grey levels are rounded half-up and clamped).
    fn with_raw_values(&self, values: Vec<f32>) -> GrayImage {
        let pixels = match self.pixels {
            Pixels::Levels(_) => Pixels::Levels(
                values.iter().map(|&v| round_half_up(f64::from(v)).clamp(0.0, 255.0) as u8).collect(),
            ),
            Pixels::Unit(_) => Pixels::Unit(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()),
        };
        GrayImage { height: self.height, width: self.width, pixels }
    }

    fn require(&self, regime: Regime, stage: &'static str) -> Result<(), PreprocessError> {
        if self.regime() == regime {
            Ok(())
        } else {
            let expected = match regime {
                Regime::Integer => "an 8-bit grey-level",
                Regime::Real => "a unit-interval",
            };
            Err(PreprocessError::RegimeError { stage, expected })
        }
    }
}

/// `floor(x + 0.5)`.
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Grey-level counts of an 8-bit image.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    counts: [u64; 256],
    total: u64,
}

impl Histogram {
    pub fn counts(&self) -> &[u64; 256] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// `p(X_k) = n_k / N`.
    pub fn density(&self, level: u8) -> f64 {
        self.counts[level as usize] as f64 / self.total as f64
    }

    /// `c(X_k) = Σ_{j ≤ k} p(X_j)`, computed from integer counts.
    pub fn cumulative(&self, level: u8) -> f64 {
        let below: u64 = self.counts[..=level as usize].iter().sum();
        below as f64 / self.total as f64
    }

    pub fn cdf(&self) -> [f64; 256] {
        let mut out = [0.0; 256];
        let mut run = 0u64;
        for (k, c) in self.counts.iter().enumerate() {
            run += c;
            out[k] = run as f64 / self.total as f64;
        }
        out
    }
}

pub fn histogram(img: &GrayImage) -> Result<Histogram, PreprocessError> {
    img.require(Regime::Integer, "histogram")?;
    if img.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let mut counts = [0u64; 256];
    for &l in img.levels().expect("integer regime") {
        counts[l as usize] += 1;
    }
    Ok(Histogram { counts, total: img.len() as u64 })
}

/// Global histogram equalization: `f(X_k) = X_0 + (X_L − X_0)·c(X_k)` with
/// `X_0 = 0`, `X_L = 255`, rounded half-up.
pub fn equalize(img: &GrayImage) -> Result<GrayImage, PreprocessError> {
    let hist = histogram(img)?;
    let cdf = hist.cdf();
    let lut: Vec<u8> = cdf.iter().map(|&c| round_half_up(255.0 * c).min(255.0) as u8).collect();
    let levels = img.levels().expect("integer regime").iter().map(|&l| lut[l as usize]).collect();
    GrayImage::from_levels(img.height, img.width, levels)
}

/// Edge-stopping function of the anisotropic diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coefficient {
    /// `exp(−(g/K)²)`
    C1,
    /// `1/(1 + (g/K)²)`
    C2,
    /// Tukey's biweight, zero above `K√2`.
    C3,
}

pub fn diffusion_coefficient(g: f64, k: f64, variant: Coefficient) -> f64 {
    let r = g / k;
    match variant {
        Coefficient::C1 => (-r * r).exp(),
        Coefficient::C2 => 1.0 / (1.0 + r * r),
        Coefficient::C3 => {
            let limit = k * std::f64::consts::SQRT_2;
            if g <= limit {
                let q = g / limit;
                0.5 * (1.0 - q * q).powi(2)
            } else {
                0.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Gradient threshold `K`.
    pub threshold: f64,
    pub iterations: usize,
    /// Time step `λ`; the explicit 4-neighbour scheme is stable up to 0.25.
    pub step: f64,
    pub coefficient: Coefficient,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { threshold: 0.1, iterations: 20, step: 0.2, coefficient: Coefficient::C3 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(PreprocessError::InvalidConfig(format!("gradient threshold {} must be positive", self.threshold)));
        }
        if self.iterations == 0 {
            return Err(PreprocessError::InvalidConfig("diffusion needs at least one iteration".into()));
        }
        if !(self.step > 0.0 && self.step <= 0.25) {
            return Err(PreprocessError::InvalidConfig(format!("time step {} outside (0, 0.25]", self.step)));
        }
        Ok(())
    }
}

/// Perona-Malik diffusion with 4-neighbour differences and reflective
/// (zero-flux) borders, so total intensity is conserved.
pub fn perona_malik(img: &GrayImage, cfg: &DiffusionConfig) -> Result<GrayImage, PreprocessError> {
    img.require(Regime::Real, "perona_malik")?;
    cfg.validate()?;
    let (h, w) = (img.height, img.width);
    let mut u: Vec<f64> = img.unit().expect("real regime").iter().map(|&v| f64::from(v)).collect();
    let mut next = u.clone();
    for _ in 0..cfg.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let centre = u[i];
                let mut flux = 0.0;
                let mut add = |j: usize| {
                    let d = u[j] - centre;
                    flux += diffusion_coefficient(d.abs(), cfg.threshold, cfg.coefficient) * d;
                };
                if y > 0 {
                    add(i - w);
                }
                if y + 1 < h {
                    add(i + w);
                }
                if x > 0 {
                    add(i - 1);
                }
                if x + 1 < w {
                    add(i + 1);
                }
                next[i] = centre + cfg.step * flux;
            }
        }
        std::mem::swap(&mut u, &mut next);
    }
    Ok(GrayImage { height: h, width: w, pixels: Pixels::Unit(u.into_iter().map(|v| v as f32).collect()) })
}

/// 3×3 sharpening kernels; both sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnsharpKernel {
    EdgeEnhance,
    Sharpen,
}

impl UnsharpKernel {
    pub fn weights(&self) -> [[f64; 3]; 3] {
        match self {
            UnsharpKernel::EdgeEnhance => {
                let o = -1.0 / 2.0;
                [[o, o, o], [o, 10.0 / 2.0, o], [o, o, o]]
            }
            UnsharpKernel::Sharpen => {
                let o = -2.0 / 16.0;
                [[o, o, o], [o, 32.0 / 16.0, o], [o, o, o]]
            }
        }
    }
}

/// Mirror index for a border that repeats the edge pixel (`… b a | a b …`).
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

pub fn unsharp(img: &GrayImage, kernel: UnsharpKernel) -> Result<GrayImage, PreprocessError> {
    img.require(Regime::Real, "unsharp")?;
    let (h, w) = (img.height, img.width);
    let src = img.unit().expect("real regime");
    let k = kernel.weights();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (dy, row) in k.iter().enumerate() {
                let sy = reflect(y as isize + dy as isize - 1, h);
                for (dx, &kv) in row.iter().enumerate() {
                    let sx = reflect(x as isize + dx as isize - 1, w);
                    acc += kv * f64::from(src[sy * w + sx]);
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(GrayImage { height: h, width: w, pixels: Pixels::Unit(out) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactConfig {
    /// Pixels strictly above this quantile of the image's values are candidates.
    pub quantile: f64,
    /// Candidate components at least this fraction of the image area are kept.
    pub max_component_fraction: f64,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self { quantile: 0.98, max_component_fraction: 0.01 }
    }
}

impl ArtifactConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(PreprocessError::InvalidConfig(format!("artifact quantile {} outside (0, 1]", self.quantile)));
        }
        if !(self.max_component_fraction > 0.0 && self.max_component_fraction <= 1.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "component fraction {} outside (0, 1]",
                self.max_component_fraction
            )));
        }
        Ok(())
    }
}

/// Nearest-rank quantile.
fn quantile(values: &[f32], q: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Bright, small, 8-connected blobs: the burned-in text mask.
pub fn artifact_mask(img: &GrayImage, cfg: &ArtifactConfig) -> Result<Vec<bool>, PreprocessError> {
    cfg.validate()?;
    if img.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let (h, w) = (img.height, img.width);
    let values = img.raw_values();
    let t = quantile(&values, cfg.quantile);
    let bright: Vec<bool> = values.iter().map(|&v| v > t).collect();
    let limit = cfg.max_component_fraction * (h * w) as f64;
    let mut mask = vec![false; h * w];
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if !bright[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if bright[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if (component.len() as f64) < limit {
            for &i in &component {
                mask[i] = true;
            }
        }
    }
    Ok(mask)
}

/// Convergence threshold of the inpainting sweeps.
const INPAINT_TOLERANCE: f64 = 1e-4;
const INPAINT_MAX_SWEEPS: usize = 100_000;

/// Masks small bright components and fills them by repeated 4-neighbour
/// averaging until no pixel moves by more than 1e-4.
///
/// Works in either regime; grey-level results are rounded half-up.
pub fn remove_text_artifacts(img: &GrayImage, cfg: &ArtifactConfig) -> Result<GrayImage, PreprocessError> {
    let mask = artifact_mask(img, cfg)?;
    if !mask.iter().any(|&m| m) {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let raw = img.raw_values();
    let mut u: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
    let known: Vec<f64> = u.iter().zip(&mask).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
    let fill = if known.is_empty() { 0.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
    let holes: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
    for &i in &holes {
        u[i] = fill;
    }
    for _ in 0..INPAINT_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for &i in &holes {
            let (y, x) = (i / w, i % w);
            let mut sum = 0.0;
            let mut n = 0.0;
            if y > 0 {
                sum += u[i - w];
                n += 1.0;
            }
            if y + 1 < h {
                sum += u[i + w];
                n += 1.0;
            }
            if x > 0 {
                sum += u[i - 1];
                n += 1.0;
            }
            if x + 1 < w {
                sum += u[i + 1];
                n += 1.0;
            }
            if n > 0.0 {
                let v = sum / n;
                max_change = max_change.max((v - u[i]).abs());
                u[i] = v;
            }
        }
        if max_change < INPAINT_TOLERANCE {
            break;
        }
    }
    let mut out = raw;
    for &i in &holes {
        out[i] = u[i] as f32;
    }
    Ok(img.with_raw_values(out))
}

/// `(x − mean)/std` elementwise.
pub fn standardize(batch: &Tensor4, mean: f64, std: f64) -> Result<Tensor4, PreprocessError> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(PreprocessError::ZeroStd);
    }
    Ok(batch.map(|v| ((f64::from(v) - mean) / std) as f32))
}

/// Population mean and standard deviation over every value of every tensor.
pub fn dataset_stats<'a>(tensors: impl IntoIterator<Item = &'a Tensor4>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for t in tensors {
        for &v in t.as_slice() {
            let v = f64::from(v);
            n += 1;
            sum += v;
            sq += v * v;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    (mean, (sq / n as f64 - mean * mean).max(0.0).sqrt())
}

/// Grey levels to unit-interval reals (`level / 255`).
pub fn normalize(img: &GrayImage) -> Result<GrayImage, PreprocessError> {
    img.require(Regime::Integer, "normalize")?;
    Ok(GrayImage { height: img.height, width: img.width, pixels: Pixels::Unit(img.unit_values()) })
}

/// Corner-aligned bilinear resampling of a row-major plane.
pub fn bilinear_resample(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |i: usize, out: usize, inp: usize| -> f64 {
        if out <= 1 {
            (inp as f64 - 1.0) / 2.0
        } else {
            i as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = coord(oy, out_h, h);
        for ox in 0..out_w {
            let sx = coord(ox, out_w, w);
            out.push(sample_bilinear(src, h, w, sy, sx) as f32);
        }
    }
    out
}

/// Bilinear sample at `(y, x)`, which must lie inside `[0, h−1] × [0, w−1]`.
fn sample_bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = (y.floor().max(0.0) as usize).min(h - 1);
    let x0 = (x.floor().max(0.0) as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: usize, xx: usize| f64::from(src[yy * w + xx]);
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize of a real image to `side × side`, replicated to three channels.
pub fn resize_bilinear(img: &GrayImage, side: usize) -> Result<Tensor4, PreprocessError> {
    let plane = resize_plane(img, side)?;
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor4::from_vec(1, Shape3::new(3, side, side), data).expect("finite resampled values"))
}

/// Bilinear resize keeping a single plane.
pub fn resize_image(img: &GrayImage, side: usize) -> Result<GrayImage, PreprocessError> {
    let plane = resize_plane(img, side)?;
    Ok(GrayImage { height: side, width: side, pixels: Pixels::Unit(plane) })
}

fn resize_plane(img: &GrayImage, side: usize) -> Result<Vec<f32>, PreprocessError> {
    img.require(Regime::Real, "resize")?;
    if side == 0 {
        return Err(PreprocessError::InvalidConfig("resize side must be at least 1".into()));
    }
    if img.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    Ok(bilinear_resample(img.unit().expect("real regime"), img.height, img.width, side, side))
}

/// Angle in degrees, uniform on `[−max_deg, max_deg]`, drawn from `seed`.
pub fn sample_rotation(seed: u64, max_deg: f64) -> f64 {
    if max_deg <= 0.0 {
        return 0.0;
    }
    ChaCha8Rng::seed_from_u64(seed).gen_range(-max_deg..=max_deg)
}

/// Rotates a plane about its centre by `degrees` (counter-clockwise in
/// display coordinates), bilinear resampling, zero outside the source.
pub fn rotate_plane(src: &[f32], h: usize, w: usize, degrees: f64) -> Vec<f32> {
    if degrees == 0.0 {
        return src.to_vec();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let eps = 1e-9;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse mapping: rotate the output position back by −θ
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            if sy < -eps || sx < -eps || sy > h as f64 - 1.0 + eps || sx > w as f64 - 1.0 + eps {
                continue;
            }
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            out[y * w + x] = sample_bilinear(src, h, w, sy, sx) as f32;
        }
    }
    out
}

/// Random rotation augmentation; deterministic given `seed`.
pub fn augment_rotate(img: &GrayImage, seed: u64, max_deg: f64) -> Result<GrayImage, PreprocessError> {
    if !(max_deg >= 0.0) {
        return Err(PreprocessError::InvalidConfig(format!("max rotation {max_deg} must be nonnegative")));
    }
    let angle = sample_rotation(seed, max_deg);
    if angle == 0.0 || img.is_empty() {
        return Ok(img.clone());
    }
    let rotated = rotate_plane(&img.raw_values(), img.height, img.width, angle);
    Ok(img.with_raw_values(rotated))
}

/// One step of the enhancement chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Ingestion already yields single-channel images; kept so stage lists
    /// read like the full chain.
    Grayscale,
    RemoveTextArtifacts,
    Equalize,
    Normalize,
    PeronaMalik,
    Unsharp(UnsharpKernel),
    Resize,
    Standardize,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Grayscale => "grayscale",
            Stage::RemoveTextArtifacts => "remove_text_artifacts",
            Stage::Equalize => "equalize",
            Stage::Normalize => "normalize",
            Stage::PeronaMalik => "perona_malik",
            Stage::Unsharp(UnsharpKernel::EdgeEnhance) => "unsharp_edge_enhance",
            Stage::Unsharp(UnsharpKernel::Sharpen) => "unsharp_sharpen",
            Stage::Resize => "resize",
            Stage::Standardize => "standardize",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Some(match name {
            "grayscale" => Stage::Grayscale,
            "remove_text_artifacts" => Stage::RemoveTextArtifacts,
            "equalize" => Stage::Equalize,
            "normalize" => Stage::Normalize,
            "perona_malik" => Stage::PeronaMalik,
            "unsharp" | "unsharp_edge_enhance" => Stage::Unsharp(UnsharpKernel::EdgeEnhance),
            "unsharp_sharpen" => Stage::Unsharp(UnsharpKernel::Sharpen),
            "resize" => Stage::Resize,
            "standardize" => Stage::Standardize,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub stages: Vec<Stage>,
    pub artifact: ArtifactConfig,
    pub diffusion: DiffusionConfig,
    /// Dataset statistics used by [`Stage::Standardize`].
    pub mean: f64,
    pub std: f64,
    pub side: usize,
    pub max_rotation_deg: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage::Grayscale,
                Stage::RemoveTextArtifacts,
                Stage::Equalize,
                Stage::Normalize,
                Stage::PeronaMalik,
                Stage::Unsharp(UnsharpKernel::EdgeEnhance),
                Stage::Resize,
                Stage::Standardize,
            ],
            artifact: ArtifactConfig::default(),
            diffusion: DiffusionConfig::default(),
            mean: 0.0,
            std: 1.0,
            side: 224,
            max_rotation_deg: 15.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.stages.is_empty() {
            return Err(PreprocessError::InvalidConfig("stage list is empty".into()));
        }
        self.artifact.validate()?;
        self.diffusion.validate()?;
        if self.side == 0 {
            return Err(PreprocessError::InvalidConfig("output side must be at least 1".into()));
        }
        if !(self.max_rotation_deg >= 0.0) {
            return Err(PreprocessError::InvalidConfig("max rotation must be nonnegative".into()));
        }
        if self.stages.contains(&Stage::Standardize) && !(self.std > 0.0) {
            return Err(PreprocessError::ZeroStd);
        }
        Ok(())
    }

    /// Same chain with the standardization step removed, for computing the
    /// dataset statistics it needs.
    pub fn without_standardize(&self) -> PreprocessConfig {
        let mut cfg = self.clone();
        cfg.stages.retain(|s| *s != Stage::Standardize);
        cfg
    }
}

enum Data {
    Image(GrayImage),
    Tensor(Tensor4),
}

/// Runs the configured stages in order.
///
/// The result is `1 × 3 × side × side` after [`Stage::Resize`], otherwise
/// `1 × 1 × h × w`; a chain that never leaves the grey-level regime is rejected.
pub fn preprocess_pipeline(img: &GrayImage, cfg: &PreprocessConfig) -> Result<Tensor4, PreprocessError> {
    cfg.validate()?;
    let mut data = Data::Image(img.clone());
    for stage in &cfg.stages {
        data = match (stage, data) {
            (Stage::Grayscale, Data::Image(i)) => Data::Image(i),
            (Stage::RemoveTextArtifacts, Data::Image(i)) => Data::Image(remove_text_artifacts(&i, &cfg.artifact)?),
            (Stage::Equalize, Data::Image(i)) => Data::Image(equalize(&i)?),
            (Stage::Normalize, Data::Image(i)) => Data::Image(normalize(&i)?),
            (Stage::PeronaMalik, Data::Image(i)) => Data::Image(perona_malik(&i, &cfg.diffusion)?),
            (Stage::Unsharp(k), Data::Image(i)) => Data::Image(unsharp(&i, *k)?),
            (Stage::Resize, Data::Image(i)) => Data::Tensor(resize_bilinear(&i, cfg.side)?),
            (Stage::Standardize, Data::Tensor(t)) => Data::Tensor(standardize(&t, cfg.mean, cfg.std)?),
            (Stage::Standardize, Data::Image(_)) => {
                return Err(PreprocessError::RegimeError { stage: "standardize", expected: "a resized tensor" })
            }
            (s, Data::Tensor(_)) => return Err(PreprocessError::RegimeError { stage: s.name(), expected: "an image" }),
        };
    }
    match data {
        Data::Tensor(t) => Ok(t),
        Data::Image(i) => {
            i.require(Regime::Real, "pipeline output")?;
            let (h, w) = (i.height, i.width);
            Ok(Tensor4::from_vec(1, Shape3::new(1, h, w), i.unit_values()).expect("finite pixels"))
        }
    }
}
