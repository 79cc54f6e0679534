//! Class-discriminative explanations: CAM, Grad-CAM, Grad-CAM++ and
//! layer-wise relevance propagation, plus heatmap rendering and a one-line
//! textual report.
//!
//! The CAM family works on the feature maps `A^k` of one conv layer (taken
//! after its ReLU when one follows directly) and returns maps at that layer's
//! resolution; [`upsample_normalize`] brings them to input resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::Prediction;
use crate::nn::{LayerSpec, Mode, NetError, Network};
use crate::preprocess::{bilinear_resample, round_half_up, GrayImage};
use crate::tensor::{Shape3, Tensor4};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("CAM needs a conv → global-avg-pool → dense head: {0}")]
    ArchitectureUnsupported(String),
    #[error("layer {0} is not a conv layer")]
    LayerNotConv(usize),
    #[error("layer {index} ({kind}) cannot propagate relevance")]
    UnsupportedLayer { index: usize, kind: &'static str },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("explanations take exactly one input sample, got {0}")]
    NotSingleSample(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Grad-CAM++ denominator stabilizer.
pub const GRADCAMPP_EPS: f64 = 1e-8;
/// LRP denominator stabilizer, applied with the denominator's sign.
pub const LRP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cam,
    GradCam,
    GradCamPp,
    Lrp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::GradCam => "gradcam",
            Method::GradCamPp => "gradcam++",
            Method::Lrp => "lrp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cam" => Some(Method::Cam),
            "gradcam" | "grad_cam" | "grad-cam" => Some(Method::GradCam),
            "gradcam++" | "gradcampp" | "grad_cam_pp" | "grad-cam++" => Some(Method::GradCamPp),
            "lrp" => Some(Method::Lrp),
            _ => None,
        }
    }
}

/// Nonnegative map scaled so its maximum is 1 (or identically 0).
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub method: Method,
    /// Layer the feature maps come from; the input layer for LRP.
    pub layer: usize,
    pub class: usize,
}

impl SaliencyMap {
    /// Clamps negatives to zero and divides by the maximum.
    pub fn from_raw(height: usize, width: usize, raw: &[f64], method: Method, layer: usize, class: usize) -> Self {
        let max = raw.iter().copied().fold(0.0f64, f64::max);
        let values = raw.iter().map(|&v| if max > 0.0 { (v.max(0.0) / max) as f32 } else { 0.0 }).collect();
        Self { height, width, values, method, layer, class }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Row-major first position of the maximum.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width.max(1), best % self.width.max(1))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Feature maps of one conv layer with the target score's derivatives.
#[derive(Clone, Debug)]
pub struct ActivationStack {
    /// Conv layer index.
    pub layer: usize,
    /// Activation index the maps were read from (see [`crate::nn::ForwardCache::activation`]).
    pub activation: usize,
    pub class: usize,
    pub shape: Shape3,
    /// `A^k_ij`, `k × h × w`.
    pub maps: Vec<f32>,
    /// `∂s^c/∂A^k_ij` of the pre-softmax score.
    pub grad: Vec<f64>,
    /// Pre-softmax score `s^c`.
    pub score: f64,
}

impl ActivationStack {
    /// Pixels per feature map.
    pub fn z(&self) -> usize {
        self.shape.h * self.shape.w
    }

    /// `y^c = exp(s^c)`.
    pub fn target(&self) -> f64 {
        self.score.exp()
    }

    /// `∂y/∂A = e^s·∂s/∂A`.
    pub fn first_derivative(&self) -> Vec<f64> {
        let e = self.target();
        self.grad.iter().map(|g| e * g).collect()
    }

    /// `∂²y/∂A² = e^s·(∂s/∂A)²` (ReLU nets are piecewise linear in `A`).
    pub fn second_derivative(&self) -> Vec<f64> {
        let e = self.target();
        self.grad.iter().map(|g| e * g * g).collect()
    }

    /// `∂³y/∂A³ = e^s·(∂s/∂A)³`.
    pub fn third_derivative(&self) -> Vec<f64> {
        let e = self.target();
        self.grad.iter().map(|g| e * g * g * g).collect()
    }

    pub fn map(&self, k: usize) -> &[f32] {
        &self.maps[k * self.z()..(k + 1) * self.z()]
    }

    fn weighted_sum(&self, weights: &[f64]) -> Vec<f64> {
        let z = self.z();
        let mut out = vec![0.0; z];
        for (k, &wk) in weights.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.map(k)) {
                *o += wk * f64::from(a);
            }
        }
        out
    }
}

fn check_input(net: &Network, input: &Tensor4, class: usize) -> Result<(), ExplainError> {
    if input.batch() != 1 {
        return Err(ExplainError::NotSingleSample(input.batch()));
    }
    if class >= net.classes() {
        return Err(ExplainError::ClassOutOfRange { class, classes: net.classes() });
    }
    Ok(())
}

/// Index of the last conv layer.
pub fn last_conv_layer(net: &Network) -> Option<usize> {
    net.layers().iter().rposition(|l| matches!(l, LayerSpec::Conv2d { .. }))
}

/// Activation index holding a conv layer's feature maps.
fn feature_activation(net: &Network, layer: usize) -> Result<usize, ExplainError> {
    match net.layers().get(layer) {
        Some(LayerSpec::Conv2d { .. }) => {}
        _ => return Err(ExplainError::LayerNotConv(layer)),
    }
    Ok(match net.layers().get(layer + 1) {
        Some(LayerSpec::Relu) => layer + 2,
        _ => layer + 1,
    })
}

/// Forward and backward pass for one sample, collecting `A^k` and `∂s^c/∂A^k`.
pub fn activation_stack(
    net: &Network,
    input: &Tensor4,
    class: usize,
    layer: usize,
) -> Result<ActivationStack, ExplainError> {
    check_input(net, input, class)?;
    let act = feature_activation(net, layer)?;
    let cache = net.forward(input, Mode::Eval, 0)?;
    let mut seed = vec![0.0f32; net.classes()];
    seed[class] = 1.0;
    let grads = net.backward(&cache, &seed)?;
    let a = cache.activation(act);
    let g = grads.activation(act).expect("feature maps lie below the scores");
    Ok(ActivationStack {
        layer,
        activation: act,
        class,
        shape: a.shape(),
        maps: a.as_slice().to_vec(),
        grad: g.as_slice().iter().map(|&v| f64::from(v)).collect(),
        score: f64::from(cache.logits()[class]),
    })
}

/// Conv layer and dense layer of a CAM-compatible head.
fn cam_head(net: &Network) -> Result<(usize, usize), ExplainError> {
    let layers = net.layers();
    let mut end = layers.len();
    if matches!(layers.last(), Some(LayerSpec::Softmax)) {
        end -= 1;
    }
    let unsupported = |m: &str| Err(ExplainError::ArchitectureUnsupported(m.to_string()));
    if end < 3 {
        return unsupported("network too short");
    }
    if !matches!(layers[end - 1], LayerSpec::Dense { .. }) {
        return unsupported("last scoring layer is not dense");
    }
    if !matches!(layers[end - 2], LayerSpec::GlobalAvgPool) {
        return unsupported("dense layer is not fed by global average pooling");
    }
    let conv = match layers[end - 3] {
        LayerSpec::Conv2d { .. } => end - 3,
        LayerSpec::Relu if end >= 4 && matches!(layers[end - 4], LayerSpec::Conv2d { .. }) => end - 4,
        _ => return unsupported("global average pooling is not fed by a conv layer"),
    };
    Ok((conv, end - 1))
}

/// `L^c_ij = Σ_k w^c_k A^k_ij` before clamping, with the conv layer index
/// and the maps' shape.
pub fn cam_linear(net: &Network, input: &Tensor4, class: usize) -> Result<(Vec<f64>, usize, Shape3), ExplainError> {
    check_input(net, input, class)?;
    let (conv, dense) = cam_head(net)?;
    let act = feature_activation(net, conv)?;
    let cache = net.forward(input, Mode::Eval, 0)?;
    let a = cache.activation(act);
    let shape = a.shape();
    let w = &net.params()[dense].weights[class * shape.c..(class + 1) * shape.c];
    let z = shape.h * shape.w;
    let mut out = vec![0.0; z];
    for (k, &wk) in w.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&a.as_slice()[k * z..(k + 1) * z]) {
            *o += f64::from(wk) * f64::from(v);
        }
    }
    Ok((out, conv, shape))
}

pub fn cam(net: &Network, input: &Tensor4, class: usize) -> Result<SaliencyMap, ExplainError> {
    let (raw, conv, shape) = cam_linear(net, input, class)?;
    Ok(SaliencyMap::from_raw(shape.h, shape.w, &raw, Method::Cam, conv, class))
}

/// Grad-CAM channel weights `α^c_k = (1/Z)Σ_ij ∂s^c/∂A^k_ij`.
pub fn grad_cam_weights(stack: &ActivationStack) -> Vec<f64> {
    let z = stack.z();
    stack.grad.chunks(z).map(|g| g.iter().sum::<f64>() / z as f64).collect()
}

pub fn grad_cam(net: &Network, input: &Tensor4, class: usize, layer: usize) -> Result<SaliencyMap, ExplainError> {
    let stack = activation_stack(net, input, class, layer)?;
    let raw = stack.weighted_sum(&grad_cam_weights(&stack));
    Ok(SaliencyMap::from_raw(stack.shape.h, stack.shape.w, &raw, Method::GradCam, layer, class))
}

/// Per-position Grad-CAM++ coefficients `α^{kc}_ij` and channel weights `w^c_k`.
pub fn grad_cam_pp_weights(stack: &ActivationStack) -> (Vec<f64>, Vec<f64>) {
    let z = stack.z();
    let d1 = stack.first_derivative();
    let d2 = stack.second_derivative();
    let d3 = stack.third_derivative();
    let mut alpha = vec![0.0; d2.len()];
    let mut weights = Vec::with_capacity(stack.shape.c);
    for k in 0..stack.shape.c {
        let map_sum: f64 = stack.map(k).iter().map(|&v| f64::from(v)).sum();
        let mut wk = 0.0;
        for i in k * z..(k + 1) * z {
            let den = 2.0 * d2[i] + map_sum * d3[i];
            alpha[i] = if den == 0.0 { 0.0 } else { d2[i] / (den + GRADCAMPP_EPS.copysign(den)) };
            wk += alpha[i] * d1[i].max(0.0);
        }
        weights.push(wk);
    }
    (alpha, weights)
}

pub fn grad_cam_pp(net: &Network, input: &Tensor4, class: usize, layer: usize) -> Result<SaliencyMap, ExplainError> {
    let stack = activation_stack(net, input, class, layer)?;
    let (_, weights) = grad_cam_pp_weights(&stack);
    let raw = stack.weighted_sum(&weights);
    Ok(SaliencyMap::from_raw(stack.shape.h, stack.shape.w, &raw, Method::GradCamPp, layer, class))
}

/// Bilinear upsample (corner-aligned) followed by max normalization.
pub fn upsample_normalize(map: &SaliencyMap, out_h: usize, out_w: usize) -> Result<SaliencyMap, ExplainError> {
    if out_h < map.height || out_w < map.width {
        return Err(ExplainError::DimMismatch(format!(
            "cannot upsample {}x{} to {out_h}x{out_w}",
            map.height, map.width
        )));
    }
    let up = bilinear_resample(&map.values, map.height, map.width, out_h, out_w);
    let raw: Vec<f64> = up.iter().map(|&v| f64::from(v)).collect();
    Ok(SaliencyMap::from_raw(out_h, out_w, &raw, map.method, map.layer, map.class))
}

/// Input-layer bounds `b_n ≤ x_n ≤ h_n` for the bounded relevance rule.
#[derive(Clone, Debug, PartialEq)]
pub enum LrpBounds {
    Uniform { low: f64, high: f64 },
    /// One pair per input element.
    PerPixel { low: Vec<f64>, high: Vec<f64> },
}

impl Default for LrpBounds {
    fn default() -> Self {
        LrpBounds::Uniform { low: 0.0, high: 1.0 }
    }
}

impl LrpBounds {
    fn expand(&self, len: usize) -> Result<(Vec<f64>, Vec<f64>), ExplainError> {
        let (low, high) = match self {
            LrpBounds::Uniform { low, high } => (vec![*low; len], vec![*high; len]),
            LrpBounds::PerPixel { low, high } => {
                if low.len() != len || high.len() != len {
                    return Err(ExplainError::InvalidBounds(format!(
                        "{}/{} bounds for {len} inputs",
                        low.len(),
                        high.len()
                    )));
                }
                (low.clone(), high.clone())
            }
        };
        if low.iter().zip(&high).any(|(l, h)| !(l <= h)) {
            return Err(ExplainError::InvalidBounds("lower bound above upper bound".into()));
        }
        Ok((low, high))
    }
}

/// Relevance of every input element for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub shape: Shape3,
    /// Per input element, `c × h × w`.
    pub values: Vec<f64>,
    /// Output relevance `R_t = z_t`.
    pub total: f64,
    /// Relevance summed at every activation from the input (index 0) up to the scores.
    pub layer_sums: Vec<f64>,
    pub class: usize,
}

impl RelevanceMap {
    /// Relevance per pixel, summed over channels.
    pub fn pixel_map(&self) -> Vec<f64> {
        let z = self.shape.h * self.shape.w;
        let mut out = vec![0.0; z];
        for plane in self.values.chunks(z) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        out
    }

    /// Positive relevance as a normalized saliency map.
    pub fn to_saliency(&self) -> SaliencyMap {
        SaliencyMap::from_raw(self.shape.h, self.shape.w, &self.pixel_map(), Method::Lrp, 0, self.class)
    }
}

fn stabilize(z: f64) -> f64 {
    z + LRP_EPS.copysign(z)
}

/// Geometry of a conv layer for the relevance rules.
struct ConvGeom {
    input: Shape3,
    output: Shape3,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Calls `f(out_index, in_index, weight_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (ic_n, ih, iw) = (self.input.c, self.input.h, self.input.w);
        for oc in 0..self.output.c {
            for oy in 0..self.output.h {
                for ox in 0..self.output.w {
                    let o = (oc * self.output.h + oy) * self.output.w + ox;
                    for ic in 0..ic_n {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let i = (ic * ih + iy as usize) * iw + ix as usize;
                                f(o, i, ((oc * ic_n + ic) * k + ky) * k + kx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Taps of a linear layer as `(out, in, weight)` visits.
enum Linear<'a> {
    Conv(ConvGeom),
    Dense { fan_in: usize, fan_out: usize, _w: &'a [f32] },
}

impl Linear<'_> {
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Linear::Conv(g) => g.for_each_tap(f),
            Linear::Dense { fan_in, fan_out, .. } => {
                for o in 0..*fan_out {
                    for i in 0..*fan_in {
                        f(o, i, o * fan_in + i);
                    }
                }
            }
        }
    }
}

/// z⁺ rule: `R_n = Σ_m a_n w⁺_nm / Σ_n' a_n' w⁺_n'm · R_m`.
pub fn zplus_rule(taps: &[(usize, usize, f64)], a: &[f64], r_out: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; r_out.len()];
    for &(o, i, w) in taps {
        z[o] += a[i] * w.max(0.0);
    }
    let s: Vec<f64> = r_out.iter().zip(&z).map(|(r, &zz)| r / stabilize(zz)).collect();
    let mut r_in = vec![0.0; a.len()];
    for &(o, i, w) in taps {
        r_in[i] += a[i] * w.max(0.0) * s[o];
    }
    r_in
}

/// z rule: `R_n = Σ_m a_n w_nm / Σ_n' a_n' w_n'm · R_m`. Used at the scoring
/// layer, where a negative target score has no positive contributions to
/// share it out.
pub fn z_rule(taps: &[(usize, usize, f64)], a: &[f64], r_out: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; r_out.len()];
    for &(o, i, w) in taps {
        z[o] += a[i] * w;
    }
    let s: Vec<f64> = r_out.iter().zip(&z).map(|(r, &zz)| r / stabilize(zz)).collect();
    let mut r_in = vec![0.0; a.len()];
    for &(o, i, w) in taps {
        r_in[i] += a[i] * w * s[o];
    }
    r_in
}

/// Bounded rule for the input layer:
/// `R_n = Σ_m (x_n w_nm − b_n w⁺_nm − h_n w⁻_nm) / Σ_n' (…) · R_m`.
pub fn zb_rule(taps: &[(usize, usize, f64)], x: &[f64], low: &[f64], high: &[f64], r_out: &[f64]) -> Vec<f64> {
    let term = |i: usize, w: f64| x[i] * w - low[i] * w.max(0.0) - high[i] * w.min(0.0);
    let mut z = vec![0.0; r_out.len()];
    for &(o, i, w) in taps {
        z[o] += term(i, w);
    }
    let s: Vec<f64> = r_out.iter().zip(&z).map(|(r, &zz)| r / stabilize(zz)).collect();
    let mut r_in = vec![0.0; x.len()];
    for &(o, i, w) in taps {
        r_in[i] += term(i, w) * s[o];
    }
    r_in
}

/// Layer-wise relevance propagation of the pre-softmax score of `class`.
///
/// Hidden conv/dense layers use the z⁺ rule, the scoring layer the z rule and
/// the first linear layer (when it reads the input directly) the bounded rule; ReLU and dropout pass
/// relevance through, max-pooling routes it to the winning input and global
/// average pooling splits it in proportion to the pooled activations.
pub fn lrp(net: &Network, input: &Tensor4, class: usize, bounds: &LrpBounds) -> Result<RelevanceMap, ExplainError> {
    check_input(net, input, class)?;
    let cache = net.forward(input, Mode::Eval, 0)?;
    let top = net.logits_layer();
    let first_linear = net.layers().iter().position(LayerSpec::has_params);
    let input_layer = first_linear.filter(|&i| net.layers()[..i].iter().all(|l| matches!(l, LayerSpec::Dropout { .. })));
    let (low, high) = bounds.expand(input.len())?;

    let mut r: Vec<f64> = vec![0.0; net.classes()];
    let total = f64::from(cache.logits()[class]);
    r[class] = total;
    let mut layer_sums = vec![0.0; top + 2];
    layer_sums[top + 1] = total;

    for i in (0..=top).rev() {
        let a: Vec<f64> = cache.activation(i).as_slice().iter().map(|&v| f64::from(v)).collect();
        r = match net.layers()[i] {
            LayerSpec::Relu | LayerSpec::Dropout { .. } => r,
            LayerSpec::MaxPool2d { .. } => {
                let idx = cache.pool_argmax(i).expect("max-pool records its winners");
                let mut out = vec![0.0; a.len()];
                for (rv, &j) in r.iter().zip(idx) {
                    out[j] += rv;
                }
                out
            }
            LayerSpec::GlobalAvgPool => {
                let s = net.input_shape_of(i);
                let z = s.h * s.w;
                let mut out = vec![0.0; a.len()];
                for ((o, plane), &rv) in out.chunks_mut(z).zip(a.chunks(z)).zip(&r) {
                    let sum: f64 = plane.iter().sum();
                    for (ov, &av) in o.iter_mut().zip(plane) {
                        *ov = if sum > 0.0 { rv * av / sum } else { rv / z as f64 };
                    }
                }
                out
            }
            spec @ (LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }) => {
                let w = &net.params()[i].weights;
                let linear = match spec {
                    LayerSpec::Conv2d { kernel, stride, padding, .. } => Linear::Conv(ConvGeom {
                        input: net.input_shape_of(i),
                        output: net.output_shape(i),
                        kernel,
                        stride,
                        padding,
                    }),
                    LayerSpec::Dense { in_features, out_features } => {
                        Linear::Dense { fan_in: in_features, fan_out: out_features, _w: w }
                    }
                    _ => unreachable!(),
                };
                let mut taps = Vec::new();
                linear.for_each_tap(|o, n, wi| taps.push((o, n, f64::from(w[wi]))));
                if Some(i) == input_layer {
                    zb_rule(&taps, &a, &low, &high, &r)
                } else if i == top {
                    z_rule(&taps, &a, &r)
                } else {
                    zplus_rule(&taps, &a, &r)
                }
            }
            LayerSpec::Softmax => return Err(ExplainError::UnsupportedLayer { index: i, kind: "softmax" }),
        };
        layer_sums[i] = r.iter().sum();
    }
    Ok(RelevanceMap { shape: input.shape(), values: r, total, layer_sums, class })
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Piecewise-linear blue → green → red over `[0, 1]`, channels in `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.5 {
        [0.0, 2.0 * v, 1.0 - 2.0 * v]
    } else {
        [2.0 * v - 1.0, 2.0 - 2.0 * v, 0.0]
    }
}

/// `(1 − β)·gray + β·colormap(saliency)`.
pub fn render_overlay(base: &GrayImage, sal: &SaliencyMap, beta: f64) -> Result<RgbRaster, ExplainError> {
    if base.height() != sal.height || base.width() != sal.width {
        return Err(ExplainError::DimMismatch(format!(
            "image {}x{} vs saliency {}x{}",
            base.height(),
            base.width(),
            sal.height,
            sal.width
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(ExplainError::DimMismatch(format!("blend factor {beta} outside [0, 1]")));
    }
    let gray = base.unit_values();
    let mut data = Vec::with_capacity(3 * gray.len());
    for (&g, &s) in gray.iter().zip(&sal.values) {
        let cm = colormap(f64::from(s));
        for c in cm {
            let v = (1.0 - beta) * f64::from(g) * 255.0 + beta * c * 255.0;
            data.push(round_half_up(v).clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbRaster { height: base.height(), width: base.width(), data })
}

/// `classified as <label> with a probability of <p>%; method <name>; peak attribution at (<row>,<col>)`
pub fn explain_report(pred: &Prediction, method: &str, sal: &SaliencyMap, labels: &[String]) -> String {
    let label = labels.get(pred.class).cloned().unwrap_or_else(|| pred.class.to_string());
    let percent = round_half_up(pred.probability() * 100.0) as i64;
    let (row, col) = sal.peak();
    format!("classified as {label} with a probability of {percent}%; method {method}; peak attribution at ({row},{col})")
}
