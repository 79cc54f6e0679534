//! Layered network description with a reverse-mode pass over cached activations.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s plus the trainable
//! parameters of the conv and dense layers. [`Network::forward`] records every
//! intermediate activation in a [`ForwardCache`]; [`Network::backward`] walks
//! the cache in reverse from a gradient on the pre-softmax scores and returns
//! gradients for every parameter and every cached activation.
//!
//! Values are stored as `f32`; dot products and reductions accumulate in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape3, Tensor4};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error("cache was produced with different network parameters")]
    StaleCache,
    #[error("non-finite value")]
    NonFinite,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// One layer of a plain feed-forward stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Fully connected; the input is flattened in `c, h, w` order.
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Inverted dropout, active only in [`Mode::Train`].
    Dropout {
        rate: f32,
    },
    /// Only allowed as the final layer.
    Softmax,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense { in_features, out_features }
    }

    pub fn max_pool(size: usize, stride: usize) -> Self {
        LayerSpec::MaxPool2d { size, stride }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// `(weights, biases)` element counts.
    pub fn param_lens(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                (out_channels * in_channels * kernel * kernel, out_channels)
            }
            LayerSpec::Dense { in_features, out_features } => (in_features * out_features, out_features),
            _ => (0, 0),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                (in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
            LayerSpec::Dense { in_features, out_features } => (in_features, out_features),
            _ => (0, 0),
        }
    }

    /// Output shape for a given input, checking every shape parameter.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, String> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err("conv2d shape parameters must be positive".into());
                }
                if input.c != in_channels {
                    return Err(format!("conv2d expects {in_channels} channels, got {}", input.c));
                }
                let oh = conv_out(input.h, kernel, stride, padding)
                    .ok_or_else(|| format!("kernel {kernel} larger than padded height {}", input.h + 2 * padding))?;
                let ow = conv_out(input.w, kernel, stride, padding)
                    .ok_or_else(|| format!("kernel {kernel} larger than padded width {}", input.w + 2 * padding))?;
                Ok(Shape3::new(out_channels, oh, ow))
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err("maxpool2d shape parameters must be positive".into());
                }
                let oh = conv_out(input.h, size, stride, 0).ok_or("pool window larger than input")?;
                let ow = conv_out(input.w, size, stride, 0).ok_or("pool window larger than input")?;
                Ok(Shape3::new(input.c, oh, ow))
            }
            LayerSpec::GlobalAvgPool => {
                if input.h * input.w == 0 {
                    return Err("global-avg-pool over empty map".into());
                }
                Ok(Shape3::new(input.c, 1, 1))
            }
            LayerSpec::Dense { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return Err("dense shape parameters must be positive".into());
                }
                if input.len() != in_features {
                    return Err(format!("dense expects {in_features} inputs, got {}", input.len()));
                }
                Ok(Shape3::new(out_features, 1, 1))
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input)
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::Softmax => {
                if input.h != 1 || input.w != 1 {
                    return Err("softmax expects a flat score vector".into());
                }
                Ok(input)
            }
        }
    }
}

/// `floor((len + 2·pad − kernel)/stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Weights and biases of one layer; both empty for parameter-free layers.
///
/// Conv weights are laid out `[out][in][ky][kx]`, dense weights `[out][in]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self { weights: vec![0.0; self.weights.len()], bias: vec![0.0; self.bias.len()] }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input: Shape3,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape3>,
    params: Vec<LayerParams>,
    classes: usize,
}

impl Network {
    /// Builds a network and initializes weights uniformly in
    /// `±sqrt(6/(fan_in + fan_out))`; biases start at zero.
    pub fn new(input: Shape3, layers: Vec<LayerSpec>, seed: u64) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|l| {
                let (nw, nb) = l.param_lens();
                let (fan_in, fan_out) = l.fans();
                let bound = if nw > 0 { (6.0 / (fan_in + fan_out) as f64).sqrt() as f32 } else { 0.0 };
                LayerParams {
                    weights: (0..nw).map(|_| rng.gen_range(-bound..=bound)).collect(),
                    bias: vec![0.0; nb],
                }
            })
            .collect();
        Self::with_params(input, layers, params)
    }

    /// Builds a network around existing parameters.
    pub fn with_params(input: Shape3, layers: Vec<LayerSpec>, params: Vec<LayerParams>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::InvalidLayer { index: 0, reason: "network has no layers".into() });
        }
        if matches!(layers.as_slice(), [LayerSpec::Softmax]) {
            return Err(NetError::InvalidLayer { index: 0, reason: "softmax needs a scoring layer below it".into() });
        }
        if input.is_empty() {
            return Err(NetError::ShapeMismatch("empty input shape".into()));
        }
        if params.len() != layers.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} parameter groups for {} layers",
                params.len(),
                layers.len()
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input;
        for (index, (layer, p)) in layers.iter().zip(&params).enumerate() {
            if matches!(layer, LayerSpec::Softmax) && index + 1 != layers.len() {
                return Err(NetError::InvalidLayer { index, reason: "softmax must be the final layer".into() });
            }
            cur = layer.output_shape(cur).map_err(|reason| NetError::InvalidLayer { index, reason })?;
            let (nw, nb) = layer.param_lens();
            if p.weights.len() != nw || p.bias.len() != nb {
                return Err(NetError::InvalidLayer {
                    index,
                    reason: format!("expected {nw}+{nb} parameters, got {}+{}", p.weights.len(), p.bias.len()),
                });
            }
            if p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite);
            }
            shapes.push(cur);
        }
        if cur.h != 1 || cur.w != 1 {
            return Err(NetError::InvalidLayer {
                index: layers.len() - 1,
                reason: format!("final output {cur} is not a score vector"),
            });
        }
        Ok(Self { input, classes: cur.c, layers, shapes, params })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> Shape3 {
        self.shapes[i]
    }

    /// Input shape of layer `i`.
    pub fn input_shape_of(&self, i: usize) -> Shape3 {
        if i == 0 {
            self.input
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    /// Index of the layer whose output holds the pre-softmax scores.
    pub fn logits_layer(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Softmax) => self.layers.len() - 2,
            _ => self.layers.len() - 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::len).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.weights);
            out.extend_from_slice(&p.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f32]) -> Result<(), NetError> {
        if flat.len() != self.param_count() {
            return Err(NetError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let nw = p.weights.len();
            p.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = p.bias.len();
            p.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Sets the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f32) -> Result<(), NetError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NetError::InvalidLayer { index: 0, reason: format!("dropout rate {rate} outside [0, 1)") });
        }
        for l in &mut self.layers {
            if let LayerSpec::Dropout { rate: r } = l {
                *r = rate;
            }
        }
        Ok(())
    }

    /// FNV-1a over the parameter bits; ties caches to a parameter state.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.weights.iter().chain(&p.bias) {
                h ^= u64::from(v.to_bits());
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn forward(&self, batch: &Tensor4, mode: Mode, seed: u64) -> Result<ForwardCache, NetError> {
        if batch.shape() != self.input {
            return Err(NetError::ShapeMismatch(format!(
                "batch samples are {}, network expects {}",
                batch.shape(),
                self.input
            )));
        }
        let n = batch.batch();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = &activations[i];
            let out_shape = self.shapes[i];
            let (y, a) = match *layer {
                LayerSpec::Conv2d { kernel, stride, padding, .. } => {
                    (conv_forward(x, &self.params[i], out_shape, kernel, stride, padding), Aux::None)
                }
                LayerSpec::Relu => (x.map(|v| v.max(0.0)), Aux::None),
                LayerSpec::MaxPool2d { size, stride } => {
                    let (y, idx) = maxpool_forward(x, out_shape, size, stride);
                    (y, Aux::Argmax(idx))
                }
                LayerSpec::GlobalAvgPool => (gap_forward(x), Aux::None),
                LayerSpec::Dense { .. } => (dense_forward(x, &self.params[i], out_shape), Aux::None),
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Eval => (x.clone(), Aux::None),
                    Mode::Train => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f32> =
                            (0..x.len()).map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep }).collect();
                        let mut y = x.clone();
                        y.as_mut_slice().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        (y, Aux::Mask(mask))
                    }
                },
                LayerSpec::Softmax => {
                    let k = out_shape.c;
                    let mut y = x.clone();
                    for s in 0..n {
                        softmax_in_place(&mut y.as_mut_slice()[s * k..(s + 1) * k]);
                    }
                    (y, Aux::None)
                }
            };
            activations.push(y);
            aux.push(a);
        }
        let logits_layer = self.logits_layer();
        let logits = activations[logits_layer + 1].as_slice().to_vec();
        let mut posterior = logits.clone();
        for s in 0..n {
            softmax_in_place(&mut posterior[s * self.classes..(s + 1) * self.classes]);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite);
        }
        Ok(ForwardCache {
            activations,
            aux,
            logits,
            posterior,
            classes: self.classes,
            logits_layer,
            fingerprint: self.fingerprint(),
        })
    }

    /// Class posteriors in eval mode, `n × K` row-major.
    pub fn predict(&self, batch: &Tensor4) -> Result<Vec<f32>, NetError> {
        Ok(self.forward(batch, Mode::Eval, 0)?.posterior)
    }

    /// Reverse pass from `seed_grad` (`n × K`, gradient on the pre-softmax scores).
    pub fn backward(&self, cache: &ForwardCache, seed_grad: &[f32]) -> Result<GradientSet, NetError> {
        if cache.fingerprint != self.fingerprint() || cache.activations.len() != self.layers.len() + 1 {
            return Err(NetError::StaleCache);
        }
        let n = cache.batch();
        if seed_grad.len() != n * self.classes {
            return Err(NetError::ShapeMismatch(format!(
                "seed gradient has {} values, expected {}",
                seed_grad.len(),
                n * self.classes
            )));
        }
        let top = cache.logits_layer;
        let mut act_grads: Vec<Option<Tensor4>> = vec![None; self.layers.len() + 1];
        let mut param_grads: Vec<LayerParams> = self.params.iter().map(LayerParams::zeros_like).collect();
        act_grads[top + 1] = Some(Tensor4::from_vec(n, self.shapes[top], seed_grad.to_vec())?);

        for i in (0..=top).rev() {
            let dy = act_grads[i + 1].as_ref().expect("gradient flows downward");
            let x = &cache.activations[i];
            let dx = match (self.layers[i], &cache.aux[i]) {
                (LayerSpec::Conv2d { kernel, stride, padding, .. }, _) => {
                    conv_backward(x, dy, &self.params[i], &mut param_grads[i], kernel, stride, padding)
                }
                (LayerSpec::Relu, _) => {
                    let mut dx = dy.clone();
                    dx.as_mut_slice()
                        .iter_mut()
                        .zip(x.as_slice())
                        .for_each(|(g, &v)| if v <= 0.0 { *g = 0.0 });
                    dx
                }
                (LayerSpec::MaxPool2d { .. }, Aux::Argmax(idx)) => {
                    let mut dx = Tensor4::zeros(n, x.shape());
                    let d = dx.as_mut_slice();
                    for (g, &j) in dy.as_slice().iter().zip(idx) {
                        d[j] += g;
                    }
                    dx
                }
                (LayerSpec::GlobalAvgPool, _) => {
                    let s = x.shape();
                    let z = (s.h * s.w) as f32;
                    let mut dx = Tensor4::zeros(n, s);
                    for (plane, &g) in dx.as_mut_slice().chunks_mut(s.h * s.w).zip(dy.as_slice()) {
                        plane.fill(g / z);
                    }
                    dx
                }
                (LayerSpec::Dense { .. }, _) => dense_backward(x, dy, &self.params[i], &mut param_grads[i]),
                (LayerSpec::Dropout { .. }, Aux::Mask(mask)) => {
                    let mut dx = dy.clone();
                    dx.as_mut_slice().iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                    dx
                }
                (LayerSpec::Dropout { .. }, _) => dy.clone(),
                (LayerSpec::MaxPool2d { .. }, _) | (LayerSpec::Softmax, _) => return Err(NetError::StaleCache),
            };
            act_grads[i] = Some(dx);
        }
        Ok(GradientSet { params: param_grads, activations: act_grads })
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<f32>),
}

/// Every intermediate activation of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    activations: Vec<Tensor4>,
    aux: Vec<Aux>,
    logits: Vec<f32>,
    posterior: Vec<f32>,
    classes: usize,
    logits_layer: usize,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.activations[0].batch()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input(&self) -> &Tensor4 {
        &self.activations[0]
    }

    /// Output of layer `i`.
    pub fn output(&self, i: usize) -> &Tensor4 {
        &self.activations[i + 1]
    }

    /// Activation `i`: 0 is the input, `i > 0` the output of layer `i − 1`.
    pub fn activation(&self, i: usize) -> &Tensor4 {
        &self.activations[i]
    }

    /// Pre-softmax scores, `n × K`.
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Softmax posteriors, `n × K`.
    pub fn posterior(&self) -> &[f32] {
        &self.posterior
    }

    pub fn sample_posterior(&self, n: usize) -> &[f32] {
        &self.posterior[n * self.classes..(n + 1) * self.classes]
    }

    /// Keep-scale mask of dropout layer `i` in train mode.
    pub fn dropout_mask(&self, i: usize) -> Option<&[f32]> {
        match &self.aux[i] {
            Aux::Mask(m) => Some(m),
            _ => None,
        }
    }

    /// Flat input index chosen by each pooled output of max-pool layer `i`.
    pub fn pool_argmax(&self, i: usize) -> Option<&[usize]> {
        match &self.aux[i] {
            Aux::Argmax(a) => Some(a),
            _ => None,
        }
    }
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct GradientSet {
    /// Per layer, congruent with [`Network::params`].
    pub params: Vec<LayerParams>,
    activations: Vec<Option<Tensor4>>,
}

impl GradientSet {
    /// Gradient on activation `i` (same indexing as [`ForwardCache::activation`]).
    /// `None` above the pre-softmax scores.
    pub fn activation(&self, i: usize) -> Option<&Tensor4> {
        self.activations[i].as_ref()
    }

    /// Gradient on the output of layer `i`.
    pub fn output(&self, i: usize) -> Option<&Tensor4> {
        self.activations[i + 1].as_ref()
    }

    pub fn input(&self) -> &Tensor4 {
        self.activations[0].as_ref().expect("input gradient is always computed")
    }
}

pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        let e = f64::from(*x - max).exp();
        *x = e as f32;
        sum += e;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / sum) as f32;
    }
}

/// Softmax of a score vector, computed in `f64`.
pub fn softmax(scores: &[f32]) -> Vec<f32> {
    let mut v = scores.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `−w[label] · ln(posterior[label])`.
///
/// A zero posterior is clamped to [`PROB_FLOOR`] rather than rejected, so a
/// confidently wrong prediction yields a large finite loss.
pub fn cross_entropy_weighted(posterior: &[f32], label: usize, class_weights: &[f32]) -> Result<f64, NetError> {
    if label >= posterior.len() {
        return Err(NetError::LabelOutOfRange { label, classes: posterior.len() });
    }
    if class_weights.len() != posterior.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            posterior.len()
        )));
    }
    let p = f64::from(posterior[label]).max(PROB_FLOOR);
    Ok(-f64::from(class_weights[label]) * p.ln())
}

/// Mean class-weighted cross-entropy over the batch, and its gradient on the
/// pre-softmax scores (`w_y/n · (p − onehot(y))`).
pub fn batch_loss(cache: &ForwardCache, labels: &[usize], class_weights: &[f32]) -> Result<(f64, Vec<f32>), NetError> {
    let n = cache.batch();
    let k = cache.classes();
    if labels.len() != n {
        return Err(NetError::ShapeMismatch(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0f32; n * k];
    for (s, &y) in labels.iter().enumerate() {
        let p = cache.sample_posterior(s);
        total += cross_entropy_weighted(p, y, class_weights)?;
        let scale = f64::from(class_weights[y]) / n as f64;
        for c in 0..k {
            let target = if c == y { 1.0 } else { 0.0 };
            grad[s * k + c] = (scale * (f64::from(p[c]) - target)) as f32;
        }
    }
    Ok((total / n as f64, grad))
}

fn conv_forward(x: &Tensor4, p: &LayerParams, out: Shape3, k: usize, stride: usize, pad: usize) -> Tensor4 {
    let (n, ic, ih, iw) = x.dims();
    let mut y = Tensor4::zeros(n, out);
    let xs = x.as_slice();
    let ys = y.as_mut_slice();
    let w = &p.weights;
    let mut acc = vec![0.0f64; out.h * out.w];
    for s in 0..n {
        for oc in 0..out.c {
            acc.fill(f64::from(p.bias[oc]));
            for c in 0..ic {
                let plane = &xs[(s * ic + c) * ih * iw..(s * ic + c + 1) * ih * iw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = f64::from(w[((oc * ic + c) * k + ky) * k + kx]);
                        for oy in 0..out.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * iw..(iy as usize + 1) * iw];
                            let arow = &mut acc[oy * out.w..(oy + 1) * out.w];
                            for (ox, a) in arow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < iw as isize {
                                    *a += wv * f64::from(row[ix as usize]);
                                }
                            }
                        }
                    }
                }
            }
            let base = (s * out.c + oc) * out.h * out.w;
            for (dst, a) in ys[base..base + out.h * out.w].iter_mut().zip(&acc) {
                *dst = *a as f32;
            }
        }
    }
    y
}

fn conv_backward(
    x: &Tensor4,
    dy: &Tensor4,
    p: &LayerParams,
    g: &mut LayerParams,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor4 {
    let (n, ic, ih, iw) = x.dims();
    let (_, oc_n, oh, ow) = dy.dims();
    let xs = x.as_slice();
    let ds = dy.as_slice();
    let mut dx = vec![0.0f64; xs.len()];
    let mut dw = vec![0.0f64; p.weights.len()];
    let mut db = vec![0.0f64; p.bias.len()];
    for s in 0..n {
        for oc in 0..oc_n {
            let dplane = &ds[(s * oc_n + oc) * oh * ow..(s * oc_n + oc + 1) * oh * ow];
            db[oc] += dplane.iter().map(|&v| f64::from(v)).sum::<f64>();
            for c in 0..ic {
                let xoff = (s * ic + c) * ih * iw;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * ic + c) * k + ky) * k + kx;
                        let wv = f64::from(p.weights[widx]);
                        let mut acc = 0.0f64;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let rbase = xoff + iy as usize * iw;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let gv = f64::from(dplane[oy * ow + ox]);
                                acc += gv * f64::from(xs[rbase + ix as usize]);
                                dx[rbase + ix as usize] += gv * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    for (d, v) in g.weights.iter_mut().zip(&dw) {
        *d += *v as f32;
    }
    for (d, v) in g.bias.iter_mut().zip(&db) {
        *d += *v as f32;
    }
    Tensor4::from_vec(n, x.shape(), dx.into_iter().map(|v| v as f32).collect()).expect("shape preserved")
}

fn maxpool_forward(x: &Tensor4, out: Shape3, size: usize, stride: usize) -> (Tensor4, Vec<usize>) {
    let (n, c, ih, iw) = x.dims();
    let xs = x.as_slice();
    let mut y = Tensor4::zeros(n, out);
    let mut idx = Vec::with_capacity(y.len());
    let ys = y.as_mut_slice();
    let mut o = 0;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * ih * iw;
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut best = base + oy * stride * iw + ox * stride;
                    for py in 0..size {
                        for px in 0..size {
                            let j = base + (oy * stride + py) * iw + ox * stride + px;
                            if xs[j] > xs[best] {
                                best = j;
                            }
                        }
                    }
                    ys[o] = xs[best];
                    idx.push(best);
                    o += 1;
                }
            }
        }
    }
    (y, idx)
}

fn gap_forward(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let z = (h * w) as f64;
    let data = x
        .as_slice()
        .chunks(h * w)
        .map(|plane| (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / z) as f32)
        .collect();
    Tensor4::from_vec(n, Shape3::new(c, 1, 1), data).expect("shape preserved")
}

fn dense_forward(x: &Tensor4, p: &LayerParams, out: Shape3) -> Tensor4 {
    let n = x.batch();
    let fan_in = x.shape().len();
    let mut y = Tensor4::zeros(n, out);
    for s in 0..n {
        let xi = x.sample(s);
        for (o, dst) in y.sample_mut(s).iter_mut().enumerate() {
            let row = &p.weights[o * fan_in..(o + 1) * fan_in];
            let acc: f64 = row.iter().zip(xi).map(|(&w, &v)| f64::from(w) * f64::from(v)).sum();
            *dst = (acc + f64::from(p.bias[o])) as f32;
        }
    }
    y
}

fn dense_backward(x: &Tensor4, dy: &Tensor4, p: &LayerParams, g: &mut LayerParams) -> Tensor4 {
    let n = x.batch();
    let fan_in = x.shape().len();
    let fan_out = dy.shape().len();
    let mut dx = Tensor4::zeros(n, x.shape());
    let mut dw = vec![0.0f64; p.weights.len()];
    let mut db = vec![0.0f64; fan_out];
    for s in 0..n {
        let xi = x.sample(s);
        let gi = dy.sample(s);
        let mut dxi = vec![0.0f64; fan_in];
        for o in 0..fan_out {
            let go = f64::from(gi[o]);
            db[o] += go;
            let row = &p.weights[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                dw[o * fan_in + i] += go * f64::from(xi[i]);
                dxi[i] += go * f64::from(row[i]);
            }
        }
        for (d, v) in dx.sample_mut(s).iter_mut().zip(dxi) {
            *d = v as f32;
        }
    }
    for (d, v) in g.weights.iter_mut().zip(&dw) {
        *d += *v as f32;
    }
    for (d, v) in g.bias.iter_mut().zip(&db) {
        *d += *v as f32;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dense(w: f32, b: f32) -> Network {
        let layers = vec![LayerSpec::dense(1, 1)];
        Network::with_params(Shape3::new(1, 1, 1), layers, vec![LayerParams { weights: vec![w], bias: vec![b] }])
            .unwrap()
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        assert!(Network::new(Shape3::new(3, 1, 1), vec![LayerSpec::Softmax], 0).is_err());
        let layers = vec![LayerSpec::dense(3, 3), LayerSpec::Softmax];
        let params = vec![LayerParams { weights: vec![0.0; 9], bias: vec![0.0; 3] }, LayerParams::default()];
        let net = Network::with_params(Shape3::new(3, 1, 1), layers, params).unwrap();
        let x = Tensor4::filled(1, Shape3::new(3, 1, 1), 0.7);
        let cache = net.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(cache.logits(), &[0.0; 3]);
        for &p in cache.posterior() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        assert_eq!(cache.output(1).as_slice(), cache.posterior());
    }

    #[test]
    fn one_by_one_conv_scales() {
        let layers = vec![LayerSpec::conv(1, 1, 1, 1, 0), LayerSpec::GlobalAvgPool];
        let params = vec![LayerParams { weights: vec![2.0], bias: vec![0.0] }, LayerParams::default()];
        let net = Network::with_params(Shape3::new(1, 3, 3), layers, params).unwrap();
        let x = Tensor4::filled(1, Shape3::new(1, 3, 3), 1.0);
        let cache = net.forward(&x, Mode::Eval, 0).unwrap();
        assert!(cache.output(0).as_slice().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_output_dims_follow_formula() {
        for (len, k, s, p) in [(7, 3, 1, 0), (7, 3, 2, 1), (8, 2, 2, 0), (5, 5, 1, 2), (32, 3, 1, 1)] {
            let l = LayerSpec::conv(1, 2, k, s, p);
            let out = l.output_shape(Shape3::new(1, len, len)).unwrap();
            assert_eq!(out.h, (len + 2 * p - k) / s + 1);
            assert_eq!(out.w, out.h);
        }
        assert!(LayerSpec::conv(1, 2, 5, 1, 0).output_shape(Shape3::new(1, 3, 3)).is_err());
    }

    #[test]
    fn identity_chain_passes_gradient() {
        let net = tiny_dense(1.0, 0.0);
        let x = Tensor4::filled(1, Shape3::new(1, 1, 1), 0.7);
        let cache = net.forward(&x, Mode::Eval, 0).unwrap();
        let g = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.input().as_slice(), &[1.0]);
        assert_eq!(g.params[0].weights, vec![0.7]);
        assert_eq!(g.params[0].bias, vec![1.0]);
    }

    #[test]
    fn relu_gates_negative_inputs() {
        let layers = vec![LayerSpec::Relu, LayerSpec::GlobalAvgPool];
        let net = Network::new(Shape3::new(1, 2, 2), layers, 0).unwrap();
        let x = Tensor4::from_vec(1, Shape3::new(1, 2, 2), vec![-1.0, 2.0, -0.5, 3.0]).unwrap();
        let cache = net.forward(&x, Mode::Eval, 0).unwrap();
        let g = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.input().as_slice(), &[0.0, 0.25, 0.0, 0.25]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = tiny_dense(1.0, 0.0);
        let x = Tensor4::filled(1, Shape3::new(1, 1, 1), 1.0);
        let cache = net.forward(&x, Mode::Eval, 0).unwrap();
        net.params_mut()[0].weights[0] = 2.0;
        assert_eq!(net.backward(&cache, &[1.0]).unwrap_err(), NetError::StaleCache);
    }

    #[test]
    fn batch_shape_mismatch() {
        let net = tiny_dense(1.0, 0.0);
        let x = Tensor4::zeros(1, Shape3::new(1, 2, 1));
        assert!(matches!(net.forward(&x, Mode::Eval, 0), Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_must_be_last() {
        let layers = vec![LayerSpec::Softmax, LayerSpec::Relu];
        assert!(matches!(
            Network::new(Shape3::new(3, 1, 1), layers, 0),
            Err(NetError::InvalidLayer { index: 0, .. })
        ));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let layers = vec![LayerSpec::Dropout { rate: 0.5 }, LayerSpec::GlobalAvgPool];
        let net = Network::new(Shape3::new(1, 8, 8), layers, 0).unwrap();
        let x = Tensor4::filled(1, Shape3::new(1, 8, 8), 1.0);
        let eval = net.forward(&x, Mode::Eval, 3).unwrap();
        assert_eq!(eval.output(0), &x);
        let train = net.forward(&x, Mode::Train, 3).unwrap();
        let vals = train.output(0).as_slice();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(vals.contains(&0.0));
        let again = net.forward(&x, Mode::Train, 3).unwrap();
        assert_eq!(again.output(0), train.output(0));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_weighted(&[1.0, 0.0, 0.0], 0, &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        let e = std::f32::consts::E;
        let p = [1.0 / e, 0.5 * (1.0 - 1.0 / e), 0.5 * (1.0 - 1.0 / e)];
        let l = cross_entropy_weighted(&p, 0, &[2.0, 1.0, 1.0]).unwrap();
        assert!((l - 2.0).abs() < 1e-6);
        // zero probability clamps instead of failing
        let l = cross_entropy_weighted(&[0.0, 1.0], 0, &[1.0, 1.0]).unwrap();
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(cross_entropy_weighted(&[1.0], 3, &[1.0]).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let layers = vec![LayerSpec::conv(1, 2, 3, 1, 1), LayerSpec::Relu, LayerSpec::GlobalAvgPool, LayerSpec::dense(2, 3)];
        let net = Network::new(Shape3::new(1, 4, 4), layers, 9).unwrap();
        let mut other = net.clone();
        other.set_flat_params(&vec![0.0; net.param_count()]).unwrap();
        other.set_flat_params(&net.flat_params()).unwrap();
        assert_eq!(other, net);
        assert_eq!(net.classes(), 3);
    }
}
