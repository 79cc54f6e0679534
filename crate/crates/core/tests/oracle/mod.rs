//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numeric kernels.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xplain_core::nn::{LayerParams, LayerSpec, Network};
use xplain_core::tensor::Shape3;

/// Piecewise-linear pattern of one layer: ReLU gates or max-pool winners.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    None,
    Gate(Vec<bool>),
    Winners(Vec<usize>),
}

/// f64 replica of a network's eval-mode forward pass.
pub struct RefNet {
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
    pub shapes: Vec<Shape3>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Per-layer dropout multipliers over the whole batch, if any.
    pub masks: Vec<Option<Vec<f64>>>,
}

impl RefNet {
    pub fn new(net: &Network) -> Self {
        let to64 = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        Self {
            input: net.input_shape(),
            layers: net.layers().to_vec(),
            shapes: (0..net.layers().len()).map(|i| net.output_shape(i)).collect(),
            weights: net.params().iter().map(|p| to64(&p.weights)).collect(),
            biases: net.params().iter().map(|p| to64(&p.bias)).collect(),
            masks: vec![None; net.layers().len()],
        }
    }

    pub fn shape_in(&self, i: usize) -> Shape3 {
        if i == 0 {
            self.input
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn logits_layer(&self) -> usize {
        if matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            self.layers.len() - 2
        } else {
            self.layers.len() - 1
        }
    }

    /// Runs layers `start..=logits_layer` on a batch of `n` samples that is
    /// the input of layer `start`; returns activations (index `start` first)
    /// and per-layer patterns.
    pub fn run_from(&self, start: usize, x: Vec<f64>, n: usize) -> (Vec<Vec<f64>>, Vec<Pattern>) {
        let top = self.logits_layer();
        let mut acts = vec![x];
        let mut pats = Vec::new();
        for i in start..=top {
            let a = acts.last().unwrap();
            let si = self.shape_in(i);
            let so = self.shapes[i];
            let (y, p) = match self.layers[i] {
                LayerSpec::Conv2d { kernel, stride, padding, .. } => {
                    (conv(a, n, si, so, &self.weights[i], &self.biases[i], kernel, stride, padding), Pattern::None)
                }
                LayerSpec::Relu => (a.iter().map(|&v| v.max(0.0)).collect(), Pattern::Gate(a.iter().map(|&v| v > 0.0).collect())),
                LayerSpec::MaxPool2d { size, stride } => {
                    let (y, w) = maxpool(a, n, si, so, size, stride);
                    (y, Pattern::Winners(w))
                }
                LayerSpec::GlobalAvgPool => {
                    let z = si.h * si.w;
                    (a.chunks(z).map(|c| c.iter().sum::<f64>() / z as f64).collect(), Pattern::None)
                }
                LayerSpec::Dense { in_features, out_features } => {
                    let mut y = vec![0.0; n * out_features];
                    for s in 0..n {
                        for o in 0..out_features {
                            let mut acc = self.biases[i][o];
                            for k in 0..in_features {
                                acc += self.weights[i][o * in_features + k] * a[s * in_features + k];
                            }
                            y[s * out_features + o] = acc;
                        }
                    }
                    (y, Pattern::None)
                }
                LayerSpec::Dropout { .. } => match &self.masks[i] {
                    Some(m) => (a.iter().zip(m).map(|(v, m)| v * m).collect(), Pattern::None),
                    None => (a.clone(), Pattern::None),
                },
                LayerSpec::Softmax => unreachable!("softmax sits above the scores"),
            };
            acts.push(y);
            pats.push(p);
        }
        (acts, pats)
    }

    pub fn logits(&self, x: &[f64], n: usize) -> (Vec<f64>, Vec<Pattern>) {
        let (mut acts, pats) = self.run_from(0, x.to_vec(), n);
        (acts.pop().unwrap(), pats)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv(x: &[f64], n: usize, si: Shape3, so: Shape3, w: &[f64], b: &[f64], k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * so.len()];
    for s in 0..n {
        for oc in 0..so.c {
            for oy in 0..so.h {
                for ox in 0..so.w {
                    let mut acc = b[oc];
                    for ic in 0..si.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= si.h as isize || ix >= si.w as isize {
                                    continue;
                                }
                                let xv = x[s * si.len() + (ic * si.h + iy as usize) * si.w + ix as usize];
                                acc += w[((oc * si.c + ic) * k + ky) * k + kx] * xv;
                            }
                        }
                    }
                    y[s * so.len() + (oc * so.h + oy) * so.w + ox] = acc;
                }
            }
        }
    }
    y
}

fn maxpool(x: &[f64], n: usize, si: Shape3, so: Shape3, size: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let mut y = Vec::with_capacity(n * so.len());
    let mut win = Vec::with_capacity(n * so.len());
    for s in 0..n {
        for c in 0..so.c {
            for oy in 0..so.h {
                for ox in 0..so.w {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for dy in 0..size {
                        for dx in 0..size {
                            let j = s * si.len() + (c * si.h + oy * stride + dy) * si.w + ox * stride + dx;
                            if x[j] > best.0 {
                                best = (x[j], j);
                            }
                        }
                    }
                    y.push(best.0);
                    win.push(best.1);
                }
            }
        }
    }
    (y, win)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random small network with a conv stem and a dense or GAP head.
pub fn random_net(seed: u64, bias_free: bool) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = rng.gen_range(1..=2);
    let side = rng.gen_range(5..=8);
    let input = Shape3::new(c0, side, side);
    let c1 = rng.gen_range(2..=4);
    let k = if rng.gen_bool(0.5) { 3 } else { 2 };
    let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
    let mut layers = vec![LayerSpec::conv(c0, c1, k, 1, pad), LayerSpec::Relu];
    let mut shape = layers.iter().try_fold(input, |s, l| l.output_shape(s)).unwrap();
    if shape.h >= 4 && rng.gen_bool(0.6) {
        layers.push(LayerSpec::max_pool(2, 2));
        shape = layers.last().unwrap().output_shape(shape).unwrap();
    }
    if shape.h >= 3 && rng.gen_bool(0.5) {
        let c2 = rng.gen_range(2..=4);
        layers.push(LayerSpec::conv(c1, c2, 3, 1, 1));
        layers.push(LayerSpec::Relu);
        shape = Shape3::new(c2, shape.h, shape.w);
    }
    let classes = rng.gen_range(2..=4);
    if rng.gen_bool(0.5) {
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::dense(shape.c, classes));
    } else {
        let hidden = rng.gen_range(3..=6);
        layers.push(LayerSpec::dense(shape.len(), hidden));
        layers.push(LayerSpec::Relu);
        if rng.gen_bool(0.3) {
            layers.push(LayerSpec::Dropout { rate: 0.3 });
        }
        layers.push(LayerSpec::dense(hidden, classes));
    }
    layers.push(LayerSpec::Softmax);
    let mut net = Network::new(input, layers, rng.gen()).unwrap();
    for p in net.params_mut() {
        if bias_free {
            p.bias.iter_mut().for_each(|b| *b = 0.0);
        } else {
            p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    net
}

pub fn random_input(seed: u64, n: usize, shape: Shape3) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn params_of(net: &Network) -> Vec<LayerParams> {
    net.params().to_vec()
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut e: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    e.sort_by(|x, y| y.partial_cmp(x).unwrap());
    e
}

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub max_param_err: f64,
    pub max_activation_err: f64,
    pub checked: usize,
    /// Coordinates whose ReLU or max-pool pattern flips under ±h.
    pub skipped: usize,
}

pub const FD_STEP: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

/// Checks every parameter and activation gradient of `net` against central
/// differences of `L = Σ v·logits` on the f64 reference, for a batch of two
/// samples in train mode.
pub fn gradient_check(net: &Network, seed: u64) -> GradReport {
    use xplain_core::nn::Mode;
    use xplain_core::tensor::Tensor4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let x32 = random_input(rng.gen(), n, net.input_shape());
    let batch = Tensor4::from_vec(n, net.input_shape(), x32.clone()).unwrap();
    let cache = net.forward(&batch, Mode::Train, rng.gen()).unwrap();
    let v: Vec<f64> = (0..n * net.classes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let grads = net.backward(&cache, &v32).unwrap();

    let mut reference = RefNet::new(net);
    for i in 0..net.layers().len() {
        reference.masks[i] = cache.dropout_mask(i).map(|m| m.iter().map(|&x| f64::from(x)).collect());
    }
    let x: Vec<f64> = x32.iter().map(|&x| f64::from(x)).collect();
    let objective = |z: &[f64]| z.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    let (base_acts, base_pats) = reference.run_from(0, x.clone(), n);
    let top = reference.logits_layer();
    let mut report = GradReport::default();

    for i in 0..=top {
        let (nw, nb) = reference.layers[i].param_lens();
        for (is_bias, len) in [(false, nw), (true, nb)] {
            for j in 0..len {
                let eval = |delta: f64| {
                    let mut r = RefNet { masks: reference.masks.clone(), ..RefNet::new(net) };
                    if is_bias {
                        r.biases[i][j] += delta;
                    } else {
                        r.weights[i][j] += delta;
                    }
                    let (z, pats) = r.logits(&x, n);
                    (objective(&z), pats)
                };
                let (lp, pp) = eval(FD_STEP);
                let (lm, pm) = eval(-FD_STEP);
                if pp != base_pats || pm != base_pats {
                    report.skipped += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * FD_STEP);
                let g = &grads.params[i];
                let an = f64::from(if is_bias { g.bias[j] } else { g.weights[j] });
                report.max_param_err = report.max_param_err.max(rel_err(an, fd, FD_FLOOR));
                report.checked += 1;
            }
        }
    }

    for a in 0..=top {
        let g = grads.activation(a).expect("activations below the scores carry gradients");
        for j in 0..base_acts[a].len() {
            let run = |delta: f64| {
                let mut xa = base_acts[a].clone();
                xa[j] += delta;
                let (mut acts, pats) = reference.run_from(a, xa, n);
                (objective(&acts.pop().unwrap()), pats)
            };
            let (lp, pp) = run(FD_STEP);
            let (lm, pm) = run(-FD_STEP);
            if pp != base_pats[a..] || pm != base_pats[a..] {
                report.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let an = f64::from(g.as_slice()[j]);
            report.max_activation_err = report.max_activation_err.max(rel_err(an, fd, FD_FLOOR));
            report.checked += 1;
        }
    }
    report
}

#[derive(Debug, Default, Clone)]
pub struct DerivativeReport {
    pub max_second_err: f64,
    pub max_third_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares the closed-form second and third derivatives of `exp(s^c)` with
/// respect to the last conv layer's feature maps against central differences
/// of `exp` of the f64 reference score. Steps scale with a finite-difference
/// estimate of `∂s/∂A` so truncation stays below 1e-4 relative; derivatives
/// under `1e-6·e^s` are compared absolutely.
pub fn gradcampp_derivative_check(net: &Network, seed: u64) -> DerivativeReport {
    use xplain_core::explain::{activation_stack, last_conv_layer};
    use xplain_core::tensor::Tensor4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x32 = random_input(rng.gen(), 1, net.input_shape());
    let input = Tensor4::from_vec(1, net.input_shape(), x32.clone()).unwrap();
    let class = rng.gen_range(0..net.classes());
    let layer = last_conv_layer(net).expect("random nets have a conv stem");
    let stack = activation_stack(net, &input, class, layer).unwrap();
    let (d2, d3) = (stack.second_derivative(), stack.third_derivative());

    let reference = RefNet::new(net);
    let x: Vec<f64> = x32.iter().map(|&v| f64::from(v)).collect();
    let (base_acts, base_pats) = reference.run_from(0, x, 1);
    let a0 = &base_acts[stack.activation];
    let score = |j: usize, delta: f64| {
        let mut a = a0.clone();
        a[j] += delta;
        let (mut acts, pats) = reference.run_from(stack.activation, a, 1);
        (acts.pop().unwrap()[class], pats == base_pats[stack.activation..])
    };
    let s0 = score(0, 0.0).0;
    let floor = 1e-6 * s0.exp();
    let mut report = DerivativeReport::default();
    for j in 0..a0.len() {
        let probe = 1e-6;
        let (sp, okp) = score(j, probe);
        let (sm, okm) = score(j, -probe);
        if !(okp && okm) {
            report.skipped += 1;
            continue;
        }
        let g = (sp - sm) / (2.0 * probe);
        let h = 0.02 / g.abs().max(1.0);
        let mut y = [0.0; 5];
        let mut same = true;
        for (slot, m) in y.iter_mut().zip([-2.0, -1.0, 0.0, 1.0, 2.0]) {
            let (s, ok) = score(j, m * h);
            *slot = s.exp();
            same &= ok;
        }
        if !same {
            report.skipped += 1;
            continue;
        }
        let fd2 = (y[3] - 2.0 * y[2] + y[1]) / (h * h);
        let fd3 = (y[4] - 2.0 * y[3] + 2.0 * y[1] - y[0]) / (2.0 * h * h * h);
        report.max_second_err = report.max_second_err.max(rel_err(d2[j], fd2, floor));
        report.max_third_err = report.max_third_err.max(rel_err(d3[j], fd3, floor));
        report.checked += 1;
    }
    report
}

/// Largest relative gap between any per-layer relevance sum and the output
/// relevance, for a random input inside the bounds `[-1, 1]` and the
/// top-scoring class.
pub fn lrp_conservation(net: &Network, seed: u64) -> f64 {
    use xplain_core::explain::{lrp, LrpBounds};
    use xplain_core::tensor::Tensor4;
    let x = random_input(seed, 1, net.input_shape());
    let input = Tensor4::from_vec(1, net.input_shape(), x).unwrap();
    let probs = net.predict(&input).unwrap();
    let class = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
    let map = lrp(net, &input, class, &LrpBounds::Uniform { low: -1.0, high: 1.0 }).unwrap();
    map.layer_sums.iter().map(|s| (s - map.total).abs() / map.total.abs()).fold(0.0, f64::max)
}

/// Inverse-CDF samples of a continuous power law `p(x) ∝ x^-alpha`, `x ≥ xmin`.
pub fn pareto_samples(n: usize, alpha: f64, xmin: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| xmin * (1.0 - rng.gen::<f64>()).powf(-1.0 / (alpha - 1.0))).collect()
}

/// Random `m × k` matrix of strictly positive rows summing to one.
pub fn random_posteriors(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-3..1.0f64).powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}
