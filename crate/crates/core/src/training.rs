//! SGD with cyclic cosine annealing and per-cycle snapshot capture.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::stratified_holdout;
use crate::nn::{batch_loss, LayerParams, Mode, NetError, Network};
use crate::preprocess::rotate_plane;
use crate::tensor::Tensor4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} outside 1..={total}")]
    OutOfRange { epoch: usize, total: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged in cycle {cycle} (epoch {epoch})")]
    NonFiniteLoss { cycle: usize, epoch: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Maximum learning rate at the start of every cycle.
    pub alpha0: f64,
    pub total_epochs: usize,
    pub cycles: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { alpha0: 1.0, total_epochs: 200, cycles: 20 }
    }
}

impl ScheduleConfig {
    /// `⌈T/C⌉` epochs per cycle.
    pub fn cycle_len(&self) -> usize {
        self.total_epochs.div_ceil(self.cycles.max(1))
    }

    /// Number of restarts the schedule actually makes over `T` epochs.
    pub fn realized_cycles(&self) -> usize {
        self.total_epochs.div_ceil(self.cycle_len().max(1))
    }

    /// 0-based cycle of a 1-based epoch.
    pub fn cycle_of(&self, epoch: usize) -> usize {
        (epoch - 1) / self.cycle_len()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("alpha0 {} must be positive", self.alpha0)));
        }
        if self.cycles == 0 || self.cycles > self.total_epochs {
            return Err(TrainError::InvalidConfig(format!(
                "need 1 <= cycles <= epochs, got {} cycles over {} epochs",
                self.cycles, self.total_epochs
            )));
        }
        if self.realized_cycles() != self.cycles {
            return Err(TrainError::InvalidConfig(format!(
                "{} epochs in cycles of {} give {} restarts, not {}",
                self.total_epochs,
                self.cycle_len(),
                self.realized_cycles(),
                self.cycles
            )));
        }
        Ok(())
    }
}

/// `α(t) = α₀/2 · (cos(π·mod(t−1, ⌈T/C⌉)/⌈T/C⌉) + 1)` for 1-based epoch `t`.
pub fn cosine_annealing_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64, TrainError> {
    if epoch == 0 || epoch > cfg.total_epochs {
        return Err(TrainError::OutOfRange { epoch, total: cfg.total_epochs });
    }
    if cfg.cycles == 0 {
        return Err(TrainError::InvalidConfig("cycles must be positive".into()));
    }
    let len = cfg.cycle_len();
    let phase = ((epoch - 1) % len) as f64 / len as f64;
    Ok(cfg.alpha0 / 2.0 * ((std::f64::consts::PI * phase).cos() + 1.0))
}

/// `w_c = N/(K·n_c)`; balanced counts give all ones.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f32>, TrainError> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(TrainError::EmptyClass(c));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&n| (total as f64 / (k * n as f64)) as f32).collect())
}

/// `p ← p − lr·(g + l2·p)` on one flat slice.
pub fn sgd_update(params: &mut [f32], grads: &[f32], lr: f64, l2: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::ShapeMismatch(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        let pv = f64::from(*p);
        *p = (pv - lr * (f64::from(g) + l2 * pv)) as f32;
    }
    Ok(())
}

/// [`sgd_update`] over every layer.
pub fn sgd_step(params: &mut [LayerParams], grads: &[LayerParams], lr: f64, l2: f64) -> Result<(), TrainError> {
    if !(lr >= 0.0) {
        return Err(TrainError::InvalidConfig(format!("learning rate {lr} must be nonnegative")));
    }
    if params.len() != grads.len() {
        return Err(TrainError::ShapeMismatch(format!("{} gradient groups for {} layers", grads.len(), params.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        sgd_update(&mut p.weights, &g.weights, lr, l2)?;
        sgd_update(&mut p.bias, &g.bias, lr, l2)?;
    }
    Ok(())
}

/// Which epoch of a cycle becomes its snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capture {
    /// Lowest validation loss among the cycle's final quarter of epochs.
    BestInFinalQuarter,
    LastEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub l2: f64,
    /// Overrides every dropout layer's rate when set.
    pub dropout: Option<f32>,
    /// Per-class loss weights; derived from training counts when absent.
    pub class_weights: Option<Vec<f32>>,
    pub seed: u64,
    pub capture: Capture,
    /// Stratified share of the data held out for snapshot selection.
    pub validation_fraction: f64,
    /// Random rotation range applied per sample and epoch; 0 disables it.
    pub augment_max_deg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            batch_size: 32,
            l2: 1e-4,
            dropout: None,
            class_weights: None,
            seed: 0,
            capture: Capture::BestInFinalQuarter,
            validation_fraction: 0.1,
            augment_max_deg: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("l2 {} must be nonnegative", self.l2)));
        }
        if let Some(r) = self.dropout {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::InvalidConfig(format!("dropout {r} outside [0, 1)")));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0)) {
                return Err(TrainError::InvalidConfig("class weights must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::InvalidConfig("validation fraction outside [0, 1)".into()));
        }
        if !(self.augment_max_deg >= 0.0) {
            return Err(TrainError::InvalidConfig("rotation range must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Samples with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub inputs: Tensor4,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(inputs: Tensor4, labels: Vec<usize>) -> Result<Self, TrainError> {
        if inputs.batch() != labels.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} samples with {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        LabeledData { inputs: self.inputs.gather(indices), labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Weights captured at the bottom of one annealing cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub network: Network,
    /// 1-based.
    pub cycle: usize,
    /// 1-based epoch the weights come from.
    pub epoch: usize,
    pub val_loss: f64,
    pub val_acc: f64,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cycle: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<EpochRecord>,
}

/// Writes `epoch,cycle,lr,train_loss,val_loss,val_acc` rows with a header.
pub fn write_log_csv<W: Write>(log: &[EpochRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,cycle,lr,train_loss,val_loss,val_acc")?;
    for r in log {
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.cycle, r.lr, r.train_loss, r.val_loss, r.val_acc)?;
    }
    Ok(())
}

const EVAL_BATCH: usize = 128;

/// Mean class-weighted loss and plain accuracy in eval mode.
pub fn evaluate(net: &Network, data: &LabeledData, class_weights: &[f32]) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch = data.inputs.gather(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let cache = net.forward(&batch, Mode::Eval, 0)?;
        let (l, _) = batch_loss(&cache, &labels, class_weights)?;
        loss += l * chunk.len() as f64;
        for (s, &y) in labels.iter().enumerate() {
            if argmax(cache.sample_posterior(s)) == y {
                correct += 1;
            }
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Index of the largest value; lowest index on ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn rotate_batch(batch: &mut Tensor4, seeds: &[u64], max_deg: f64) {
    let (n, c, h, w) = batch.dims();
    for (s, &seed) in seeds.iter().enumerate().take(n) {
        let angle = crate::preprocess::sample_rotation(seed, max_deg);
        let sample = batch.sample_mut(s);
        for ch in 0..c {
            let plane = &mut sample[ch * h * w..(ch + 1) * h * w];
            let rotated = rotate_plane(plane, h, w, angle);
            plane.copy_from_slice(&rotated);
        }
    }
}

/// Trains `net` for `T` epochs and returns one snapshot per annealing cycle.
pub fn train_with_snapshots(net: &Network, data: &LabeledData, cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::InvalidConfig("training data is empty".into()));
    }
    if data.inputs.shape() != net.input_shape() {
        return Err(TrainError::ShapeMismatch(format!(
            "samples are {}, network expects {}",
            data.inputs.shape(),
            net.input_shape()
        )));
    }
    let classes = net.classes();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::Net(NetError::LabelOutOfRange { label: bad, classes }));
    }
    let mut net = net.clone();
    if let Some(rate) = cfg.dropout {
        net.set_dropout(rate)?;
    }

    let (train_idx, val_idx) = stratified_holdout(&data.labels, cfg.validation_fraction, cfg.seed);
    let train = data.subset(&train_idx);
    // tiny datasets can leave nothing to hold out; select on training data then
    let val = if val_idx.is_empty() { train.clone() } else { data.subset(&val_idx) };

    let weights = match &cfg.class_weights {
        Some(w) if w.len() != classes => {
            return Err(TrainError::InvalidConfig(format!("{} class weights for {classes} classes", w.len())))
        }
        Some(w) => w.clone(),
        None => class_weights(&train.class_counts(classes))?,
    };

    let sched = cfg.schedule;
    let len = sched.cycle_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(sched.total_epochs);
    let mut snapshots = Vec::with_capacity(sched.cycles);
    let mut best: Option<(Network, usize, f64, f64)> = None;

    for epoch in 1..=sched.total_epochs {
        let lr = cosine_annealing_lr(epoch, &sched)?;
        let cycle = sched.cycle_of(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = train.inputs.gather(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            if cfg.augment_max_deg > 0.0 {
                let seeds: Vec<u64> = chunk.iter().map(|_| rng.gen()).collect();
                rotate_batch(&mut batch, &seeds, cfg.augment_max_deg);
            }
            let cache = net.forward(&batch, Mode::Train, rng.gen())?;
            let (loss, seed_grad) = batch_loss(&cache, &labels, &weights)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { cycle: cycle + 1, epoch });
            }
            let grads = net.backward(&cache, &seed_grad)?;
            sgd_step(net.params_mut(), &grads.params, lr, cfg.l2)?;
            if net.params().iter().any(|p| p.weights.iter().chain(&p.bias).any(|v| !v.is_finite())) {
                return Err(TrainError::NonFiniteLoss { cycle: cycle + 1, epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_acc) = evaluate(&net, &val, &weights)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { cycle: cycle + 1, epoch });
        }
        log.push(EpochRecord { epoch, cycle: cycle + 1, lr, train_loss, val_loss, val_acc });

        let cycle_start = cycle * len + 1;
        let cycle_end = ((cycle + 1) * len).min(sched.total_epochs);
        let cycle_epochs = cycle_end - cycle_start + 1;
        let window_start = match cfg.capture {
            Capture::BestInFinalQuarter => cycle_end + 1 - cycle_epochs.div_ceil(4),
            Capture::LastEpoch => cycle_end,
        };
        if epoch >= window_start && best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((net.clone(), epoch, val_loss, val_acc));
        }
        if epoch == cycle_end {
            let (network, at, val_loss, val_acc) = best.take().expect("capture window is never empty");
            snapshots.push(Snapshot { network, cycle: cycle + 1, epoch: at, val_loss, val_acc, schedule: sched });
        }
    }
    Ok(TrainRun { snapshots, log })
}
