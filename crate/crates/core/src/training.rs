//! Masked heatmap loss, Adam, and a per-channel linear heatmap predictor.
//!
//! The loss is the plain sum over channels and pixels
//! `L = sum_k sum_ij n_k (p_k(i,j) - t_k(i,j))^2`, with `n_k` the target
//! mask. With masking disabled every `n_k` is taken as 1, so channels that a
//! source dataset never labels are pulled toward their all-zero targets.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_channel: Vec<f64>,
    /// Channels excluded from the loss by the mask.
    pub masked_channel_count: usize,
}

fn check_shapes(pred: &HeatmapStack, target: &HeatmapStack) -> Result<()> {
    if pred.same_shape(target) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "prediction is {}x{}x{}, target is {}x{}x{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            target.channels(),
            target.height(),
            target.width()
        )))
    }
}

fn channel_active(target: &HeatmapStack, k: usize, masking: bool) -> bool {
    !masking || target.mask()[k]
}

pub fn masked_mse(pred: &HeatmapStack, target: &HeatmapStack, masking: bool) -> Result<LossBreakdown> {
    check_shapes(pred, target)?;
    let mut per_channel = vec![0.0; pred.channels()];
    let mut masked = 0;
    for (k, slot) in per_channel.iter_mut().enumerate() {
        if !channel_active(target, k, masking) {
            masked += 1;
            continue;
        }
        *slot = pred
            .channel(k)
            .iter()
            .zip(target.channel(k))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
    }
    Ok(LossBreakdown {
        total: per_channel.iter().sum(),
        per_channel,
        masked_channel_count: masked,
    })
}

/// `dL/dp = 2 n_k (p - t)`; masked channels are exactly zero.
pub fn masked_mse_grad(pred: &HeatmapStack, target: &HeatmapStack, masking: bool) -> Result<HeatmapStack> {
    check_shapes(pred, target)?;
    let mut grad = HeatmapStack::zeros(pred.channels(), pred.height(), pred.width(), pred.stride());
    grad.set_mask(target.mask().to_vec())?;
    for k in 0..pred.channels() {
        if !channel_active(target, k, masking) {
            continue;
        }
        for ((g, p), t) in grad
            .channel_mut(k)
            .iter_mut()
            .zip(pred.channel(k))
            .zip(target.channel(k))
        {
            *g = 2.0 * (p - t);
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::Parameter(format!(
            "adam shapes disagree: {} params, {} grads, {}/{} moments",
            n,
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at index {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        let m = hp.beta1 * state.first_moment[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * state.second_moment[i] + (1.0 - hp.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        params[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Predictor

/// `f` input planes of `height x width` for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlanes {
    count: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeaturePlanes {
    pub fn new(count: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != count * height * width {
            return Err(Error::Parameter(format!(
                "{} feature values for {count}x{height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }
}

/// Per-channel linear map `p_k = bias_k + sum_c w_{k,c} feat_c`.
///
/// Weights are stored row-major as `m x (f + 1)` with the bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictor {
    channels: usize,
    features: usize,
    weights: Vec<f64>,
}

impl ToyPredictor {
    pub fn zeros(channels: usize, features: usize) -> Self {
        Self {
            channels,
            features,
            weights: vec![0.0; channels * (features + 1)],
        }
    }

    pub fn from_weights(channels: usize, features: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != channels * (features + 1) {
            return Err(Error::Parameter(format!(
                "{} weights for {channels} channels and {features} features",
                weights.len()
            )));
        }
        Ok(Self {
            channels,
            features,
            weights,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Weights of channel `k`, bias last.
    pub fn channel_weights(&self, k: usize) -> &[f64] {
        let row = self.features + 1;
        &self.weights[k * row..(k + 1) * row]
    }

    pub fn predict(&self, input: &FeaturePlanes, stride: u32) -> Result<HeatmapStack> {
        if input.count != self.features {
            return Err(Error::Parameter(format!(
                "predictor expects {} feature planes, got {}",
                self.features, input.count
            )));
        }
        let mut out = HeatmapStack::zeros(self.channels, input.height, input.width, stride);
        for k in 0..self.channels {
            let row = self.channel_weights(k).to_vec();
            let plane = out.channel_mut(k);
            plane.fill(row[self.features]);
            for (c, &w) in row[..self.features].iter().enumerate() {
                for (p, x) in plane.iter_mut().zip(input.plane(c)) {
                    *p += w * x;
                }
            }
        }
        Ok(out)
    }

    /// Chain rule from `dL/dp` to `dL/dweights`, accumulated into `acc`.
    pub fn accumulate_gradient(&self, input: &FeaturePlanes, grad: &HeatmapStack, acc: &mut [f64]) {
        let row = self.features + 1;
        for k in 0..self.channels {
            let g = grad.channel(k);
            let out = &mut acc[k * row..(k + 1) * row];
            for (c, slot) in out[..self.features].iter_mut().enumerate() {
                *slot += g.iter().zip(input.plane(c)).map(|(a, b)| a * b).sum::<f64>();
            }
            out[self.features] += g.iter().sum::<f64>();
        }
    }

    /// Serialized as a heatmap stack of `m` channels, each `1 x (f + 1)`,
    /// with stride 1 and every mask byte set.
    pub fn to_stack(&self) -> HeatmapStack {
        HeatmapStack::from_parts(
            self.channels,
            1,
            self.features + 1,
            1,
            vec![true; self.channels],
            self.weights.clone(),
        )
        .expect("weight block matches its own shape")
    }

    pub fn from_stack(stack: &HeatmapStack) -> Result<Self> {
        if stack.height() != 1 || stack.width() == 0 {
            return Err(Error::Parameter("parameter block must be m x 1 x (f+1)".into()));
        }
        Self::from_weights(stack.channels(), stack.width() - 1, stack.values().to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_stack().write_file(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_stack(&HeatmapStack::read_file(path)?)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub masking_enabled: bool,
    pub seed: u64,
    /// Iterations of linear warmup from `warmup_ratio * lr` to `lr`; 0 disables it.
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

pub const PRESET_NAMES: [&str; 6] = [
    "toy",
    "top-down",
    "bottom-up-quadruped-pretrain",
    "bottom-up-labmice-pretrain",
    "bottom-up-finetune",
    "pseudo-label",
];

impl TrainConfig {
    /// Desk-scale defaults for the linear predictor.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 200,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            masking_enabled: true,
            seed: 0,
            warmup_iters: 0,
            warmup_ratio: 1.0,
        }
    }

    /// Top-down HRNet schedule: 210 epochs, decay x0.1 at 170 and 200.
    pub fn top_down() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 210,
            lr_decay_epochs: vec![170, 200],
            batch_size: 64,
            warmup_iters: 500,
            warmup_ratio: 0.01,
            ..Self::toy()
        }
    }

    fn bottom_up(epochs: usize, decay: Vec<usize>) -> Self {
        Self {
            learning_rate: 1.5e-3,
            epochs,
            lr_decay_epochs: decay,
            batch_size: 64,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "toy" => Self::toy(),
            "top-down" => Self::top_down(),
            "bottom-up-quadruped-pretrain" => Self::bottom_up(100, vec![50, 70]),
            "bottom-up-labmice-pretrain" => Self::bottom_up(200, vec![100, 160]),
            "bottom-up-finetune" => Self::bottom_up(210, vec![160, 200]),
            "pseudo-label" => FinetuneOverride::default().apply(&Self::toy()),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("lr_decay_epochs must be < epochs".into());
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio <= 1.0) {
            return bad("warmup_ratio must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate for `epoch`, after step decay but before warmup.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }

    /// Linear warmup multiplier for a global iteration index.
    pub fn warmup_factor(&self, iteration: usize) -> f64 {
        if iteration >= self.warmup_iters {
            1.0
        } else {
            let progress = iteration as f64 / self.warmup_iters as f64;
            self.warmup_ratio + (1.0 - self.warmup_ratio) * progress
        }
    }

    fn adam(&self, lr: f64) -> AdamParams {
        AdamParams {
            learning_rate: lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Overrides applied for pseudo-label fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOverride {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for FinetuneOverride {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 5,
        }
    }
}

impl FinetuneOverride {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            lr_decay_epochs: Vec::new(),
            warmup_iters: 0,
            warmup_ratio: 1.0,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeaturePlanes,
    pub target: HeatmapStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss over the full training set after the epoch's updates.
    pub total_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub predictor: ToyPredictor,
    pub history: Vec<EpochRecord>,
}

/// Loss summed over `samples`.
pub fn dataset_loss(predictor: &ToyPredictor, samples: &[TrainSample], masking: bool) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = predictor.predict(&s.features, s.target.stride())?;
        total += masked_mse(&pred, &s.target, masking)?.total;
    }
    Ok(total)
}

/// Gradient of the summed loss over `samples` with respect to the weights.
pub fn batch_gradient(predictor: &ToyPredictor, samples: &[&TrainSample], masking: bool) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; predictor.weights.len()];
    for s in samples {
        let pred = predictor.predict(&s.features, s.target.stride())?;
        let grad = masked_mse_grad(&pred, &s.target, masking)?;
        predictor.accumulate_gradient(&s.features, &grad, &mut acc);
    }
    Ok(acc)
}

/// Minibatch Adam on the (masked) loss. Sample order per epoch comes from
/// the protocol RNG seeded with `config.seed`; gradients are summed
/// sequentially, so a run is bit-reproducible.
pub fn train(predictor: ToyPredictor, samples: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.target.channels() != predictor.channels || s.features.count != predictor.features {
            return Err(Error::Parameter(format!(
                "sample {i}: {} channels / {} features, predictor has {} / {}",
                s.target.channels(),
                s.features.count,
                predictor.channels,
                predictor.features
            )));
        }
        if s.features.height != s.target.height() || s.features.width != s.target.width() {
            return Err(Error::Parameter(format!(
                "sample {i}: feature planes and target differ in size"
            )));
        }
    }

    let mut predictor = predictor;
    let mut state = AdamState::new(predictor.weights.len());
    let mut rng = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut iteration = 0;

    for epoch in 0..config.epochs {
        let lr = config.epoch_lr(epoch);
        rng::shuffle(&mut rng, &mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let grads = batch_gradient(&predictor, &batch, config.masking_enabled)?;
            let hp = config.adam(lr * config.warmup_factor(iteration));
            adam_step(&mut predictor.weights, &grads, &mut state, &hp)?;
            iteration += 1;
        }
        history.push(EpochRecord {
            epoch,
            total_loss: dataset_loss(&predictor, samples, config.masking_enabled)?,
            lr,
        });
    }
    Ok(TrainOutcome { predictor, history })
}

/// Short fine-tuning on pseudo-labels: `train` with the override applied.
pub fn finetune_pseudo(
    predictor: ToyPredictor,
    pseudo: &[TrainSample],
    base: &TrainConfig,
    overrides: FinetuneOverride,
) -> Result<TrainOutcome> {
    train(predictor, pseudo, &overrides.apply(base))
}

pub fn write_loss_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "total_loss", "lr"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.total_loss.to_string(), r.lr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<loss csv>", e))?;
    Ok(())
}
