//! Mini-batch training: cross-entropy, global-norm clipping, AdamW with
//! decoupled weight decay and a cosine learning-rate schedule.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PreparedInstance, UckModel};
use crate::nn::ParamStore;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    /// Decay every parameter, including biases, norms and rule embeddings.
    pub decay_all: bool,
    /// Recompute training accuracy in evaluation mode after each epoch
    /// instead of reporting the running training-mode accuracy.
    pub eval_train_accuracy: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-2,
            epochs: 30,
            batch_size: 32,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_min: 0.0,
            decay_all: false,
            eval_train_accuracy: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [("lr", self.lr), ("clip_norm", self.clip_norm), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            out.push(format!("lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epochs == 0 {
            out.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        out
    }
}

/// `-log softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: [f64; 2], label: usize) -> Result<f64> {
    if label > 1 {
        return Err(Error::Data(format!("label {label} is not 0 or 1")));
    }
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::Numerical(format!("non-finite logits {logits:?}")));
    }
    // -log σ(z) with z = logit[label] - logit[other].
    let z = logits[label] - logits[1 - label];
    Ok(if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() })
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: [f64; 2], label: usize) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let z = e[0] + e[1];
    let mut g = [e[0] / z, e[1] / z];
    g[label] -= 1.0;
    g
}

/// Scales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// `base_lr · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    cosine_lr_with_floor(step, total_steps, base_lr, 0.0)
}

pub fn cosine_lr_with_floor(step: usize, total_steps: usize, base_lr: f64, floor: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::config(format!("schedule step {step} outside 0..={total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_all: bool,
}

/// One AdamW update. Weight decay is applied to the parameter directly,
/// outside the adaptive step, and only to entries marked for decay.
pub fn adamw_step(store: &mut ParamStore, grads: &[Vec<f64>], opt: &mut OptimizerState, hp: AdamW) -> Result<()> {
    if grads.len() != store.len() || opt.m.len() != store.len() {
        return Err(Error::Data(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            opt.m.len(),
            store.len()
        )));
    }
    for (i, (entry, g)) in store.entries().iter().zip(grads).enumerate() {
        if entry.value.len() != g.len() || opt.m[i].len() != g.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: entry.value.shape().to_vec(),
                rhs: vec![g.len()],
            }
            .into());
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        let decay = if entry.decay || hp.decay_all { hp.lr * hp.weight_decay } else { 0.0 };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for (j, theta) in entry.value.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps) + decay * *theta;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub lr_last: f64,
}

fn numerical(context: String, e: TensorError) -> Error {
    match e {
        TensorError::NonFinite { .. } => Error::Numerical(format!("{context}: {e}")),
        other => other.into(),
    }
}

/// Accuracy of `model` in evaluation mode.
pub fn accuracy(model: &UckModel, data: &[PreparedInstance]) -> Result<f64> {
    let mut correct = 0usize;
    for (i, x) in data.iter().enumerate() {
        let out = model.predict(x).map_err(|e| numerical(format!("instance {i}"), e))?;
        correct += usize::from(out.prediction() == x.label);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains in place. `after_epoch` sees every log record as soon as the epoch ends.
pub fn train_with<F>(model: &mut UckModel, data: &[PreparedInstance], cfg: &TrainConfig, mut after_epoch: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &UckModel) -> Result<()>,
{
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut shuffle_rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let dropout_root = derive_seed(cfg.seed, 2);
    let mut opt = OptimizerState::new(&model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut draws = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = cfg.lr;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> = model.store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let seed = derive_seed(dropout_root, draws);
                draws += 1;
                let g = model
                    .loss_and_gradient(&data[i], Some(seed))
                    .map_err(|e| numerical(format!("epoch {epoch}, batch {b}, instance {i}"), e))?;
                if !g.loss.is_finite() {
                    return Err(Error::Numerical(format!("epoch {epoch}, batch {b}: loss is {}", g.loss)));
                }
                batch_loss += g.loss;
                correct += usize::from(usize::from(g.logits[1] > g.logits[0]) == data[i].label);
                for (acc, gi) in grads.iter_mut().zip(&g.grads) {
                    acc.iter_mut().zip(gi).for_each(|(a, x)| *a += x);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            loss_sum += batch_loss * inv;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            lr = cosine_lr_with_floor(step, total, cfg.lr, cfg.lr_min)?;
            adamw_step(
                &mut model.store,
                &grads,
                &mut opt,
                AdamW {
                    lr,
                    weight_decay: cfg.weight_decay,
                    beta1: cfg.beta1,
                    beta2: cfg.beta2,
                    eps: cfg.eps,
                    decay_all: cfg.decay_all,
                },
            )?;
            step += 1;
        }
        let train_acc = if cfg.eval_train_accuracy {
            accuracy(model, data)?
        } else {
            correct as f64 / data.len() as f64
        };
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / batches_per_epoch as f64,
            train_acc,
            lr_last: lr,
        };
        after_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

pub fn train(model: &mut UckModel, data: &[PreparedInstance], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, data, cfg, |_, _| Ok(()))
}
