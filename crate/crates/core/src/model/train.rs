use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::error::{Error, Result};
use crate::tokenize::AssembledInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInput {
    pub input: AssembledInput,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip threshold.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of all update steps spent ramping the learning rate up
    /// linearly from 0.
    pub warmup_frac: f64,
    /// Decay the learning rate linearly to 0 after warmup.
    pub linear_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.0,
            linear_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction must be in [0, 1), got {}", self.warmup_frac)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for update `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_frac * total as f64).ceil() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        if self.linear_decay && total > warmup {
            let left = (total - step) as f64 / (total - warmup) as f64;
            return self.learning_rate * left;
        }
        self.learning_rate
    }

    // Independent streams so that changing the data order never perturbs
    // the dropout masks and vice versa.
    fn shuffle_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5eed_u64)
    }

    fn dropout_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ 0xd50f_0a7e_u64)
    }
}

/// Adam with bias correction.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Mini-batch training. Returns the mean loss of every epoch, measured on
/// the forward passes used for the updates.
pub fn train(model: &mut Classifier, data: &[LabeledInput], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training data is empty".into()));
    }
    if let Some(bad) = data.iter().find(|d| d.label > 1) {
        return Err(Error::Input(format!("label {} is not 0 or 1", bad.label)));
    }
    let mut shuffle = cfg.shuffle_rng();
    let mut dropout = cfg.dropout_rng();
    let mut adam = Adam::new(model.param_count());
    let mut grad = vec![0.0; model.param_count()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut per_example = vec![0.0; data.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let ex = &data[i];
                let loss = model.loss_and_grad(&ex.input, ex.label, Some(&mut dropout), &mut grad)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch,
                        message: format!("non-finite loss {loss} on example {i}"),
                    });
                }
                per_example[i] = loss;
            }
            let inv = 1.0 / chunk.len() as f64;
            let mut norm2 = 0.0;
            for g in grad.iter_mut() {
                *g *= inv;
                norm2 += *g * *g;
            }
            if !norm2.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch,
                    message: "non-finite gradient".into(),
                });
            }
            let norm = norm2.sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.update(model.params_mut(), &grad, cfg, cfg.lr_at(step, total_steps));
            step += 1;
        }
        let mean = per_example.iter().sum::<f64>() / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Training {
            epoch: cfg.epochs.saturating_sub(1),
            batch: 0,
            message: "parameters became non-finite".into(),
        });
    }
    Ok(history)
}

/// Pairwise accuracy at the 0.5 threshold.
pub fn accuracy(model: &Classifier, data: &[LabeledInput]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in data {
        let p = model.forward(&ex.input)?;
        if u8::from(p >= 0.5) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
