use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::transformer::{loss, loss_and_grad};
use crate::error::{Error, Result};
use crate::prompting::{ScoreMatrix, SegmentedPrompt};

/// One teacher-forced training instance.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompt: SegmentedPrompt,
    pub scores: ScoreMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for the per-epoch example order.
    pub seed: u64,
    /// Update only the attention projections.
    pub freeze_non_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 1,
            batch_size: 8,
            warmup_steps: 20,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            freeze_non_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::param("clip_norm", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta", "moment decay rates must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Linear warmup to the base rate, constant afterwards. `step` is 0-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub held_out_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub steps: usize,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm,lr\n");
        for r in &self.log {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.grad_norm, r.lr);
        }
        out
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_bytes(path, self.log_csv().as_bytes())
    }
}

/// Mean answer loss over a set of examples.
pub fn mean_loss(params: &Parameters, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::param("examples", "empty set"));
    }
    let mut total = 0.0;
    for ex in examples {
        total += loss(params, &ex.prompt, &ex.scores)?;
    }
    Ok(total / examples.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, data: &mut [f64], grad: &[f64], mask: Option<&[bool]>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..data.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Mini-batch Adam over `data`, reporting the held-out loss after every
/// epoch when `held_out` is non-empty. Example order is reshuffled each
/// epoch from `cfg.seed`; gradients are accumulated in a fixed order so a
/// given seed always yields the same parameters.
pub fn train(params: Parameters, data: &[Example], held_out: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::param("dataset", "training set is empty"));
    }
    let mut params = params;
    let mask: Option<Vec<bool>> = cfg.freeze_non_attention.then(|| {
        let mut m = vec![false; params.data.len()];
        for t in params.layout.tensors.iter().filter(|t| t.attention) {
            m[t.range()].fill(true);
        }
        m
    });
    let mut adam = Adam::new(params.data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut grad = vec![0.0; params.data.len()];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &data[i];
                let lg = loss_and_grad(&params, &ex.prompt, &ex.scores, false)?;
                batch_loss += lg.loss;
                for (g, x) in grad.iter_mut().zip(&lg.grad) {
                    *g += x;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            grad.iter_mut().for_each(|g| *g *= inv);
            if let Some(m) = &mask {
                grad.iter_mut().zip(m).filter(|(_, &keep)| !keep).for_each(|(g, _)| *g = 0.0);
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !batch_loss.is_finite() || !norm.is_finite() {
                log::error!("non-finite loss {batch_loss} / grad norm {norm} in epoch {epoch}, batch {batch_id}");
                return Err(Error::NonFinite { batch: batch_id, step });
            }
            if norm > cfg.clip_norm {
                let scale = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= scale);
            }
            let lr = cfg.lr_at(step);
            adam.step(&mut params.data, &grad, mask.as_deref(), lr, cfg);
            if !params.all_finite() {
                return Err(Error::NonFinite { batch: batch_id, step });
            }
            log.push(LogRow {
                step,
                loss: batch_loss,
                grad_norm: norm,
                lr,
            });
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
        }
        let held_out_loss = if held_out.is_empty() {
            None
        } else {
            Some(mean_loss(&params, held_out)?)
        };
        let summary = EpochSummary {
            epoch,
            train_loss: epoch_loss / data.len() as f64,
            held_out_loss,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}{}",
            summary.train_loss,
            held_out_loss.map(|l| format!(", held-out {l:.4}")).unwrap_or_default()
        );
        epochs.push(summary);
    }
    Ok(TrainOutcome {
        params,
        steps: step,
        log,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        let flat = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(flat.lr_at(0), 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
