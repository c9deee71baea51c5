//! Teacher-forced training with condition dropout and Adam.
//!
//! With probability `condition_dropout` a drawn stream has its condition
//! region replaced by `null_cond`. For CoT streams a dropped condition also
//! empties the CoT region with probability `cot_dropout`, which trains the
//! fully unconditional audio term used by guidance.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Scalar, Transformer};
use crate::sequence::{Segment, Special, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub condition_dropout: f64,
    /// Probability of also emptying the CoT region once the condition is dropped.
    pub cot_dropout: f64,
    pub warmup_steps: usize,
    /// Cosine decay ends at this fraction of the peak learning rate.
    pub min_lr_fraction: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 8,
            steps: 1000,
            condition_dropout: 0.1,
            cot_dropout: 0.5,
            warmup_steps: 50,
            min_lr_fraction: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.condition_dropout) {
            return Err(Error::config("condition_dropout must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.cot_dropout) {
            return Err(Error::config("cot_dropout must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::config("min_lr_fraction must lie in [0, 1]"));
        }
        if self.grad_clip < 0.0 || !self.grad_clip.is_finite() {
            return Err(Error::config("grad_clip must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to `min_lr_fraction · learning_rate`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = peak * self.min_lr_fraction;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Replaces the condition region with a single `null_cond` and, if asked,
/// empties the CoT region between `cot_bos` and `cot_eos`.
pub fn drop_condition(seq: &TokenSequence, drop_cot: bool) -> TokenSequence {
    let mut out = TokenSequence {
        ids: Vec::with_capacity(seq.len()),
        segments: Vec::with_capacity(seq.len()),
        loss_mask: Vec::with_capacity(seq.len()),
        clap: None,
    };
    let mut placed = false;
    for i in 0..seq.len() {
        let seg = seq.segments[i];
        if seg == Segment::Condition {
            if !placed {
                out.ids.push(Special::NullCond.id());
                out.segments.push(Segment::Condition);
                out.loss_mask.push(false);
                placed = true;
            }
            continue;
        }
        if drop_cot && seg == Segment::Cot {
            continue;
        }
        out.ids.push(seq.ids[i]);
        out.segments.push(seg);
        out.loss_mask.push(seq.loss_mask[i]);
    }
    out
}

/// Draws one training batch with replacement, applying condition dropout.
pub fn draw_batch<R: Rng + ?Sized>(
    data: &[TokenSequence],
    config: &TrainConfig,
    rng: &mut R,
) -> (Vec<usize>, Vec<TokenSequence>) {
    let mut picks = Vec::with_capacity(config.batch_size);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let i = rng.random_range(0..data.len());
        let drop = rng.random::<f64>() < config.condition_dropout;
        let drop_cot = rng.random::<f64>() < config.cot_dropout;
        picks.push(i);
        batch.push(if drop {
            drop_condition(&data[i], drop_cot)
        } else {
            data[i].clone()
        });
    }
    (picks, batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, batch loss)` for every step.
    pub losses: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().map(|l| l.1)
    }

    /// Mean of the last `k` batch losses.
    pub fn final_loss(&self, k: usize) -> Option<f64> {
        let k = k.max(1).min(self.losses.len());
        if k == 0 {
            return None;
        }
        Some(self.losses[self.losses.len() - k..].iter().map(|l| l.1).sum::<f64>() / k as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.losses {
            let _ = writeln!(s, "{step},{loss}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

struct Adam<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [F], grad: &[F], lr: f64, config: &TrainConfig) {
        self.t += 1;
        let b1 = F::from_f64(config.beta1).unwrap();
        let b2 = F::from_f64(config.beta2).unwrap();
        let one = F::one();
        let c1 = 1.0 - config.beta1.powi(self.t);
        let c2 = 1.0 - config.beta2.powi(self.t);
        let step = F::from_f64(lr / c1).unwrap();
        let inv_c2 = F::from_f64(1.0 / c2).unwrap();
        let eps = F::from_f64(config.adam_eps).unwrap();
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
}

/// Trains in place and returns the per-step loss curve.
pub fn train<F: Scalar>(
    model: &mut Transformer<F>,
    data: &[TokenSequence],
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with_progress(model, data, config, |_, _| {})
}

/// [`train`] with a callback receiving `(step, batch loss)`.
pub fn train_with_progress<F: Scalar>(
    model: &mut Transformer<F>,
    data: &[TokenSequence],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let context = model.config().context;
    for (i, seq) in data.iter().enumerate() {
        seq.validate()?;
        // The final token is only ever a target.
        if seq.len() > context + 1 {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                context: context + 1,
            });
        }
        if seq.is_empty() {
            return Err(Error::EmptyInput(format!("training stream {i} is empty")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.num_params());
    let mut report = TrainReport {
        losses: Vec::with_capacity(config.steps),
    };
    let start = model.step() as usize;
    for step in 0..config.steps {
        let (picks, batch) = draw_batch(data, config, &mut rng);
        let (loss, mut grad) = model.loss_and_grad(&batch)?;
        let norm = grad
            .iter()
            .map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: start + step,
                detail: format!(
                    "loss {loss}, gradient norm {norm}, lr {:.3e}, batch streams {picks:?}",
                    config.lr_at(step)
                ),
            });
        }
        if config.grad_clip > 0.0 && norm > config.grad_clip {
            let s = F::from_f64(config.grad_clip / norm).unwrap();
            grad.iter_mut().for_each(|g| *g *= s);
        }
        adam.update(model.params_mut(), &grad, config.lr_at(step), config);
        model.set_step((start + step + 1) as u64);
        report.losses.push((start + step, loss));
        progress(start + step, loss);
    }
    Ok(report)
}
