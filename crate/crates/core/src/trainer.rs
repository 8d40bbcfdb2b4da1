//! Optimisation loop: AdamW with decoupled weight decay, staged learning-rate
//! decay, linear annealing of the KL coefficient and late freezing of the
//! offset head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dataset::splitmix64;
use crate::error::{Error, Result};
use crate::losses::{final_loss, LossBreakdown, LossConfig};
use crate::model::{forward, stack_images, ModelConfig, ModelParams};
use crate::targets::TrainingSample;
use crate::tensor::Tensor;

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NON_FINITE_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_factor: f64,
    /// Fractions of training after which the rate is divided by `lr_decay_factor`.
    pub lr_decay_at: Vec<f64>,
    pub epochs: usize,
    pub freeze_offset_at: f64,
    /// Freeze the backbone together with the offset head.
    pub freeze_backbone: bool,
    pub batch: usize,
    pub lambda_cls_max: f64,
    pub lambda_cls_ramp_until: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1.25e-4,
            lr_decay_factor: 10.0,
            lr_decay_at: vec![45.0 / 80.0, 60.0 / 80.0],
            epochs: 40,
            freeze_offset_at: 70.0 / 80.0,
            freeze_backbone: false,
            batch: 4,
            lambda_cls_max: 0.06,
            lambda_cls_ramp_until: 60.0 / 80.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fractions = self
            .lr_decay_at
            .iter()
            .chain([&self.freeze_offset_at, &self.lambda_cls_ramp_until]);
        for &f in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::validation(format!("schedule fraction {f} outside (0, 1]")));
            }
        }
        if self.lr_decay_at.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::validation("lr_decay_at must be non-decreasing"));
        }
        let rates = [self.lr0, self.lr_decay_factor, self.eps];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::validation("lr0, lr_decay_factor and eps must be positive"));
        }
        if !(self.lambda_cls_max.is_finite() && self.lambda_cls_max >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::validation("lambda_cls_max and weight_decay must be non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::validation("Adam betas must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::validation("epochs and batch must be at least 1"));
        }
        Ok(())
    }
}

/// `min(max, max · iter / total_ramp_iters)`.
pub fn lambda_cls_at(iter: usize, total_ramp_iters: usize, max: f64) -> f64 {
    let total = total_ramp_iters.max(1);
    if iter >= total {
        max
    } else {
        max * (iter as f64 / total as f64)
    }
}

/// Iteration-level view of the fractional schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub total_iters: usize,
    pub decay_iters: Vec<usize>,
    pub ramp_iters: usize,
    pub freeze_iter: usize,
    lr0: f64,
    factor: f64,
    lambda_max: f64,
}

impl Schedule {
    pub fn new(config: &TrainConfig, iters_per_epoch: usize) -> Self {
        let total_iters = config.epochs * iters_per_epoch;
        let at = |f: f64| (f * total_iters as f64).round() as usize;
        Self {
            total_iters,
            decay_iters: config.lr_decay_at.iter().map(|&f| at(f)).collect(),
            ramp_iters: at(config.lambda_cls_ramp_until).max(1),
            freeze_iter: at(config.freeze_offset_at),
            lr0: config.lr0,
            factor: config.lr_decay_factor,
            lambda_max: config.lambda_cls_max,
        }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        let mut lr = self.lr0;
        for _ in self.decay_iters.iter().filter(|&&d| iter >= d) {
            lr /= self.factor;
        }
        lr
    }

    pub fn lambda_cls(&self, iter: usize) -> f64 {
        lambda_cls_at(iter, self.ramp_iters, self.lambda_max)
    }

    pub fn frozen(&self, iter: usize) -> bool {
        iter >= self.freeze_iter
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<i32>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            steps: vec![0; params.entries().len()],
        }
    }
}

/// One AdamW update. Frozen tensors are left untouched; a trainable tensor
/// with a non-finite gradient is skipped. Returns the number of skipped
/// tensors. A missing gradient counts as zero.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<usize> {
    let n = params.entries().len();
    if grads.len() != n || state.m.len() != n || state.m.iter().zip(params.entries()).any(|(m, e)| m.len() != e.tensor.len()) {
        return Err(Error::validation("optimizer state and gradients must match the parameters"));
    }
    let mut skipped = 0;
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        if !entry.trainable {
            continue;
        }
        let grad = grads[i].as_ref().map(|g| g.data());
        if let Some(g) = grad {
            if g.len() != entry.tensor.len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    shapes: vec![entry.tensor.shape().to_vec(), grads[i].as_ref().map(|g| g.shape().to_vec()).unwrap_or_default()],
                });
            }
            if !g.iter().all(|v| v.is_finite()) {
                skipped += 1;
                continue;
            }
        }
        state.steps[i] += 1;
        let t = state.steps[i];
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        let decay = 1.0 - lr * config.weight_decay;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in entry.tensor.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[j]);
            *p *= decay;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let (m_hat, v_hat) = (m[j] / c1, v[j] / c2);
            *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    /// Values in effect at the epoch's last step.
    pub lr: f64,
    pub lambda_cls: f64,
}

/// State after one optimizer step, handed to the observer.
#[derive(Debug)]
pub struct StepInfo<'a> {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub lambda_cls: f64,
    pub loss: &'a LossBreakdown,
    pub params: &'a ModelParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub schedule: Schedule,
    /// Tensor updates dropped because of non-finite gradients.
    pub skipped_updates: usize,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let mut acc = [0.0; 12];
    for b in items {
        for (a, v) in acc.iter_mut().zip(b.values()) {
            *a += v;
        }
    }
    LossBreakdown::from_values(acc.map(|a| a / items.len().max(1) as f64))
}

/// Trains from a fresh initialisation seeded by `config.seed`.
pub fn train(
    samples: &[TrainingSample],
    model: &ModelConfig,
    loss: &LossConfig,
    config: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(&StepInfo)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    loss.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let mut params = ModelParams::init(model, config.seed)?;
    let mut adam = AdamState::new(&params);
    let iters_per_epoch = samples.len().div_ceil(config.batch);
    let schedule = Schedule::new(config, iters_per_epoch);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x5348_5546));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x4452_4f50));

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut skipped_updates = 0;
    let mut non_finite = 0;
    let mut iter = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_losses = Vec::with_capacity(iters_per_epoch);
        for chunk in order.chunks(config.batch) {
            if schedule.frozen(iter) {
                params.set_trainable("offset.", false);
                if config.freeze_backbone {
                    params.set_trainable("backbone.", false);
                }
            }
            let (lr, lambda_cls) = (schedule.lr(iter), schedule.lambda_cls(iter));
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(stack_images(&images)?);
            let heads = forward(&mut tape, model, &bound, x, Some(&mut dropout_rng))?;
            let out = final_loss(&mut tape, &heads, &batch, loss, lambda_cls)?;

            if out.breakdown.total.is_finite() {
                non_finite = 0;
                let mut grads = tape.backward(out.total)?;
                let grads: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| grads.take(v)).collect();
                skipped_updates += adamw_step(&mut params, &grads, &mut adam, lr, config)?;
                epoch_losses.push(out.breakdown.clone());
            } else {
                non_finite += 1;
                if non_finite >= MAX_NON_FINITE_STEPS {
                    return Err(Error::NumericAbort {
                        step: iter,
                        breakdown: Box::new(out.breakdown),
                    });
                }
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(&StepInfo {
                    iter,
                    epoch,
                    lr,
                    lambda_cls,
                    loss: &out.breakdown,
                    params: &params,
                });
            }
            iter += 1;
        }
        log.push(EpochLog {
            epoch,
            loss: mean_breakdown(&epoch_losses),
            lr: schedule.lr(iter - 1),
            lambda_cls: schedule.lambda_cls(iter - 1),
        });
    }
    Ok(TrainOutcome {
        params,
        log,
        schedule,
        skipped_updates,
    })
}

/// CSV with one row per epoch: epoch, every loss field, lr, lambda_cls.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("epoch").chain(LossBreakdown::FIELDS).chain(["lr", "lambda_cls"]);
    w.write_record(header).expect("in-memory write");
    for row in log {
        let values = row.loss.values().into_iter().chain([row.lr, row.lambda_cls]).map(|v| v.to_string());
        w.write_record(std::iter::once(row.epoch.to_string()).chain(values)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    std::fs::write(path, log_to_csv(log)).map_err(|e| Error::io(path, e))
}

/// Fraction of `window`-epoch moving-average steps in which the average
/// total loss goes down.
pub fn moving_average_decrease_fraction(totals: &[f64], window: usize) -> Option<f64> {
    if window == 0 || totals.len() < window + 1 {
        return None;
    }
    let averages: Vec<f64> = totals.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    let pairs = averages.len() - 1;
    let down = averages.windows(2).filter(|w| w[1] < w[0]).count();
    Some(down as f64 / pairs as f64)
}
