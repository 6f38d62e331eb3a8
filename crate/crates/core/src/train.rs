//! Weighted variational objective, its schedules, and the momentum optimizer.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::Example;
use crate::model::{rollout, ModelError, ModelParams, RolloutOptions, RolloutTrace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite {component} at step {step}")]
    NonFinite { component: &'static str, step: usize },
    #[error("targets cover {got:?} (steps x agents), expected {expected:?}")]
    Targets { expected: (usize, usize), got: (usize, usize) },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub observed: usize,
    pub horizon: usize,
    pub beta_max: f64,
    pub anneal_fraction: f64,
    pub gamma: f64,
    pub teacher_forcing_fraction: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub kl_on_forecast: bool,
    /// Use `max(t/T, 1)` step weights instead of the normalized discount.
    pub literal_lambda: bool,
    /// Steps of visible-agent encoder pre-training before the main loop.
    pub pretrain_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            observed: 6,
            horizon: 4,
            beta_max: 1.0,
            anneal_fraction: 0.2,
            gamma: 0.8,
            teacher_forcing_fraction: 0.5,
            base_lr: 0.01,
            momentum: 0.9,
            warmup_steps: 200,
            total_steps: 5000,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 0,
            kl_on_forecast: false,
            literal_lambda: false,
            pretrain_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("gamma must lie in (0, 1]");
        }
        for f in [self.anneal_fraction, self.teacher_forcing_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err("schedule fractions must lie in (0, 1]");
            }
        }
        if self.observed == 0 || self.horizon == 0 {
            return Err("observed and horizon steps must be at least 1");
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err("batch size and total steps must be positive");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.observed + self.horizon
    }
}

/// Weight of step `t` (1-based): 1 while observed, then `gamma^(t-T)`
/// rescaled so the forecast weights sum to `T`.
pub fn lambda_schedule(t: usize, observed: usize, horizon: usize, gamma: f64) -> f64 {
    if t <= observed {
        return 1.0;
    }
    let mass: f64 = (1..=horizon).map(|d| libm::pow(gamma, d as f64)).sum();
    libm::pow(gamma, (t - observed) as f64) * observed as f64 / mass
}

/// Step weights for every step of a rollout under `cfg`.
pub fn lambda_weights(cfg: &TrainConfig) -> Vec<f64> {
    (1..=cfg.steps())
        .map(|t| {
            if cfg.literal_lambda {
                (t as f64 / cfg.observed as f64).max(1.0)
            } else {
                lambda_schedule(t, cfg.observed, cfg.horizon, cfg.gamma)
            }
        })
        .collect()
}

fn ramp(step: usize, fraction: f64, total: usize) -> f64 {
    let window = fraction * total as f64;
    (step as f64 / window).min(1.0)
}

pub fn beta_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.beta_max * ramp(step, cfg.anneal_fraction, cfg.total_steps)
}

pub fn scheduled_sampling_prob(step: usize, cfg: &TrainConfig) -> f64 {
    1.0 - ramp(step, cfg.teacher_forcing_fraction, cfg.total_steps)
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + libm::cos(PI * progress))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    /// `sum_t lambda_t sum_k CE`.
    pub recon: f64,
    /// Unweighted KL.
    pub kl: f64,
    pub weighted_kl: f64,
    pub beta: f64,
}

/// `sum_t lambda_t sum_k -log p_t^k(target) + beta * sum KL`.
pub fn elbo_loss(
    tape: &mut Tape,
    trace: &RolloutTrace,
    targets: &[Vec<usize>],
    lambdas: &[f64],
    beta: f64,
) -> Result<(Var, LossComponents), TrainError> {
    let steps = trace.log_probs.len();
    let (k, g) = match trace.log_probs.first() {
        Some(&lp) => (tape.shape(lp)[0], tape.shape(lp)[1]),
        None => (0, 0),
    };
    let bad = || TrainError::Targets { expected: (steps, k), got: (targets.len(), targets.first().map_or(0, Vec::len)) };
    if targets.len() != steps || lambdas.len() != steps || targets.iter().any(|r| r.len() != k) {
        return Err(bad());
    }
    let mut recon_terms = Vec::with_capacity(steps);
    for (t, &lp) in trace.log_probs.iter().enumerate() {
        let mut pick = vec![0.0; k * g];
        for (i, &cell) in targets[t].iter().enumerate() {
            if cell >= g {
                return Err(bad());
            }
            pick[i * g + cell] = -lambdas[t];
        }
        let pick = tape.constant(pick, &[k, g])?;
        let weighted = tape.mul(lp, pick)?;
        recon_terms.push(tape.sum(weighted)?);
    }
    let kl_terms: Vec<Var> = trace.kl.iter().flatten().copied().collect();
    let recon = sum_all(tape, &recon_terms)?;
    let kl = sum_all(tape, &kl_terms)?;
    let weighted_kl = tape.scale(kl, beta)?;
    let total = tape.add(recon, weighted_kl)?;
    let comps = LossComponents {
        total: tape.scalar(total),
        recon: tape.scalar(recon),
        kl: tape.scalar(kl),
        weighted_kl: tape.scalar(weighted_kl),
        beta,
    };
    Ok((total, comps))
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var, TrainError> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.zeros(&[1]));
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Momentum buffer, one vector per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState { velocity: params.set.iter().map(|t| vec![0.0; t.values.len()]).collect() }
    }
}

/// Loss and parameter gradients of a single example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleGrad {
    pub loss: LossComponents,
    pub grads: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward rollout in train mode, objective, and backward for one example.
pub fn example_gradients(
    params: &ModelParams,
    example: &Example,
    step: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ExampleGrad, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let opts = RolloutOptions {
        kl_on_forecast: cfg.kl_on_forecast,
        ..RolloutOptions::train(scheduled_sampling_prob(step, cfg))
    };
    let trace = rollout(&mut tape, params, &example.grids, Some(&example.targets), opts, &mut rng)?;
    let (total, loss) = elbo_loss(&mut tape, &trace, &example.targets, &lambda_weights(cfg), beta_schedule(step, cfg))?;
    check_finite(&loss, step)?;
    let grads = tape.backward(total)?.param_grads(&params.set);
    Ok(ExampleGrad { loss, grads })
}

fn check_finite(loss: &LossComponents, step: usize) -> Result<(), TrainError> {
    if !loss.recon.is_finite() {
        return Err(TrainError::NonFinite { component: "reconstruction", step });
    }
    if !loss.kl.is_finite() {
        return Err(TrainError::NonFinite { component: "kl", step });
    }
    Ok(())
}

/// Per-example rollout seeds for a batch, drawn from the trainer's stream.
pub fn example_seeds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

/// Averages example gradients, clips the global norm, and applies
/// `v <- m v + g`, `p <- p - lr v`.
pub fn apply_gradients(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    examples: &[ExampleGrad],
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = examples.len() as f64;
    let mut grads = examples[0].grads.clone();
    for ex in &examples[1..] {
        for (acc, g) in grads.iter_mut().zip(&ex.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let mut sq = 0.0;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v /= n;
            sq += *v * *v;
        }
    }
    let grad_norm = libm::sqrt(sq);
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFinite { component: "gradient", step });
    }
    let clip = if grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };
    let lr = lr_schedule(step, cfg);
    for ((tensor, vel), g) in params.set.iter_mut().zip(opt.velocity.iter_mut()).zip(&grads) {
        for ((p, v), &gi) in tensor.values.iter_mut().zip(vel.iter_mut()).zip(g) {
            *v = cfg.momentum * *v + clip * gi;
            *p -= lr * *v;
        }
    }
    let mean = |f: fn(&LossComponents) -> f64| examples.iter().map(|e| f(&e.loss)).sum::<f64>() / n;
    Ok(StepMetrics {
        step,
        loss: mean(|l| l.total),
        recon: mean(|l| l.recon),
        kl: mean(|l| l.kl),
        beta: beta_schedule(step, cfg),
        lr,
        grad_norm,
    })
}

/// One optimizer step over `batch`, examples processed in order.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    batch: &[&Example],
    opt: &mut OptimizerState,
    step: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepMetrics, TrainError> {
    let seeds = example_seeds(rng, batch.len());
    let grads = batch
        .iter()
        .zip(&seeds)
        .map(|(ex, &s)| example_gradients(params, ex, step, cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    apply_gradients(params, opt, &grads, step, cfg)
}

/// Cross-entropy of the visual decoder on visible agents only, used to
/// warm up the encoder before the main objective.
pub fn pretrain_gradients(params: &ModelParams, example: &Example) -> Result<ExampleGrad, TrainError> {
    let c = &params.config;
    let g = c.cells();
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for (t, grid) in example.grids.iter().enumerate() {
        let x = tape.constant(grid.data.clone(), &[3, grid.height, grid.width])?;
        let v = crate::model::encode_visual(&mut tape, params, x)?;
        let logits = crate::model::decode_visual(&mut tape, params, v)?;
        let lp = tape.log_softmax(logits)?;
        let mut pick = vec![0.0; c.num_agents * g];
        for (k, &cell) in example.targets[t].iter().enumerate() {
            if example.visible[t][k] {
                pick[k * g + cell] = -1.0;
            }
        }
        let pick = tape.constant(pick, &[c.num_agents, g])?;
        let w = tape.mul(lp, pick)?;
        terms.push(tape.sum(w)?);
    }
    let total = sum_all(&mut tape, &terms)?;
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Err(TrainError::NonFinite { component: "pretraining loss", step: 0 });
    }
    let grads = tape.backward(total)?.param_grads(&params.set);
    Ok(ExampleGrad { loss: LossComponents { total: value, recon: value, ..LossComponents::default() }, grads })
}

/// One encoder pre-training step (constant learning rate, same momentum rule).
pub fn pretrain_step(
    params: &mut ModelParams,
    batch: &[&Example],
    opt: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let grads = batch.iter().map(|ex| pretrain_gradients(params, ex)).collect::<Result<Vec<_>, _>>()?;
    let flat = TrainConfig { warmup_steps: 0, total_steps: usize::MAX, base_lr: lr, ..*cfg };
    Ok(apply_gradients(params, opt, &grads, 0, &flat)?.loss)
}
