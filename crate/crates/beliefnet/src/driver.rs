//! Multi-threaded training and evaluation drivers.
//!
//! Work is split per example and reduced in example order, so results are
//! bit-identical for any thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use beliefnet_core::data::{episode_examples, Example, ExampleConfig};
use beliefnet_core::eval::{evaluate_example, evaluate_prior, prior_baseline, EvalConfig, EvalError, EvalReport, VariantReport};
use beliefnet_core::model::{ModelConfig, ModelParams, Variant};
use beliefnet_core::sim::TrajectorySet;
use beliefnet_core::train::{
    apply_gradients, example_gradients, example_seeds, pretrain_gradients, OptimizerState, StepMetrics, TrainConfig, TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::Error;

/// Worker threads: `BELIEFNET_THREADS` when set to a positive integer,
/// otherwise every logical core.
pub fn thread_count() -> usize {
    std::env::var("BELIEFNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn thread_pool(threads: usize) -> ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().expect("thread pool")
}

/// All example windows of every episode.
pub fn build_examples(set: &TrajectorySet, cfg: &ExampleConfig) -> Result<Vec<Example>, Error> {
    let per_episode: Vec<Vec<Example>> =
        set.episodes.par_iter().map(|e| episode_examples(e, cfg)).collect::<Result<_, _>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Model, momentum and sampling state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub cfg: TrainConfig,
    pub pretrain_lr: f64,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`; the same stream then drives
    /// batch sampling and rollout noise.
    pub fn new(model: ModelConfig, cfg: TrainConfig, pretrain_lr: f64) -> Result<Self, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::new(model, &mut rng)?;
        let opt = OptimizerState::new(&params);
        Ok(Trainer { params, opt, rng, step: 0, cfg, pretrain_lr })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig, pretrain_lr: f64) -> Self {
        let opt = ckpt.velocity.unwrap_or_else(|| OptimizerState::new(&ckpt.params));
        Trainer { params: ckpt.params, opt, rng: ckpt.rng, step: ckpt.step as usize, cfg, pretrain_lr }
    }

    pub fn checkpoint(&self, run_config: &str) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            velocity: Some(self.opt.clone()),
            step: self.step as u64,
            rng: self.rng.clone(),
            run_config: run_config.to_string(),
        }
    }

    fn batch<'a>(&mut self, examples: &'a [Example]) -> Vec<&'a Example> {
        (0..self.cfg.batch_size).map(|_| &examples[self.rng.random_range(0..examples.len())]).collect()
    }

    /// Encoder warm-up on visible agents; returns the mean batch loss per step.
    pub fn pretrain(&mut self, examples: &[Example], pool: &ThreadPool) -> Result<Vec<f64>, Error> {
        if examples.is_empty() {
            return Err(TrainError::EmptyBatch.into());
        }
        let flat = TrainConfig { warmup_steps: 0, total_steps: usize::MAX, base_lr: self.pretrain_lr, ..self.cfg };
        let mut losses = Vec::with_capacity(self.cfg.pretrain_steps);
        for _ in 0..self.cfg.pretrain_steps {
            let batch = self.batch(examples);
            let params = &self.params;
            let grads = pool.install(|| batch.par_iter().map(|ex| pretrain_gradients(params, ex)).collect::<Result<Vec<_>, _>>())?;
            losses.push(apply_gradients(&mut self.params, &mut self.opt, &grads, 0, &flat)?.loss);
        }
        // the main loop starts from a clean momentum buffer
        self.opt = OptimizerState::new(&self.params);
        Ok(losses)
    }

    /// One optimizer step on a batch drawn with replacement.
    pub fn train_step(&mut self, examples: &[Example], pool: &ThreadPool) -> Result<StepMetrics, Error> {
        if examples.is_empty() {
            return Err(TrainError::EmptyBatch.into());
        }
        let batch = self.batch(examples);
        let seeds = example_seeds(&mut self.rng, batch.len());
        let (params, step, cfg) = (&self.params, self.step, &self.cfg);
        let grads = pool.install(|| {
            batch.par_iter().zip(&seeds).map(|(ex, &s)| example_gradients(params, ex, step, cfg, s)).collect::<Result<Vec<_>, _>>()
        })?;
        let m = apply_gradients(&mut self.params, &mut self.opt, &grads, self.step, &self.cfg)?;
        self.step += 1;
        Ok(m)
    }

    /// Runs until `cfg.total_steps`, reporting every step to `on_step`.
    pub fn run(
        &mut self,
        examples: &[Example],
        pool: &ThreadPool,
        mut on_step: impl FnMut(&StepMetrics) -> Result<(), Error>,
    ) -> Result<(), Error> {
        if self.step == 0 && self.cfg.pretrain_steps > 0 {
            self.pretrain(examples, pool)?;
        }
        while self.step < self.cfg.total_steps {
            let m = self.train_step(examples, pool)?;
            on_step(&m)?;
        }
        Ok(())
    }
}

/// Streams training metrics as CSV.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

pub const METRICS_HEADER: &str = "step,loss,recon,kl,beta,lr,grad_norm";

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, Error> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter { path: path.to_path_buf(), out: BufWriter::new(file) };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<(), Error> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<(), Error> {
        self.line(&format!("{},{},{},{},{},{},{}", m.step, m.loss, m.recon, m.kl, m.beta, m.lr, m.grad_norm))
    }

    pub fn flush(&mut self) -> Result<(), Error> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Trailing moving average of `window` values ending at each index.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// [`evaluate_example`] over all examples on `pool`, merged in order.
pub fn evaluate_parallel(params: &ModelParams, examples: &[Example], cfg: &EvalConfig, pool: &ThreadPool) -> Result<VariantReport, Error> {
    if examples.is_empty() {
        return Err(EvalError::NoExamples.into());
    }
    let parts = pool.install(|| {
        examples.par_iter().enumerate().map(|(i, ex)| evaluate_example(params, ex, i, cfg)).collect::<Result<Vec<_>, _>>()
    })?;
    let c = &params.config;
    let mut report = VariantReport::empty(c.variant.name(), c.observed, c.steps());
    parts.iter().for_each(|p| report.merge(p));
    Ok(report)
}

/// Evaluates each checkpoint on `test` and, when training examples are
/// given, the marginal prior fitted on them.
pub fn run_benchmark(
    checkpoints: &[(Variant, PathBuf)],
    test: &[Example],
    train: Option<&[Example]>,
    cfg: &EvalConfig,
    pool: &ThreadPool,
) -> Result<EvalReport, Error> {
    let first = test.first().ok_or(EvalError::NoExamples)?;
    let mut rows = Vec::new();
    let mut shape = None;
    for (variant, path) in checkpoints {
        if !path.exists() {
            return Err(Error::Usage(format!("missing checkpoint for {variant}: {}", path.display())));
        }
        let params = load_checkpoint(path)?.params;
        let c = params.config;
        if c.variant != *variant {
            return Err(Error::Usage(format!("{} holds a {} model, expected {variant}", path.display(), c.variant)));
        }
        if c.num_agents != first.k() {
            return Err(EvalError::AgentCount { expected: c.num_agents, got: first.k() }.into());
        }
        shape = Some((c.observed, c.horizon, c.grid));
        rows.push(evaluate_parallel(&params, test, cfg, pool)?);
    }
    let (observed, horizon, grid) = shape.ok_or_else(|| Error::Usage("no checkpoints given".into()))?;
    if let Some(train) = train {
        let prior = prior_baseline(train.iter().flat_map(|e| e.targets.iter().map(|r| &r[..])), first.k(), grid.cells())?;
        rows.push(evaluate_prior(&prior, test, observed, &grid)?);
    }
    Ok(EvalReport { observed, horizon, cells: grid.cells(), config: *cfg, rows })
}
