use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::ops::{decode_visual, dynamics};
use super::{
    encode_posterior, encode_visual, fuse_decode, graph_message_pass, prior_step, recurrence, social_pool, Interaction,
    ModelError, ModelParams,
};
use crate::autodiff::{gaussian_kl, reparameterize, GaussianStats, GaussianVars, Tape, Var};
use crate::render::{BeliefHeatmap, ObservationGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Posterior `z` on observed steps, scheduled teacher forcing of states.
    Train,
    /// Prior mean for `z`, most probable cell as state: fully deterministic.
    Filter,
    /// Prior samples for `z`, states drawn from the heatmaps.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub mode: Mode,
    /// Probability of feeding the true state back in train mode.
    pub teacher_forcing: f64,
    /// Also infer a posterior (and pay KL) on forecast steps in train mode.
    pub kl_on_forecast: bool,
}

impl RolloutOptions {
    pub fn train(teacher_forcing: f64) -> Self {
        RolloutOptions { mode: Mode::Train, teacher_forcing, kl_on_forecast: false }
    }

    pub fn filter() -> Self {
        RolloutOptions { mode: Mode::Filter, teacher_forcing: 0.0, kl_on_forecast: false }
    }

    pub fn sample() -> Self {
        RolloutOptions { mode: Mode::Sample, teacher_forcing: 0.0, kl_on_forecast: false }
    }
}

/// Beliefs of every agent at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBelief {
    pub heatmaps: Vec<BeliefHeatmap>,
    pub prior: Option<Vec<GaussianStats>>,
    pub posterior: Option<Vec<GaussianStats>>,
    /// `(alpha_V, alpha_H)` per agent.
    pub alpha: Vec<(f64, f64)>,
    /// State fed to the recurrence.
    pub states: Vec<usize>,
    pub z: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeliefSequence {
    pub observed: usize,
    pub steps: Vec<StepBelief>,
}

impl BeliefSequence {
    pub fn heatmap(&self, t: usize, k: usize) -> &BeliefHeatmap {
        &self.steps[t].heatmaps[k]
    }

    pub fn forecast(&self) -> &[StepBelief] {
        &self.steps[self.observed..]
    }
}

/// A rollout's beliefs plus the tape nodes the objective is built from.
#[derive(Clone, Debug)]
pub struct RolloutTrace {
    pub beliefs: BeliefSequence,
    /// `[K, cells]` log-probabilities per step.
    pub log_probs: Vec<Var>,
    /// Scalar KL summed over agents, where a posterior was inferred.
    pub kl: Vec<Option<Var>>,
}

/// Draws an index from `probs`; `u` beyond the accumulated mass falls back
/// to the last index with positive probability.
pub fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn rows_of(tape: &Tape, v: Var) -> Vec<Vec<f64>> {
    let s = tape.shape(v);
    let n = s[s.len() - 1];
    tape.value(v).chunks(n).map(|c| c.to_vec()).collect()
}

fn stats_rows(tape: &Tape, g: GaussianVars, k: usize) -> Vec<GaussianStats> {
    let rows = tape.shape(g.mu)[0];
    (0..k).map(|i| g.row(tape, if rows == 1 { 0 } else { i })).collect()
}

fn tile(tape: &mut Tape, v: Var, k: usize) -> Result<Var, ModelError> {
    let n = tape.shape(v)[1];
    let z = tape.zeros(&[k, n]);
    Ok(tape.add(z, v)?)
}

fn one_hot_rows(tape: &mut Tape, cells: &[usize], g: usize) -> Result<Var, ModelError> {
    let mut v = vec![0.0; cells.len() * g];
    for (k, &c) in cells.iter().enumerate() {
        v[k * g + c] = 1.0;
    }
    Ok(tape.constant(v, &[cells.len(), g])?)
}

struct Ctx<'a> {
    params: &'a ModelParams,
    grids: &'a [ObservationGrid],
    targets: Option<&'a [Vec<usize>]>,
    opts: RolloutOptions,
    zero_v: Option<Var>,
}

impl Ctx<'_> {
    fn grid_var(&self, tape: &mut Tape, t: usize) -> Result<Var, ModelError> {
        let g = &self.grids[t];
        Ok(tape.constant(g.data.clone(), &[ObservationGrid::CHANNELS, g.height, g.width])?)
    }

    /// Visual features of step `t` (0-based); forecast steps see the blank grid.
    fn visual(&mut self, tape: &mut Tape, t: usize) -> Result<Var, ModelError> {
        if t < self.grids.len() {
            let g = self.grid_var(tape, t)?;
            return encode_visual(tape, self.params, g);
        }
        if let Some(v) = self.zero_v {
            return Ok(v);
        }
        let c = &self.params.config;
        let g = tape.constant(vec![0.0; 3 * c.resolution.width * c.resolution.height], &[3, c.resolution.height, c.resolution.width])?;
        let v = encode_visual(tape, self.params, g)?;
        self.zero_v = Some(v);
        Ok(v)
    }

    fn choose_states<R: Rng + ?Sized>(&self, t: usize, heat: &[Vec<f64>], rng: &mut R) -> Vec<usize> {
        heat.iter()
            .enumerate()
            .map(|(k, p)| match self.opts.mode {
                Mode::Filter => BeliefHeatmap(p.clone()).argmax(),
                Mode::Sample => categorical(p, rng),
                Mode::Train => {
                    let truth = self.targets.expect("checked")[t][k];
                    if rng.random::<f64>() < self.opts.teacher_forcing {
                        let _ = rng.random::<f64>();
                        truth
                    } else {
                        categorical(p, rng)
                    }
                }
            })
            .collect()
    }
}

/// Runs the model over `observed` frames and `horizon` blank forecast steps.
///
/// `grids` holds the averaged frame of every observed step; `targets[t][k]`
/// (required in train mode) the true cell of agent `k` at every step.
pub fn rollout<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    grids: &[ObservationGrid],
    targets: Option<&[Vec<usize>]>,
    opts: RolloutOptions,
    rng: &mut R,
) -> Result<RolloutTrace, ModelError> {
    let c = &params.config;
    if grids.len() != c.observed {
        return Err(ModelError::StepCount { expected: c.observed, got: grids.len() });
    }
    if let Some(ts) = targets {
        if ts.len() != c.steps() {
            return Err(ModelError::StepCount { expected: c.steps(), got: ts.len() });
        }
        if let Some(row) = ts.iter().find(|r| r.len() != c.num_agents) {
            return Err(ModelError::AgentCount { expected: c.num_agents, got: row.len() });
        }
    } else if opts.mode == Mode::Train {
        return Err(ModelError::MissingTargets(c.steps()));
    }
    let mut ctx = Ctx { params, grids, targets, opts, zero_v: None };
    if c.variant.is_recurrent() {
        recurrent_rollout(tape, &mut ctx, rng)
    } else {
        visual_rollout(tape, &mut ctx, rng)
    }
}

fn visual_rollout<R: Rng + ?Sized>(tape: &mut Tape, ctx: &mut Ctx<'_>, rng: &mut R) -> Result<RolloutTrace, ModelError> {
    let params = ctx.params;
    let c = &params.config;
    let (k, g) = (c.num_agents, c.cells());
    let horizon = params.horizon_decoder.as_ref().expect("visual-only model has a horizon decoder");
    let mut last_v = None;
    let mut steps = Vec::with_capacity(c.steps());
    let mut log_probs = Vec::with_capacity(c.steps());
    for t in 0..c.steps() {
        let logits = if t < c.observed {
            let v = ctx.visual(tape, t)?;
            last_v = Some(v);
            decode_visual(tape, params, v)?
        } else {
            let v = last_v.expect("at least one observed step");
            let mut ahead = vec![0.0; k * c.horizon];
            (0..k).for_each(|i| ahead[i * c.horizon + t - c.observed] = 1.0);
            let ahead = tape.constant(ahead, &[k, c.horizon])?;
            let x = tape.concat(&[v, ahead], 1)?;
            let corr = horizon.forward(tape, &params.set, x)?;
            let spatial = tape.slice(v, 1, 0, g)?;
            tape.add(spatial, corr)?
        };
        let heat = tape.softmax(logits)?;
        log_probs.push(tape.log_softmax(logits)?);
        let heat = rows_of(tape, heat);
        let states = ctx.choose_states(t, &heat, rng);
        steps.push(StepBelief {
            heatmaps: heat.into_iter().map(BeliefHeatmap).collect(),
            prior: None,
            posterior: None,
            alpha: vec![(1.0, 0.0); k],
            states,
            z: None,
        });
    }
    let kl = vec![None; c.steps()];
    Ok(RolloutTrace { beliefs: BeliefSequence { observed: c.observed, steps }, log_probs, kl })
}

fn recurrent_rollout<R: Rng + ?Sized>(tape: &mut Tape, ctx: &mut Ctx<'_>, rng: &mut R) -> Result<RolloutTrace, ModelError> {
    let params = ctx.params;
    let c = &params.config;
    let dy = dynamics(params)?;
    let (k, g, zdim) = (c.num_agents, c.cells(), c.latent);
    let shared = c.variant.is_shared();
    let rows = if shared { 1 } else { k };
    let variational = c.variant.is_variational();

    let mut h = tape.zeros(&[rows, c.hidden]);
    let mut prev_heat = tape.constant(vec![1.0 / g as f64; k * g], &[k, g])?;
    let ident = if shared {
        let mut eye = vec![0.0; k * k];
        (0..k).for_each(|i| eye[i * k + i] = 1.0);
        Some(tape.constant(eye, &[k, k])?)
    } else {
        None
    };

    let mut steps = Vec::with_capacity(c.steps());
    let mut log_probs = Vec::with_capacity(c.steps());
    let mut kls = Vec::with_capacity(c.steps());
    for t in 0..c.steps() {
        let v = ctx.visual(tape, t)?;
        let ht = match &dy.interaction {
            Interaction::Relation(_) => graph_message_pass(tape, params, h)?,
            Interaction::SocialPool(_) => social_pool(tape, params, h)?,
            Interaction::None => h,
        };

        let infer = ctx.opts.mode == Mode::Train && (t < c.observed || ctx.opts.kl_on_forecast);
        let (prior, posterior, z, kl) = if variational {
            let prior = prior_step(tape, params, ht)?;
            if infer {
                let target = one_hot_rows(tape, &ctx.targets.expect("checked")[t], g)?;
                let post = encode_posterior(tape, params, ht, target)?;
                let kl = gaussian_kl(tape, post, prior)?;
                let z = reparameterize(tape, post, rng)?;
                (Some(prior), Some(post), z, Some(kl))
            } else if ctx.opts.mode == Mode::Filter {
                (Some(prior), None, prior.mu, None)
            } else {
                let z = reparameterize(tape, prior, rng)?;
                (Some(prior), None, z, None)
            }
        } else {
            (None, None, tape.zeros(&[rows, zdim]), None)
        };

        let stats = match prior {
            Some(p) if shared => GaussianVars { mu: tile(tape, p.mu, k)?, sigma: tile(tape, p.sigma, k)? },
            Some(p) => p,
            None => {
                let zero = tape.zeros(&[k, zdim]);
                GaussianVars { mu: zero, sigma: zero }
            }
        };
        let hrows = match ident {
            Some(eye) => {
                let hk = tile(tape, ht, k)?;
                tape.concat(&[hk, eye], 1)?
            }
            None => ht,
        };
        let fused = fuse_decode(tape, params, v, hrows, stats, prev_heat)?;
        let heat_var = tape.softmax(fused.logits)?;
        log_probs.push(tape.log_softmax(fused.logits)?);
        kls.push(kl);

        let heat = rows_of(tape, heat_var);
        let states = ctx.choose_states(t, &heat, rng);
        let s = one_hot_rows(tape, &states, g)?;
        h = recurrence(tape, params, s, z, ht)?;
        prev_heat = heat_var;

        let (av, ah) = (tape.value(fused.alpha_v).to_vec(), tape.value(fused.alpha_h).to_vec());
        steps.push(StepBelief {
            heatmaps: heat.into_iter().map(BeliefHeatmap).collect(),
            prior: prior.map(|p| stats_rows(tape, p, k)),
            posterior: posterior.map(|p| stats_rows(tape, p, k)),
            alpha: av.into_iter().zip(ah).collect(),
            states,
            z: variational.then(|| rows_of(tape, z)),
        });
    }
    Ok(RolloutTrace { beliefs: BeliefSequence { observed: c.observed, steps }, log_probs, kl: kls })
}
