//! Tracking and forecasting metrics: per-step normalized l2 from soft-argmax
//! positions, visible/hidden strata, the forecast log-likelihood ratio over a
//! uniform guess, and the marginal prior baseline.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::Example;
use crate::model::{rollout, ModelError, ModelParams, RolloutOptions, StepBelief};
use crate::render::{in_unit, BeliefHeatmap, GridSpec};
use crate::sim::Role;
use crate::Pos;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("position ({x}, {y}) lies outside the unit field")]
    OutOfRange { x: f64, y: f64 },
    #[error("{what}: expected {expected}, got {got}")]
    Dims { what: &'static str, expected: usize, got: usize },
    #[error("model is built for {expected} agents, data has {got}")]
    AgentCount { expected: usize, got: usize },
    #[error("no training targets")]
    EmptyTrainingSet,
    #[error("no examples to evaluate")]
    NoExamples,
}

fn dims(what: &'static str, expected: usize, got: usize) -> Result<(), EvalError> {
    if expected != got {
        return Err(EvalError::Dims { what, expected, got });
    }
    Ok(())
}

/// Euclidean distance in the unit field.
pub fn normalized_l2(pred: Pos, gt: Pos) -> Result<f64, EvalError> {
    for p in [pred, gt] {
        if !in_unit(p) {
            return Err(EvalError::OutOfRange { x: p[0], y: p[1] });
        }
    }
    Ok(libm::hypot(pred[0] - gt[0], pred[1] - gt[1]))
}

/// Mean of [`normalized_l2`] over agents.
pub fn step_l2(pred: &[Pos], gt: &[Pos]) -> Result<f64, EvalError> {
    dims("agents", gt.len(), pred.len())?;
    let mut total = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        total += normalized_l2(p, g)?;
    }
    Ok(total / gt.len() as f64)
}

/// Running sum and count; the mean of an empty stratum is absent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stratum {
    pub sum: f64,
    pub count: usize,
}

impl Stratum {
    pub fn add(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Stratum) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Errors split by ball/player and visible/hidden.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitTable {
    /// `cells[ball as usize][hidden as usize]`.
    pub cells: [[Stratum; 2]; 2],
}

impl SplitTable {
    pub fn get(&self, ball: bool, visible: bool) -> Option<f64> {
        self.cells[ball as usize][!visible as usize].mean()
    }

    pub fn merge(&mut self, other: &SplitTable) {
        for (a, b) in self.cells.iter_mut().flatten().zip(other.cells.iter().flatten()) {
            a.merge(b);
        }
    }
}

/// Stratifies `errors[t][k]` by `visible[t][k]` and whether agent `k` is the ball.
pub fn visible_hidden_split(errors: &[Vec<f64>], visible: &[Vec<bool>], roles: &[Role]) -> Result<SplitTable, EvalError> {
    dims("steps", errors.len(), visible.len())?;
    let mut table = SplitTable::default();
    for (row, vis) in errors.iter().zip(visible) {
        dims("agents", roles.len(), row.len())?;
        dims("agents", roles.len(), vis.len())?;
        for ((&e, &v), role) in row.iter().zip(vis).zip(roles) {
            table.cells[role.is_ball() as usize][!v as usize].add(e);
        }
    }
    Ok(table)
}

/// Accumulated `log p(gt) - log(1/G)` terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LlStats {
    pub sum_log_ratio: f64,
    pub count: usize,
    /// Probabilities raised to [`PROB_FLOOR`].
    pub clamps: usize,
}

impl LlStats {
    pub fn merge(&mut self, other: &LlStats) {
        self.sum_log_ratio += other.sum_log_ratio;
        self.count += other.count;
        self.clamps += other.clamps;
    }

    /// Geometric-mean likelihood relative to the uniform guess.
    pub fn ratio(&self) -> Option<f64> {
        (self.count > 0).then(|| libm::exp(self.sum_log_ratio / self.count as f64))
    }
}

/// `log(p G)`, with `p` raised to the floor if needed. Scaling before the
/// log keeps the uniform case at exactly zero.
fn log_ratio(p: f64, g: usize, clamps: &mut usize) -> f64 {
    let p = if p < PROB_FLOOR {
        *clamps += 1;
        PROB_FLOOR
    } else {
        p
    };
    libm::log(p * g as f64)
}

/// Log-likelihood ratio of the true forecast cells `gt[t][k]` under one
/// sampled forecast.
pub fn ll_ratio(forecast: &[StepBelief], gt: &[Vec<usize>]) -> Result<LlStats, EvalError> {
    ll_ratio_samples(&[forecast], gt)
}

/// As [`ll_ratio`], averaging the likelihood over several sampled forecasts
/// (log-mean-exp) for each step and agent.
pub fn ll_ratio_samples(samples: &[&[StepBelief]], gt: &[Vec<usize>]) -> Result<LlStats, EvalError> {
    let Some(first) = samples.first() else {
        return Err(EvalError::Dims { what: "samples", expected: 1, got: 0 });
    };
    for s in samples {
        dims("forecast steps", gt.len(), s.len())?;
    }
    let mut out = LlStats::default();
    for (t, row) in gt.iter().enumerate() {
        dims("agents", first[t].heatmaps.len(), row.len())?;
        for (k, &cell) in row.iter().enumerate() {
            let g = first[t].heatmaps[k].0.len();
            dims("cells", g, cell.max(g - 1) + 1)?;
            let logs: Vec<f64> = samples.iter().map(|s| log_ratio(s[t].heatmaps[k].0[cell], g, &mut out.clamps)).collect();
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.sum_log_ratio += m + libm::log(logs.iter().map(|&l| libm::exp(l - m)).sum::<f64>() / logs.len() as f64);
            out.count += 1;
        }
    }
    Ok(out)
}

/// Per-agent empirical cell frequencies with one pseudo-count per cell.
/// `rows` yields the cells of all `k` agents at one training step.
pub fn prior_baseline<'a, I>(rows: I, k: usize, cells: usize) -> Result<Vec<BeliefHeatmap>, EvalError>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut counts = vec![vec![1.0; cells]; k];
    let mut n = 0usize;
    for row in rows {
        dims("agents", k, row.len())?;
        for (agent, &c) in row.iter().enumerate() {
            dims("cells", cells, c.max(cells - 1) + 1)?;
            counts[agent][c] += 1.0;
        }
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyTrainingSet);
    }
    Ok(counts
        .into_iter()
        .map(|c| {
            let total: f64 = c.iter().sum();
            BeliefHeatmap(c.into_iter().map(|x| x / total).collect())
        })
        .collect())
}

/// Evaluation options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub seed: u64,
    /// Sampled forecasts per example for the likelihood ratio.
    pub ll_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 0, ll_samples: 1 }
    }
}

/// Metrics of one model on a set of examples. Merging is associative, so
/// partial results can be reduced in any fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantReport {
    pub name: String,
    pub observed: usize,
    /// Mean agent l2 per step, all steps.
    pub per_step: Vec<Stratum>,
    /// Observed steps only.
    pub split: SplitTable,
    pub ll: LlStats,
    pub examples: usize,
}

impl VariantReport {
    pub fn empty(name: &str, observed: usize, steps: usize) -> Self {
        VariantReport {
            name: name.to_string(),
            observed,
            per_step: vec![Stratum::default(); steps],
            split: SplitTable::default(),
            ll: LlStats::default(),
            examples: 0,
        }
    }

    pub fn merge(&mut self, other: &VariantReport) {
        for (a, b) in self.per_step.iter_mut().zip(&other.per_step) {
            a.merge(b);
        }
        self.split.merge(&other.split);
        self.ll.merge(&other.ll);
        self.examples += other.examples;
    }

    pub fn l2(&self) -> Vec<f64> {
        self.per_step.iter().map(|s| s.mean().unwrap_or(f64::NAN)).collect()
    }

    /// Hidden-agent error on observed steps, ball and players together.
    pub fn hidden_l2(&self) -> Option<f64> {
        let mut s = self.split.cells[0][1];
        s.merge(&self.split.cells[1][1]);
        s.mean()
    }

    fn add_positions(&mut self, ex: &Example, grid: &GridSpec, heat: impl Fn(usize, usize) -> Vec<f64>) -> Result<(), EvalError> {
        let mut errors = Vec::with_capacity(self.observed);
        for t in 0..ex.steps() {
            let pred: Vec<Pos> = (0..ex.k()).map(|k| grid.heatmap_to_coords(&heat(t, k))).collect();
            let row = pred.iter().zip(&ex.coords[t]).map(|(&p, &g)| normalized_l2(p, g)).collect::<Result<Vec<_>, _>>()?;
            self.per_step[t].add(row.iter().sum::<f64>() / row.len() as f64);
            if t < self.observed {
                errors.push(row);
            }
        }
        self.split.merge(&visible_hidden_split(&errors, &ex.visible[..self.observed], &ex.roles)?);
        Ok(())
    }
}

/// Rollout seed of the `index`-th example: independent of evaluation order.
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Filter-mode positions and sample-mode likelihood of one example.
pub fn evaluate_example(params: &ModelParams, ex: &Example, index: usize, cfg: &EvalConfig) -> Result<VariantReport, EvalError> {
    let c = &params.config;
    if ex.k() != c.num_agents {
        return Err(EvalError::AgentCount { expected: c.num_agents, got: ex.k() });
    }
    dims("steps", c.steps(), ex.steps())?;
    let mut rng = example_rng(cfg.seed, index);
    let mut report = VariantReport::empty(c.variant.name(), c.observed, c.steps());

    let mut tape = Tape::new();
    let filtered = rollout(&mut tape, params, &ex.grids, None, RolloutOptions::filter(), &mut rng)?.beliefs;
    report.add_positions(ex, &c.grid, |t, k| filtered.heatmap(t, k).0.clone())?;

    let mut samples = Vec::with_capacity(cfg.ll_samples.max(1));
    for _ in 0..cfg.ll_samples.max(1) {
        let mut tape = Tape::new();
        samples.push(rollout(&mut tape, params, &ex.grids, None, RolloutOptions::sample(), &mut rng)?.beliefs);
    }
    let forecasts: Vec<&[StepBelief]> = samples.iter().map(|b| b.forecast()).collect();
    report.ll = ll_ratio_samples(&forecasts, &ex.targets[c.observed..])?;
    report.examples = 1;
    Ok(report)
}

/// Sequential evaluation over `examples`.
pub fn evaluate_variant(params: &ModelParams, examples: &[Example], cfg: &EvalConfig) -> Result<VariantReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::NoExamples);
    }
    let c = &params.config;
    let mut report = VariantReport::empty(c.variant.name(), c.observed, c.steps());
    for (i, ex) in examples.iter().enumerate() {
        report.merge(&evaluate_example(params, ex, i, cfg)?);
    }
    Ok(report)
}

/// The marginal prior scored like a model: the same heatmap at every step.
pub fn evaluate_prior(prior: &[BeliefHeatmap], examples: &[Example], observed: usize, grid: &GridSpec) -> Result<VariantReport, EvalError> {
    let first = examples.first().ok_or(EvalError::NoExamples)?;
    let mut report = VariantReport::empty("prior", observed, first.steps());
    for ex in examples {
        if ex.k() != prior.len() {
            return Err(EvalError::AgentCount { expected: prior.len(), got: ex.k() });
        }
        dims("steps", report.per_step.len(), ex.steps())?;
        report.add_positions(ex, grid, |_, k| prior[k].0.clone())?;
        let forecast: Vec<StepBelief> = (observed..ex.steps())
            .map(|_| StepBelief {
                heatmaps: prior.to_vec(),
                prior: None,
                posterior: None,
                alpha: Vec::new(),
                states: Vec::new(),
                z: None,
            })
            .collect();
        report.ll.merge(&ll_ratio(&forecast, &ex.targets[observed..])?);
        report.examples += 1;
    }
    Ok(report)
}

/// Results of several models on one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub observed: usize,
    pub horizon: usize,
    pub cells: usize,
    pub config: EvalConfig,
    pub rows: Vec<VariantReport>,
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&VariantReport> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn step_label(&self, t: usize) -> String {
        if t < self.observed {
            format!("l2_obs_{}", t + 1)
        } else {
            format!("l2_fc_{}", t + 1 - self.observed)
        }
    }

    /// One `variant,metric,value` row per metric; absent strata are `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,metric,value\n");
        let echo = [
            ("observed", self.observed as u64),
            ("horizon", self.horizon as u64),
            ("cells", self.cells as u64),
            ("seed", self.config.seed),
            ("ll_samples", self.config.ll_samples as u64),
        ];
        for (k, v) in echo {
            let _ = writeln!(s, "config,{k},{v}");
        }
        for r in &self.rows {
            for (t, st) in r.per_step.iter().enumerate() {
                let _ = writeln!(s, "{},{},{}", r.name, self.step_label(t), opt(st.mean()));
            }
            for (ball, who) in [(true, "ball"), (false, "player")] {
                for (visible, vis) in [(true, "visible"), (false, "hidden")] {
                    let _ = writeln!(s, "{},l2_{who}_{vis},{}", r.name, opt(r.split.get(ball, visible)));
                }
            }
            let _ = writeln!(s, "{},ll_ratio,{}", r.name, opt(r.ll.ratio()));
            let _ = writeln!(s, "{},ll_clamps,{}", r.name, r.ll.clamps);
            let _ = writeln!(s, "{},examples,{}", r.name, r.examples);
        }
        s
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<12}", "variant");
        for t in 0..self.observed + self.horizon {
            let _ = write!(s, " {:>9}", self.step_label(t).trim_start_matches("l2_"));
        }
        let _ = writeln!(s, " {:>9} {:>9} {:>9} {:>9} {:>9} {:>6}", "ball/vis", "ball/hid", "plyr/vis", "plyr/hid", "ll-ratio", "n");
        for r in &self.rows {
            let _ = write!(s, "{:<12}", r.name);
            for st in &r.per_step {
                let _ = write!(s, " {:>9}", short(st.mean()));
            }
            for (ball, visible) in [(true, true), (true, false), (false, true), (false, false)] {
                let _ = write!(s, " {:>9}", short(r.split.get(ball, visible)));
            }
            let _ = writeln!(s, " {:>9} {:>6}", short(r.ll.ratio()), r.examples);
        }
        s
    }
}

fn short(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_examples() {
        assert_eq!(normalized_l2([0.3, 0.4], [0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(normalized_l2([0.0, 0.0], [1.0, 1.0]).unwrap(), core::f64::consts::SQRT_2);
        let grid = GridSpec::default();
        let centre = grid.heatmap_to_coords(&BeliefHeatmap::uniform(grid.cells()).0);
        assert!(normalized_l2(centre, [0.5, 0.5]).unwrap() < 1e-12);
        assert!(matches!(normalized_l2([1.1, 0.0], [0.0, 0.0]), Err(EvalError::OutOfRange { .. })));
    }

    #[test]
    fn all_visible_leaves_hidden_absent() {
        let roles = [Role::Ball, Role::Player { team: 0, index: 0 }];
        let t = visible_hidden_split(&[vec![0.1, 0.1], vec![0.1, 0.1]], &[vec![true; 2], vec![true; 2]], &roles).unwrap();
        assert_eq!(t.get(true, false), None);
        assert_eq!(t.get(false, false), None);
        assert_eq!(t.get(true, true), Some(0.1));
        assert_eq!(t.get(false, true), Some(0.1));
    }

    #[test]
    fn prior_degenerate_and_empty() {
        let rows = [[5usize, 2], [5, 2], [5, 3]];
        let h = prior_baseline(rows.iter().map(|r| &r[..]), 2, 10).unwrap();
        assert_eq!(h[0].0[5], 4.0 / 13.0);
        assert!(h.iter().all(|x| x.is_normalized(1e-12)));
        assert_eq!(prior_baseline(core::iter::empty(), 2, 10), Err(EvalError::EmptyTrainingSet));
    }
}
