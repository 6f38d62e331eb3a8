mod common;

use beliefnet_core::autodiff::{GaussianVars, ParamSet, Tape, Var};
use beliefnet_core::model::{
    encode_posterior, encode_visual, fuse_decode, graph_message_pass, prior_step, recurrence, rollout, social_pool,
    ModelConfig, ModelParams, RolloutOptions, Variant,
};
use beliefnet_core::render::{GridSpec, ObservationGrid, Resolution};
use beliefnet_core::train::{elbo_loss, lambda_weights, TrainConfig};
use common::{check_inputs, check_params, rng_values};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;

fn micro(variant: Variant, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        variant,
        num_agents: 2,
        hidden: 8,
        latent: 4,
        embed: 4,
        message: 6,
        mlp_hidden: 6,
        decoder_hidden: 8,
        attention_hidden: 5,
        observed: 2,
        horizon: 1,
        grid: GridSpec { cols: 4, rows: 2 },
        resolution: Resolution { width: 8, height: 4 },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new(cfg, &mut rng).unwrap();
    // non-zero biases keep relu inputs away from their kink
    for (i, t) in p.set.iter_mut().enumerate() {
        if t.values.iter().all(|&v| v == 0.0) {
            t.values = rng_values(seed * 1000 + i as u64, t.values.len(), -0.3, 0.3);
        }
    }
    p
}

fn with_set(base: &ModelParams, set: &ParamSet) -> ModelParams {
    let mut p = base.clone();
    p.set = set.clone();
    p
}

fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(rng_values(seed ^ 0x77, n, -1.0, 1.0), &shape).unwrap();
    let y = tape.mul(x, w).unwrap();
    tape.sum(y).unwrap()
}

fn project_stats(tape: &mut Tape, s: GaussianVars, seed: u64) -> Var {
    let a = project(tape, s.mu, seed);
    let b = project(tape, s.sigma, seed + 1);
    tape.add(a, b).unwrap()
}

fn one_hot(tape: &mut Tape, cells: &[usize], g: usize) -> Var {
    let mut v = vec![0.0; cells.len() * g];
    cells.iter().enumerate().for_each(|(k, &c)| v[k * g + c] = 1.0);
    tape.constant(v, &[cells.len(), g]).unwrap()
}

#[test]
fn prior_head_matches_finite_differences() {
    for seed in 0..5 {
        let base = micro(Variant::GraphVrnn, seed);
        let h = rng_values(seed + 10, 16, -1.0, 1.0);
        let err = check_params(&base.set, 1, |t, set| {
            let p = with_set(&base, set);
            let hv = t.constant(h.clone(), &[2, 8]).unwrap();
            let s = prior_step(t, &p, hv).unwrap();
            project_stats(t, s, seed)
        });
        assert!(err < TOL, "params seed {seed}: {err}");
        let err = check_inputs(&[(h.clone(), vec![2, 8])], |t, v| {
            let s = prior_step(t, &base, v[0]).unwrap();
            project_stats(t, s, seed)
        });
        assert!(err < TOL, "input seed {seed}: {err}");
    }
}

#[test]
fn posterior_encoder_matches_finite_differences() {
    for seed in 0..5 {
        let base = micro(Variant::GraphVrnn, seed);
        let h = rng_values(seed + 20, 16, -1.0, 1.0);
        let err = check_params(&base.set, 1, |t, set| {
            let p = with_set(&base, set);
            let hv = t.constant(h.clone(), &[2, 8]).unwrap();
            let target = one_hot(t, &[3, 6], 8);
            let s = encode_posterior(t, &p, hv, target).unwrap();
            project_stats(t, s, seed)
        });
        assert!(err < TOL, "params seed {seed}: {err}");
        let err = check_inputs(&[(h.clone(), vec![2, 8])], |t, v| {
            let target = one_hot(t, &[0, 7], 8);
            let s = encode_posterior(t, &base, v[0], target).unwrap();
            project_stats(t, s, seed)
        });
        assert!(err < TOL, "input seed {seed}: {err}");
    }
}

#[test]
fn fusion_decoder_matches_finite_differences() {
    for seed in 0..5 {
        let base = micro(Variant::GraphVrnn, seed);
        let vd = base.config.visual_dim();
        let inputs = [
            (rng_values(seed + 30, 2 * vd, -1.0, 1.0), vec![2, vd]),
            (rng_values(seed + 31, 16, -1.0, 1.0), vec![2, 8]),
            (rng_values(seed + 32, 8, -1.0, 1.0), vec![2, 4]),
            (rng_values(seed + 33, 8, 0.2, 1.5), vec![2, 4]),
            (rng_values(seed + 34, 16, 0.0, 0.25), vec![2, 8]),
        ];
        let build = |t: &mut Tape, p: &ModelParams, v: &[Var]| {
            let f = fuse_decode(t, p, v[0], v[1], GaussianVars { mu: v[2], sigma: v[3] }, v[4]).unwrap();
            let a = project(t, f.logits, seed);
            let b = project(t, f.alpha_v, seed + 1);
            let c = project(t, f.alpha_h, seed + 2);
            let ab = t.add(a, b).unwrap();
            t.add(ab, c).unwrap()
        };
        let err = check_params(&base.set, 1, |t, set| {
            let p = with_set(&base, set);
            let vs: Vec<Var> = inputs.iter().map(|(v, s)| t.constant(v.clone(), s).unwrap()).collect();
            build(t, &p, &vs)
        });
        assert!(err < TOL, "params seed {seed}: {err}");
        let err = check_inputs(&inputs, |t, v| build(t, &base, v));
        assert!(err < TOL, "inputs seed {seed}: {err}");
    }
}

#[test]
fn relation_network_matches_finite_differences() {
    for variant in [Variant::GraphRnn, Variant::SocialRnn] {
        for seed in 0..5 {
            let base = micro(variant, seed);
            let h = rng_values(seed + 40, 16, -1.0, 1.0);
            let step = |t: &mut Tape, p: &ModelParams, hv: Var| match variant {
                Variant::SocialRnn => social_pool(t, p, hv).unwrap(),
                _ => graph_message_pass(t, p, hv).unwrap(),
            };
            let err = check_params(&base.set, 1, |t, set| {
                let p = with_set(&base, set);
                let hv = t.constant(h.clone(), &[2, 8]).unwrap();
                let y = step(t, &p, hv);
                project(t, y, seed)
            });
            assert!(err < TOL, "{variant} params seed {seed}: {err}");
            let err = check_inputs(&[(h.clone(), vec![2, 8])], |t, v| {
                let y = step(t, &base, v[0]);
                project(t, y, seed)
            });
            assert!(err < TOL, "{variant} input seed {seed}: {err}");
        }
    }
}

#[test]
fn recurrence_matches_finite_differences() {
    for seed in 0..5 {
        let base = micro(Variant::GraphVrnn, seed);
        let z = rng_values(seed + 50, 8, -1.0, 1.0);
        let h = rng_values(seed + 51, 16, -1.0, 1.0);
        let err = check_params(&base.set, 1, |t, set| {
            let p = with_set(&base, set);
            let s = one_hot(t, &[1, 5], 8);
            let zv = t.constant(z.clone(), &[2, 4]).unwrap();
            let hv = t.constant(h.clone(), &[2, 8]).unwrap();
            let y = recurrence(t, &p, s, zv, hv).unwrap();
            project(t, y, seed)
        });
        assert!(err < TOL, "params seed {seed}: {err}");
        let err = check_inputs(&[(z.clone(), vec![2, 4]), (h.clone(), vec![2, 8])], |t, v| {
            let s = one_hot(t, &[2, 2], 8);
            let y = recurrence(t, &base, s, v[0], v[1]).unwrap();
            project(t, y, seed)
        });
        assert!(err < TOL, "inputs seed {seed}: {err}");
    }
}

#[test]
fn visual_encoder_matches_finite_differences() {
    let base = micro(Variant::VisualOnly, 3);
    let grid = rng_values(60, 3 * 4 * 8, 0.0, 1.0);
    let err = check_params(&base.set, 1, |t, set| {
        let p = with_set(&base, set);
        let g = t.constant(grid.clone(), &[3, 4, 8]).unwrap();
        let v = encode_visual(t, &p, g).unwrap();
        project(t, v, 3)
    });
    assert!(err < TOL, "{err}");
}

fn micro_grids(seed: u64) -> Vec<ObservationGrid> {
    (0..2)
        .map(|step| ObservationGrid {
            width: 8,
            height: 4,
            step,
            data: rng_values(seed * 7 + step as u64, 3 * 32, 0.0, 1.0),
        })
        .collect()
}

/// Whole objective: train-mode rollout with full teacher forcing (so the
/// state path is fixed) and a fixed noise seed, through the weighted ELBO.
fn end_to_end(variant: Variant, seed: u64) -> f64 {
    let base = micro(variant, seed);
    let grids = micro_grids(seed);
    let targets = vec![vec![1, 6], vec![2, 6], vec![3, 7]];
    let cfg = TrainConfig { observed: 2, horizon: 1, ..TrainConfig::default() };
    let lambdas = lambda_weights(&cfg);
    check_params(&base.set, 1, |t, set| {
        let p = with_set(&base, set);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        let trace = rollout(t, &p, &grids, Some(&targets), RolloutOptions::train(1.0), &mut rng).unwrap();
        elbo_loss(t, &trace, &targets, &lambdas, 0.7).unwrap().0
    })
}

#[test]
fn end_to_end_loss_matches_finite_differences() {
    for variant in Variant::ALL {
        for seed in 0..2 {
            let err = end_to_end(variant, seed);
            assert!(err < E2E_TOL, "{variant} seed {seed}: {err}");
        }
    }
}
