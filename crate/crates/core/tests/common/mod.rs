//! Central finite-difference oracle shared by the gradient tests.
#![allow(dead_code)]

use beliefnet_core::autodiff::{ParamSet, Tape, Var};

pub const EPS: f64 = 1e-5;

/// Relative error with a small absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares the analytic gradient of `f` with respect to each leaf input
/// against central differences. `f` builds a scalar loss from variable leaves.
pub fn check_inputs<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(v, s)| tape.variable(v.clone(), s).unwrap()).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |values: &[(Vec<f64>, Vec<usize>)]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|(v, s)| t.variable(v.clone(), s).unwrap()).collect();
        let l = f(&mut t, &vs);
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for (i, (values, _)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; values.len()]);
        for j in 0..values.len() {
            let mut plus = inputs.to_vec();
            plus[i].0[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].0[j] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Same check against every value of a parameter set. `stride` > 1 samples
/// every `stride`-th coordinate of large tensors.
pub fn check_params<F>(params: &ParamSet, stride: usize, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamSet) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params);
    let grads = tape.backward(loss).unwrap().param_grads(params);
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    let mut counter = 0usize;
    let ids: Vec<_> = (0..params.len()).collect();
    for t in ids {
        let n = params.iter().nth(t).unwrap().values.len();
        for j in 0..n {
            counter += 1;
            if counter % stride != 0 {
                continue;
            }
            let id = params.find(&params.iter().nth(t).unwrap().name).unwrap();
            let orig = p.get(id).values[j];
            p.get_mut(id).values[j] = orig + EPS;
            let mut tp = Tape::new();
            let lp = f(&mut tp, &p);
            let up = tp.scalar(lp);
            p.get_mut(id).values[j] = orig - EPS;
            let mut tm = Tape::new();
            let lm = f(&mut tm, &p);
            let down = tm.scalar(lm);
            p.get_mut(id).values[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(rel_err(grads[t][j], numeric));
        }
    }
    worst
}

pub fn rng_values(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values bounded away from zero (keeps relu/max kinks out of the FD stencil).
pub fn rng_away_from_zero(seed: u64, n: usize) -> Vec<f64> {
    rng_values(seed, n, 0.1, 1.0)
        .into_iter()
        .zip(rng_values(seed ^ 0x5eed, n, 0.0, 1.0))
        .map(|(m, s)| if s < 0.5 { -m } else { m })
        .collect()
}
