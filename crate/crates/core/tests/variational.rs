use beliefnet_core::autodiff::{gaussian_kl, gaussian_kl_values, GaussianStats, GaussianVars, Tape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn log_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let d = (x - mu) / sigma;
    -0.5 * d * d - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `E_q[log q - log p]` estimated from samples of `q`.
fn monte_carlo_kl(q: &GaussianStats, p: &GaussianStats, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..q.mu.len() {
        let dist = Normal::new(q.mu[i], q.sigma[i]).unwrap();
        let mut acc = 0.0;
        for _ in 0..samples {
            let x = dist.sample(&mut rng);
            acc += log_density(x, q.mu[i], q.sigma[i]) - log_density(x, p.mu[i], p.sigma[i]);
        }
        total += acc / samples as f64;
    }
    total
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let cases = [
        (vec![1.0], vec![1.0], vec![0.0], vec![1.0]),
        (vec![0.5, -1.0, 2.0], vec![0.4, 1.5, 0.8], vec![0.0, 0.3, 1.0], vec![1.0, 0.7, 2.0]),
        (vec![-0.7, 0.2], vec![2.0, 0.3], vec![0.4, -0.9], vec![0.5, 1.1]),
    ];
    for (i, (mq, sq, mp, sp)) in cases.into_iter().enumerate() {
        let q = GaussianStats::new(mq, sq).unwrap();
        let p = GaussianStats::new(mp, sp).unwrap();
        let exact = gaussian_kl_values(&q, &p).unwrap();
        let mc = monte_carlo_kl(&q, &p, 100_000, 17 + i as u64);
        assert!((mc - exact).abs() / exact < 0.01, "case {i}: mc {mc} vs {exact}");
    }
}

#[test]
fn tape_kl_agrees_with_value_kl() {
    let q = GaussianStats::new(vec![0.1, -0.4, 1.3], vec![0.9, 0.2, 1.4]).unwrap();
    let p = GaussianStats::new(vec![-0.5, 0.0, 0.7], vec![1.2, 0.6, 0.3]).unwrap();
    let mut t = Tape::new();
    let a = GaussianVars::leaf(&mut t, &q, false).unwrap();
    let b = GaussianVars::leaf(&mut t, &p, false).unwrap();
    let kl = gaussian_kl(&mut t, a, b).unwrap();
    assert!((t.scalar(kl) - gaussian_kl_values(&q, &p).unwrap()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(
        mq in prop::collection::vec(-3.0f64..3.0, 4),
        sq in prop::collection::vec(0.05f64..3.0, 4),
        mp in prop::collection::vec(-3.0f64..3.0, 4),
        sp in prop::collection::vec(0.05f64..3.0, 4),
    ) {
        let q = GaussianStats::new(mq, sq).unwrap();
        let p = GaussianStats::new(mp, sp).unwrap();
        prop_assert!(gaussian_kl_values(&q, &p).unwrap() >= -1e-12);
        prop_assert_eq!(gaussian_kl_values(&q, &q).unwrap(), 0.0);
    }
}
