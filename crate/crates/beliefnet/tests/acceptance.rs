//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails. Criteria 5 and 6 train real models and take a while;
//! pass criterion numbers (`cargo test --test acceptance -- 2 4`) to run a
//! subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use beliefnet::config::RunConfig;
use beliefnet::driver::{build_examples, evaluate_parallel, moving_average, thread_count, thread_pool, Trainer};
use beliefnet::export::{export_samples, sampled_episodes};
use beliefnet::trajectories::{load_trajectories, save_trajectories};
use beliefnet::{load_checkpoint, save_checkpoint};
use beliefnet_core::autodiff::{gaussian_kl, gaussian_kl_values, GaussianStats, GaussianVars, Tape};
use beliefnet_core::data::Example;
use beliefnet_core::eval::{evaluate_prior, example_rng, prior_baseline, EvalConfig, VariantReport};
use beliefnet_core::model::{graph_message_pass, rollout, ModelConfig, ModelParams, RolloutOptions, Variant};
use beliefnet_core::render::{apply_occlusion_schedule, GridSpec, ObservationGrid, Resolution};
use beliefnet_core::sim::{gen_synthetic, simulate_soccer, Provenance, Role, SoccerConfig, Split, SynthConfig};
use beliefnet_core::train::{elbo_loss, lambda_weights, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::ThreadPool;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// 1. gradient suites

fn gradients() -> Check {
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let suites = ["autodiff_gradients", "model_gradients"];
    let mut args = vec!["test", "-p", "beliefnet-core"];
    for s in suites {
        args.extend(["--test", s]);
    }
    let out = Command::new(cargo).args(&args).output().map_err(|e| format!("cannot run cargo: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let results: Vec<&str> = stdout.lines().filter(|l| l.starts_with("test result:")).collect();
    ensure(out.status.success() && results.len() == suites.len(), format!("gradient suites failed:\n{stdout}"))?;
    let mut secs = 0.0;
    let mut passed = 0;
    for line in &results {
        secs += line.rsplit("finished in ").next().and_then(|s| s.trim_end_matches('s').parse::<f64>().ok()).ok_or("unparsed timing")?;
        passed += line.split("ok. ").nth(1).and_then(|s| s.split(' ').next()).and_then(|n| n.parse::<usize>().ok()).unwrap_or(0);
    }
    ensure(secs < 60.0, format!("suites took {secs:.1} s"))?;
    Ok(format!("{passed} finite-difference checks (every op, every subnet, end-to-end) in {secs:.1} s"))
}

// ---------------------------------------------------------------------------
// 2. KL identities

fn monte_carlo_kl(q: &GaussianStats, p: &GaussianStats, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_density = |x: f64, mu: f64, s: f64| -0.5 * ((x - mu) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..q.mu.len())
        .map(|i| {
            let d = Normal::new(q.mu[i], q.sigma[i]).unwrap();
            (0..n).map(|_| d.sample(&mut rng)).map(|x| log_density(x, q.mu[i], q.sigma[i]) - log_density(x, p.mu[i], p.sigma[i])).sum::<f64>()
                / n as f64
        })
        .sum()
}

fn kl_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let mu: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..8).map(|_| rng.random_range(1e-3..5.0)).collect();
        let q = GaussianStats::new(mu, sigma).unwrap();
        ensure(gaussian_kl_values(&q, &q).unwrap() == 0.0, "KL(q,q) != 0")?;
        let mut t = Tape::new();
        let v = GaussianVars::leaf(&mut t, &q, false).unwrap();
        let kl = gaussian_kl(&mut t, v, v).unwrap();
        ensure(t.scalar(kl) == 0.0, "tape KL(q,q) != 0")?;
    }
    let one = GaussianStats::new(vec![1.0], vec![1.0]).unwrap();
    let std = GaussianStats::new(vec![0.0], vec![1.0]).unwrap();
    let half = gaussian_kl_values(&one, &std).unwrap();
    ensure((half - 0.5).abs() < 1e-12, format!("KL(N(1,1)||N(0,1)) = {half}"))?;
    let cases = [
        (one.clone(), std.clone()),
        (GaussianStats::new(vec![0.5, -1.0, 2.0], vec![0.4, 1.5, 0.8]).unwrap(), GaussianStats::new(vec![0.0, 0.3, 1.0], vec![1.0, 0.7, 2.0]).unwrap()),
        (GaussianStats::new(vec![-0.7, 0.2], vec![2.0, 0.3]).unwrap(), GaussianStats::new(vec![0.4, -0.9], vec![0.5, 1.1]).unwrap()),
    ];
    let mut worst: f64 = 0.0;
    for (i, (q, p)) in cases.iter().enumerate() {
        let exact = gaussian_kl_values(q, p).unwrap();
        let rel = (monte_carlo_kl(q, p, 100_000, 40 + i as u64) - exact).abs() / exact;
        worst = worst.max(rel);
    }
    ensure(worst < 0.01, format!("Monte Carlo disagrees by {:.2}%", 100.0 * worst))?;
    Ok(format!("KL(q,q) = 0 on 100 draws, KL(N(1,1)||N(0,1)) = {half}, MC(1e5) within {:.2}%", 100.0 * worst))
}

// ---------------------------------------------------------------------------
// 3. structural invariants

fn equivariance_gap(k: usize, perms: &[Vec<usize>]) -> f64 {
    let cfg = ModelConfig { variant: Variant::GraphRnn, num_agents: k, ..ModelConfig::default() };
    let mut p = ModelParams::new(cfg, &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap();
    // biases start at zero; make them generic
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    p.set.iter_mut().flat_map(|t| t.values.iter_mut()).filter(|v| **v == 0.0).for_each(|v| *v = rng.random_range(-0.3..0.3));
    let hdim = cfg.hidden;
    let h: Vec<f64> = (0..k * hdim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pass = |x: Vec<f64>| {
        let mut tape = Tape::new();
        let hv = tape.constant(x, &[k, hdim]).unwrap();
        let out = graph_message_pass(&mut tape, &p, hv).unwrap();
        tape.value(out).to_vec()
    };
    let base = pass(h.clone());
    let width = base.len() / k;
    let mut gap: f64 = 0.0;
    for perm in perms {
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| h[i * hdim..(i + 1) * hdim].to_vec()).collect();
        let out = pass(permuted);
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..width {
                gap = gap.max((out[row * width + c] - base[src * width + c]).abs());
            }
        }
    }
    gap
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn structure(examples: &[Example]) -> Check {
    let gap = equivariance_gap(3, &permutations(3));
    ensure(gap == 0.0, format!("relation network off by {gap:e} under permutation (K = 3)"))?;

    let ex = &examples[0];
    let mut heatmaps = 0;
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, ..ModelConfig::default() };
        let p = ModelParams::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for opts in [RolloutOptions::train(0.5), RolloutOptions::filter(), RolloutOptions::sample()] {
            let b = rollout(&mut Tape::new(), &p, &ex.grids, Some(&ex.targets), opts, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().beliefs;
            for h in b.steps.iter().flat_map(|s| &s.heatmaps) {
                ensure(h.is_normalized(1e-9), format!("{variant} heatmap off by more than 1e-9"))?;
                heatmaps += 1;
            }
        }
    }

    for seed in 0..100 {
        let mask = apply_occlusion_schedule(50, 3, 10, seed).unwrap();
        for window in mask.frames.chunks(10) {
            let hidden: Vec<usize> = (0..3).filter(|&k| !window[0][k]).collect();
            ensure(hidden.len() == 1 && window.iter().all(|f| *f == window[0]), "occlusion window does not hide exactly one agent")?;
        }
    }

    let soccer = SoccerConfig::default();
    let grid = GridSpec::default();
    let half_cell = 0.5 * grid.cell_width().min(grid.cell_height());
    let mut frames = 0;
    let mut keeper_max: f64 = 0.0;
    for seed in 0..100 {
        let ep = simulate_soccer(&soccer, seed).unwrap();
        let ball = ep.ball_index().unwrap();
        let camera = ep.camera.as_ref().ok_or("soccer episode without camera")?;
        for (f, rect) in ep.frames.iter().zip(camera) {
            ensure(rect.contains(f[ball]), format!("episode {seed}: ball outside the camera"))?;
            frames += 1;
        }
        for (k, r) in ep.roles.iter().enumerate() {
            if matches!(r, Role::Goalkeeper { .. }) {
                let o = ep.frames[0][k];
                for f in &ep.frames {
                    keeper_max = keeper_max.max(((f[k][0] - o[0]).powi(2) + (f[k][1] - o[1]).powi(2)).sqrt());
                }
            }
        }
    }
    ensure(keeper_max < half_cell, format!("goalkeeper moved {keeper_max:.4} (half cell {half_cell:.4})"))?;
    Ok(format!(
        "equivariance exact over 6 permutations; {heatmaps} heatmaps normalized; 100 occlusion schedules; ball in camera on {frames} frames; keeper drift {keeper_max:.4} < {half_cell:.4}"
    ))
}

// ---------------------------------------------------------------------------
// 4. loss sanity

fn loss_sanity() -> Check {
    let blank: Vec<ObservationGrid> = (0..6).map(|t| ObservationGrid::zeros(Resolution::default(), t)).collect();
    let targets: Vec<Vec<usize>> = (0..10).map(|t| vec![7 * t, 100 + t, 383 - 2 * t]).collect();
    let mut zero = ModelParams::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    zero.set.fill(0.0);
    let mut tape = Tape::new();
    let trace = rollout(&mut tape, &zero, &blank, Some(&targets), RolloutOptions::train(1.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (_, uniform) = elbo_loss(&mut tape, &trace, &targets, &[1.0; 10], 0.0).unwrap();
    let expected = 10.0 * 3.0 * 384f64.ln();
    ensure((uniform.total - expected).abs() < 1e-9, format!("uniform loss {} vs {expected}", uniform.total))?;

    let p = ModelParams::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let lambdas = lambda_weights(&TrainConfig::default());
    let eval = |beta: f64| {
        let mut tape = Tape::new();
        let trace = rollout(&mut tape, &p, &blank, Some(&targets), RolloutOptions::train(1.0), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        elbo_loss(&mut tape, &trace, &targets, &lambdas, beta).unwrap().1
    };
    let base = eval(0.0);
    ensure(base.kl > 0.0, "no KL at random init")?;
    for beta in [0.1, 0.25, 0.5, 1.0] {
        let l = eval(beta);
        ensure(l.kl == base.kl && l.weighted_kl == beta * base.kl && l.total == base.recon + beta * base.kl, format!("KL not linear at beta {beta}"))?;
    }

    // T = 6 observed steps at weight 1; the 4 forecast weights are
    // 6 * 0.8^d / (0.8 + 0.64 + 0.512 + 0.4096) with the sum written out
    let hand = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 4.8 / 2.3616, 3.84 / 2.3616, 3.072 / 2.3616, 2.4576 / 2.3616];
    let worst = lambdas.iter().zip(hand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(lambdas.len() == 10 && worst < 1e-12, format!("lambda schedule off by {worst:e}"))?;
    Ok(format!("uniform loss {:.9} = 30 ln 384; KL exactly linear in beta; lambda within {worst:.1e}", uniform.total))
}

// ---------------------------------------------------------------------------
// 5. training smoke run

fn smoke(cfg: &RunConfig, examples: &[Example], pool: &ThreadPool) -> Check {
    let mut trainer = Trainer::new(cfg.model_config(3), cfg.train_config(), cfg.pretrain_lr).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    trainer
        .run(examples, pool, |m| {
            losses.push(m.loss);
            if (m.step + 1) % 1000 == 0 {
                eprintln!("    smoke: step {} loss {:.2} ({:.0?})", m.step + 1, m.loss, started.elapsed());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let ma = moving_average(&losses, 100);
    let (early, late) = (ma[99], ma[cfg.steps - 1]);
    ensure(late < 0.5 * early, format!("MA100 {early:.2} at step 100 -> {late:.2} at step {}", cfg.steps))?;
    ensure(secs < 1800.0, format!("{} steps took {secs:.0} s", cfg.steps))?;
    Ok(format!(
        "{} steps in {secs:.0} s on {} thread(s); MA100 {early:.2} at step 100 -> {late:.2} ({:.0}%)",
        cfg.steps,
        pool.current_num_threads(),
        100.0 * late / early
    ))
}

// ---------------------------------------------------------------------------
// 6. qualitative trends under an equal training budget

const TREND_STEPS: usize = 500;

struct Trends {
    hidden: bool,
    shape: bool,
    forecast: bool,
    line: String,
}

fn train_variant(base: &RunConfig, variant: Variant, seed: u64, train: &[Example], pool: &ThreadPool) -> ModelParams {
    let cfg = RunConfig { variant, seed, steps: TREND_STEPS, warmup_steps: TREND_STEPS / 25, ..base.clone() };
    let mut t = Trainer::new(cfg.model_config(3), cfg.train_config(), cfg.pretrain_lr).unwrap();
    t.run(train, pool, |_| Ok(())).unwrap();
    t.params
}

fn trends(base: &RunConfig, seed: u64, train: &[Example], test: &[Example], prior: &VariantReport, pool: &ThreadPool) -> Trends {
    let eval = EvalConfig::default();
    let report = |v| evaluate_parallel(&train_variant(base, v, seed, train, pool), test, &eval, pool).unwrap();
    let visual = report(Variant::VisualOnly);
    let recurrent = [report(Variant::GraphRnn), report(Variant::GraphVrnn)];
    let vrnn = &recurrent[1];

    let hidden = vrnn.hidden_l2().unwrap() < visual.hidden_l2().unwrap();
    let obs = |r: &VariantReport| r.l2()[..r.observed].to_vec();
    let v = obs(&visual);
    let spread = v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let shape = spread < 0.3 * mean && recurrent.iter().all(|r| r.l2()[4] < r.l2()[0]);
    let prior_ll = prior.ll.ratio().unwrap();
    let forecast = recurrent.iter().all(|r| {
        let ll = r.ll.ratio().unwrap();
        ll > 1.0 && ll > prior_ll
    });
    let line = format!(
        "seed {seed}: hidden l2 vrnn {:.3} vs visual {:.3}; visual spread {spread:.3}/{mean:.3}; step1->5 rnn {:.3}->{:.3} vrnn {:.3}->{:.3}; LL rnn {:.2} vrnn {:.2} prior {prior_ll:.2}",
        vrnn.hidden_l2().unwrap(),
        visual.hidden_l2().unwrap(),
        recurrent[0].l2()[0],
        recurrent[0].l2()[4],
        vrnn.l2()[0],
        vrnn.l2()[4],
        recurrent[0].ll.ratio().unwrap(),
        vrnn.ll.ratio().unwrap(),
    );
    Trends { hidden, shape, forecast, line }
}

fn variant_trends(base: &RunConfig, train: &[Example], pool: &ThreadPool) -> Check {
    let test_set = gen_synthetic(&SynthConfig { episodes: 100, ..base.synth_config() }, 99).unwrap();
    let test = build_examples(&test_set, &base.example_config()).unwrap();
    let g = base.grid();
    let prior = prior_baseline(train.iter().flat_map(|e| e.targets.iter().map(|r| &r[..])), 3, g.cells()).unwrap();
    let prior = evaluate_prior(&prior, &test, base.observed, &g).unwrap();
    let runs: Vec<Trends> = (0..3)
        .map(|seed| {
            let t = trends(base, seed, train, &test, &prior, pool);
            eprintln!("    trends {}", t.line);
            t
        })
        .collect();
    let count = |f: fn(&Trends) -> bool| runs.iter().filter(|t| f(t)).count();
    let (a, b, c) = (count(|t| t.hidden), count(|t| t.shape), count(|t| t.forecast));
    let summary = format!("{TREND_STEPS} steps per variant; (a) hidden l2 {a}/3, (b) per-step shape {b}/3, (c) LL-ratio {c}/3 seeds");
    ensure(a >= 2 && b >= 2 && c >= 2, summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 7. determinism and persistence

fn determinism(base: &RunConfig, train: &[Example]) -> Check {
    let cfg = RunConfig { steps: 30, warmup_steps: 5, ..base.clone() };
    let run = |threads: usize| {
        let mut t = Trainer::new(cfg.model_config(3), cfg.train_config(), cfg.pretrain_lr).unwrap();
        let mut curve = Vec::new();
        t.run(train, &thread_pool(threads), |m| {
            curve.push(m.loss.to_bits());
            Ok(())
        })
        .unwrap();
        (curve, t)
    };
    let (a, trainer) = run(1);
    let (b, _) = run(1);
    ensure(a == b, "single-threaded loss curves differ")?;
    let (c, _) = run(4);
    ensure(a == c, "four-threaded loss curve differs")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |n: &str| dir.path().join(n);
    save_checkpoint(&path("a.gvrn"), &trainer.checkpoint(&cfg.to_cfg_string())).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path("a.gvrn")).map_err(|e| e.to_string())?;
    ensure(loaded.params == trainer.params, "checkpoint parameters changed")?;
    save_checkpoint(&path("b.gvrn"), &loaded).map_err(|e| e.to_string())?;
    let (x, y) = (std::fs::read(path("a.gvrn")).unwrap(), std::fs::read(path("b.gvrn")).unwrap());
    ensure(x == y, "checkpoint save-load-save is not byte-identical")?;

    let synth = gen_synthetic(&SynthConfig { episodes: 20, ..SynthConfig::default() }, 5).unwrap();
    let soccer = simulate_soccer(&SoccerConfig::default(), 5).unwrap();
    for (name, episodes) in [("synth.jsonl", synth.episodes.clone()), ("soccer.jsonl", vec![soccer])] {
        save_trajectories(&path(name), &episodes).map_err(|e| e.to_string())?;
        let back = load_trajectories(&path(name), Split::Test, Provenance::Loaded).map_err(|e| e.to_string())?;
        ensure(back.episodes == episodes, format!("{name} does not round-trip"))?;
    }
    let ex = &train[0];
    let mut rng = example_rng(0, 0);
    let samples: Vec<_> = (0..4)
        .map(|_| rollout(&mut Tape::new(), &trainer.params, &ex.grids, None, RolloutOptions::sample(), &mut rng).unwrap().beliefs)
        .collect();
    let truth = beliefnet_core::sim::Episode { roles: ex.roles.clone(), frames: ex.coords.clone(), camera: None, seed: 0 };
    export_samples(&samples, &ex.grids, &truth, &cfg.grid(), &path("export")).map_err(|e| e.to_string())?;
    let back = load_trajectories(&path("export/samples.jsonl"), Split::Test, Provenance::Loaded).map_err(|e| e.to_string())?;
    ensure(back.episodes == sampled_episodes(&samples, &truth, &cfg.grid()), "exported samples do not round-trip")?;
    Ok(format!("{}-step loss curve bit-identical (1, 1 and 4 threads); checkpoint {} bytes byte-identical; JSONL round-trips", a.len(), x.len()))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let pool = thread_pool(thread_count());
    let base = RunConfig::default();
    let set = gen_synthetic(&base.synth_config(), 1).unwrap();
    let train = build_examples(&set, &base.example_config()).unwrap();

    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check + '_>)> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("variational identities", Box::new(kl_identities)),
        ("structural invariants", Box::new(|| structure(&train))),
        ("loss sanity", Box::new(loss_sanity)),
        ("training smoke", Box::new(|| smoke(&base, &train, &pool))),
        ("variant trends", Box::new(|| variant_trends(&base, &train, &pool))),
        ("determinism and persistence", Box::new(|| determinism(&base, &train))),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.0} s) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.0} s) {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
