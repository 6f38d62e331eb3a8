use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beliefnet::config::RunConfig;
use beliefnet::driver::{build_examples, run_benchmark, thread_count, thread_pool, MetricsWriter, Trainer};
use beliefnet::export::{export_samples, frame_ppm, heatmap_pgm};
use beliefnet::trajectories::{load_basketball, load_trajectories, save_trajectories};
use beliefnet::{load_checkpoint, parse_config, save_checkpoint, Error};
use beliefnet_core::autodiff::Tape;
use beliefnet_core::data::build_example;
use beliefnet_core::eval::example_rng;
use beliefnet_core::model::{rollout, RolloutOptions, Variant};
use beliefnet_core::sim::{gen_synthetic, simulate_soccer, Episode, Provenance, Split, TrajectorySet};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

/// Multi-agent belief tracking and forecasting from partially observed frames.
#[derive(Parser, Debug)]
#[command(name = "beliefnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lr=0.02` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Trajectory JSONL.
    #[arg(long)]
    data: PathBuf,
    /// Raw basketball-format input (rescaled, defense dropped).
    #[arg(long)]
    basketball: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Synthetic,
    Soccer,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a trajectory dataset.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate one soccer episode.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model variant.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        variant: Option<Variant>,
        /// Run directory for the checkpoint, metrics and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate checkpoints on a test set.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// `VARIANT=PATH` (repeatable).
        #[arg(long = "checkpoint", value_name = "VARIANT=PATH", required = true)]
        checkpoints: Vec<String>,
        /// Training data for the marginal prior baseline.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample forecasts for one episode and export them.
    Forecast {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export rendered frames and, with a checkpoint, filtered heatmaps.
    Export {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig, Error> {
    let mut cfg = parse_config(common.config.as_deref())?;
    cfg.apply_overrides(&common.overrides)?;
    cfg.apply_overrides(extra)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    write_text(&dir.join("resolved.cfg"), &cfg.to_cfg_string())
}

fn load_data(args: &DataArgs, cfg: &RunConfig, split: Split) -> Result<TrajectorySet, Error> {
    if args.basketball {
        load_basketball(&args.data, cfg.court(), split)
    } else {
        load_trajectories(&args.data, split, Provenance::Loaded)
    }
}

fn pick_episode(set: &TrajectorySet, index: usize) -> Result<&Episode, Error> {
    set.episodes.get(index).ok_or_else(|| Error::Usage(format!("episode {index} out of range ({} episodes)", set.len())))
}

fn run(cli: Cli) -> Result<(), Error> {
    let pool = thread_pool(thread_count());
    match cli.command {
        Command::GenData { kind, episodes, out, common } => {
            let extra: Vec<String> = episodes.map(|n| format!("episodes={n}")).into_iter().collect();
            let cfg = resolve(&common, &extra)?;
            let set = match kind {
                Kind::Synthetic => gen_synthetic(&cfg.synth_config(), cfg.seed)?.episodes,
                Kind::Soccer => {
                    let soccer = cfg.soccer_config();
                    pool.install(|| {
                        (0..cfg.episodes as u64)
                            .into_par_iter()
                            .map(|i| simulate_soccer(&soccer, cfg.seed.wrapping_add(i)))
                            .collect::<Result<Vec<_>, _>>()
                    })?
                }
            };
            save_trajectories(&out, &set)?;
            eprintln!("wrote {} episodes to {}", set.len(), out.display());
        }
        Command::Simulate { out, common } => {
            let cfg = resolve(&common, &[])?;
            let ep = simulate_soccer(&cfg.soccer_config(), cfg.seed)?;
            save_trajectories(&out, [&ep])?;
            eprintln!("wrote {} frames of {} agents to {}", ep.num_frames(), ep.k(), out.display());
        }
        Command::Train { data, variant, out, resume, common } => {
            let extra: Vec<String> = variant.map(|v| format!("variant={v}")).into_iter().collect();
            let cfg = resolve(&common, &extra)?;
            let set = load_data(&data, &cfg, Split::Train)?;
            let k = set.k().ok_or_else(|| Error::Usage(format!("{} holds no episodes", data.data.display())))?;
            let examples = build_examples(&set, &cfg.example_config())?;
            create_dir(&out)?;
            write_resolved(&out, &cfg)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    if ckpt.params.config != cfg.model_config(k) {
                        return Err(Error::Usage(format!("{} was trained with a different model configuration", path.display())));
                    }
                    Trainer::from_checkpoint(ckpt, cfg.train_config(), cfg.pretrain_lr)
                }
                None => Trainer::new(cfg.model_config(k), cfg.train_config(), cfg.pretrain_lr)?,
            };
            eprintln!("{}: {} parameters, {} examples, {} threads", cfg.variant, trainer.params.num_values(), examples.len(), pool.current_num_threads());
            let mut metrics = MetricsWriter::create(&out.join("metrics.csv"))?;
            let started = std::time::Instant::now();
            trainer.run(&examples, &pool, |m| {
                metrics.write(m)?;
                if cfg.log_every > 0 && (m.step + 1) % cfg.log_every == 0 {
                    eprintln!(
                        "step {:>6} loss {:>9.3} recon {:>9.3} kl {:>7.3} lr {:.5} ({:.0?})",
                        m.step + 1,
                        m.loss,
                        m.recon,
                        m.kl,
                        m.lr,
                        started.elapsed()
                    );
                }
                Ok(())
            })?;
            metrics.flush()?;
            save_checkpoint(&out.join("checkpoint.gvrn"), &trainer.checkpoint(&cfg.to_cfg_string()))?;
            eprintln!("saved {}", out.join("checkpoint.gvrn").display());
        }
        Command::Eval { data, checkpoints, train_data, out, common } => {
            let cfg = resolve(&common, &[])?;
            let mut list = Vec::new();
            for c in &checkpoints {
                let (v, p) = c.split_once('=').ok_or_else(|| Error::Usage(format!("expected VARIANT=PATH, got `{c}`")))?;
                let variant: Variant = v.parse()?;
                list.push((variant, PathBuf::from(p)));
            }
            let ex_cfg = cfg.example_config();
            let test = build_examples(&load_data(&data, &cfg, Split::Test)?, &ex_cfg)?;
            let train = match &train_data {
                Some(p) => {
                    let args = DataArgs { data: p.clone(), basketball: data.basketball };
                    Some(build_examples(&load_data(&args, &cfg, Split::Train)?, &ex_cfg)?)
                }
                None => None,
            };
            let report = run_benchmark(&list, &test, train.as_deref(), &cfg.eval_config(), &pool)?;
            create_dir(&out)?;
            write_resolved(&out, &cfg)?;
            write_text(&out.join("report.csv"), &report.to_csv())?;
            let table = report.to_table();
            write_text(&out.join("report.txt"), &table)?;
            print!("{table}");
        }
        Command::Forecast { data, checkpoint, episode, samples, out, common } => {
            let cfg = resolve(&common, &[])?;
            let set = load_data(&data, &cfg, Split::Test)?;
            let ep = pick_episode(&set, episode)?;
            let params = load_checkpoint(&checkpoint)?.params;
            let ex = build_example(ep, 0, &cfg.example_config(), ep.seed)?;
            let mut rng = example_rng(cfg.eval_seed, episode);
            let mut beliefs = Vec::with_capacity(samples);
            for _ in 0..samples.max(1) {
                let mut tape = Tape::new();
                beliefs.push(rollout(&mut tape, &params, &ex.grids, None, RolloutOptions::sample(), &mut rng)?.beliefs);
            }
            let truth = Episode { frames: ex.coords.clone(), camera: None, ..ep.clone() };
            let written = export_samples(&beliefs, &ex.grids, &truth, &params.config.grid, &out)?;
            write_resolved(&out, &cfg)?;
            eprintln!("wrote {} files to {}", written.len(), out.display());
        }
        Command::Export { data, checkpoint, episode, out, common } => {
            let cfg = resolve(&common, &[])?;
            let set = load_data(&data, &cfg, Split::Test)?;
            let ep = pick_episode(&set, episode)?;
            let ex = build_example(ep, 0, &cfg.example_config(), ep.seed)?;
            create_dir(&out)?;
            for (t, g) in ex.grids.iter().enumerate() {
                write_text(&out.join(format!("frame_t{:02}.ppm", t + 1)), &frame_ppm(g))?;
            }
            if let Some(path) = checkpoint {
                let params = load_checkpoint(&path)?.params;
                let mut tape = Tape::new();
                let b = rollout(&mut tape, &params, &ex.grids, None, RolloutOptions::filter(), &mut example_rng(cfg.eval_seed, episode))?
                    .beliefs;
                for (t, step) in b.steps.iter().enumerate() {
                    for (k, h) in step.heatmaps.iter().enumerate() {
                        write_text(&out.join(format!("heat_t{:02}_a{:02}.pgm", t + 1, k)), &heatmap_pgm(h, &params.config.grid))?;
                    }
                }
            }
            let truth = Episode { frames: ex.coords.clone(), camera: None, ..ep.clone() };
            save_trajectories(&out.join("truth.jsonl"), [&truth])?;
            write_resolved(&out, &cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
