//! Plain-text image export and sampled-trajectory dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use beliefnet_core::model::BeliefSequence;
use beliefnet_core::render::{BeliefHeatmap, GridSpec, ObservationGrid};
use beliefnet_core::sim::Episode;

use crate::trajectories::save_trajectories;
use crate::Error;

/// P2 image of a heatmap, one pixel per cell, the largest cell at 255.
pub fn heatmap_pgm(heat: &BeliefHeatmap, grid: &GridSpec) -> String {
    let max = heat.0.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut s = format!("P2\n{} {}\n255\n", grid.cols, grid.rows);
    for row in heat.0.chunks(grid.cols) {
        let line: Vec<String> = row.iter().map(|&p| ((p * scale).round() as u8).to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// P3 image of an observation frame.
pub fn frame_ppm(frame: &ObservationGrid) -> String {
    let mut s = format!("P3\n{} {}\n255\n", frame.width, frame.height);
    for y in 0..frame.height {
        let line: Vec<String> = (0..frame.width)
            .flat_map(|x| (0..3).map(move |c| (x, c)))
            .map(|(x, c)| ((frame.pixel(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, Error> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Per-sample trajectories: the state each sampled rollout fed back,
/// placed at its cell center, one position per step.
pub fn sampled_episodes(samples: &[BeliefSequence], truth: &Episode, grid: &GridSpec) -> Vec<Episode> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| Episode {
            roles: truth.roles.clone(),
            frames: s.steps.iter().map(|st| st.states.iter().map(|&c| grid.cell_center(c)).collect()).collect(),
            camera: None,
            seed: i as u64,
        })
        .collect()
}

/// Mean heatmap of agent `k` at step `t` over the samples.
pub fn mean_heatmap(samples: &[BeliefSequence], t: usize, k: usize) -> BeliefHeatmap {
    let mut acc = vec![0.0; samples[0].heatmap(t, k).0.len()];
    for s in samples {
        acc.iter_mut().zip(&s.heatmap(t, k).0).for_each(|(a, &p)| *a += p);
    }
    acc.iter_mut().for_each(|a| *a /= samples.len() as f64);
    BeliefHeatmap(acc)
}

/// Writes `heat_tTT_aKK.pgm` for every step and agent (averaged over the
/// samples), the observed frames as `frame_tTT.ppm`, the sampled
/// trajectories as `samples.jsonl` and the ground truth as `truth.jsonl`.
/// Returns the written paths in order.
pub fn export_samples(
    samples: &[BeliefSequence],
    frames: &[ObservationGrid],
    truth: &Episode,
    grid: &GridSpec,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, Error> {
    if samples.is_empty() {
        return Err(Error::Usage("no samples to export".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for t in 0..samples[0].steps.len() {
        for k in 0..truth.k() {
            let name = format!("heat_t{:02}_a{:02}.pgm", t + 1, k);
            written.push(write(out_dir.join(name), &heatmap_pgm(&mean_heatmap(samples, t, k), grid))?);
        }
    }
    for (t, f) in frames.iter().enumerate() {
        written.push(write(out_dir.join(format!("frame_t{:02}.ppm", t + 1)), &frame_ppm(f))?);
    }
    let path = out_dir.join("samples.jsonl");
    save_trajectories(&path, &sampled_episodes(samples, truth, grid))?;
    written.push(path);
    let path = out_dir.join("truth.jsonl");
    save_trajectories(&path, [truth])?;
    written.push(path);
    Ok(written)
}
