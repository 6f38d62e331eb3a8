//! Slicing episodes into fixed-length examples: per-step averaged frames,
//! target cells, true coordinates and visibility.

use alloc::vec::Vec;

use thiserror::Error;

use crate::render::{
    apply_occlusion_schedule, crop_camera, render_frame, GridSpec, ObservationGrid, Palette, RenderError, Resolution,
    VisibilityMask,
};
use crate::sim::{Episode, Role};
use crate::Pos;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("episode has {frames} frames, an example needs {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("camera mode needs an episode with a camera track")]
    NoCamera,
}

/// How frames are hidden from the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationMode {
    /// One random agent removed per `period` frames.
    Occlusion { period: usize },
    /// Only what lies inside the episode's camera rectangle.
    Camera,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleConfig {
    pub observed: usize,
    pub horizon: usize,
    pub frames_per_step: usize,
    pub grid: GridSpec,
    pub resolution: Resolution,
    pub mode: ObservationMode,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        ExampleConfig {
            observed: 6,
            horizon: 4,
            frames_per_step: 5,
            grid: GridSpec::default(),
            resolution: Resolution::default(),
            mode: ObservationMode::Occlusion { period: 10 },
        }
    }
}

impl ExampleConfig {
    pub fn steps(&self) -> usize {
        self.observed + self.horizon
    }

    pub fn frames_per_example(&self) -> usize {
        self.steps() * self.frames_per_step
    }
}

/// One training/evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Averaged frames of the observed steps.
    pub grids: Vec<ObservationGrid>,
    /// `targets[t][k]`: cell of agent `k` at the last frame of step `t`, for every step.
    pub targets: Vec<Vec<usize>>,
    pub coords: Vec<Vec<Pos>>,
    /// Whether the agent was drawn at the last frame of the step.
    pub visible: Vec<Vec<bool>>,
    pub roles: Vec<Role>,
}

impl Example {
    pub fn k(&self) -> usize {
        self.roles.len()
    }

    pub fn steps(&self) -> usize {
        self.targets.len()
    }
}

fn mask_for(ep: &Episode, start: usize, cfg: &ExampleConfig, seed: u64) -> Result<VisibilityMask, DataError> {
    let n = cfg.frames_per_example();
    match cfg.mode {
        ObservationMode::Occlusion { period } => Ok(apply_occlusion_schedule(n, ep.k(), period, seed)?),
        ObservationMode::Full => Ok(VisibilityMask::all_visible(n, ep.k())),
        ObservationMode::Camera => {
            let cam = ep.camera.as_ref().ok_or(DataError::NoCamera)?;
            let frames = (start..start + n).map(|f| crop_camera(&ep.frames[f], cam[f]).1).collect();
            Ok(VisibilityMask { frames })
        }
    }
}

/// Builds the example whose first frame is `start`; `seed` drives the occlusion schedule.
pub fn build_example(ep: &Episode, start: usize, cfg: &ExampleConfig, seed: u64) -> Result<Example, DataError> {
    let needed = start + cfg.frames_per_example();
    if ep.num_frames() < needed {
        return Err(DataError::TooShort { frames: ep.num_frames(), needed });
    }
    let palette = Palette::for_roles(&ep.roles);
    let mask = mask_for(ep, start, cfg, seed)?;
    let fps = cfg.frames_per_step;
    let mut grids = Vec::with_capacity(cfg.observed);
    let mut targets = Vec::with_capacity(cfg.steps());
    let mut coords = Vec::with_capacity(cfg.steps());
    let mut visible = Vec::with_capacity(cfg.steps());
    for t in 0..cfg.steps() {
        if t < cfg.observed {
            let frames: Vec<ObservationGrid> = (0..fps)
                .map(|i| {
                    let f = start + t * fps + i;
                    let vis = &mask.frames[t * fps + i];
                    match (cfg.mode, &ep.camera) {
                        (ObservationMode::Camera, Some(cam)) => {
                            let (local, _) = crop_camera(&ep.frames[f], cam[f]);
                            render_frame(&local, vis, &palette, cfg.resolution)
                        }
                        _ => render_frame(&ep.frames[f], vis, &palette, cfg.resolution),
                    }
                })
                .collect();
            grids.push(ObservationGrid::average(&frames, t));
        }
        let last = start + (t + 1) * fps - 1;
        let pos = &ep.frames[last];
        targets.push(pos.iter().map(|&p| cfg.grid.discretize(p)).collect::<Result<Vec<_>, _>>()?);
        coords.push(pos.clone());
        visible.push(mask.frames[(t + 1) * fps - 1].clone());
    }
    Ok(Example { grids, targets, coords, visible, roles: ep.roles.clone() })
}

/// Every non-overlapping example window of an episode.
pub fn episode_examples(ep: &Episode, cfg: &ExampleConfig) -> Result<Vec<Example>, DataError> {
    let len = cfg.frames_per_example();
    let windows = ep.num_frames() / len;
    if windows == 0 {
        return Err(DataError::TooShort { frames: ep.num_frames(), needed: len });
    }
    (0..windows)
        .map(|w| build_example(ep, w * len, cfg, ep.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(w as u64)))
        .collect()
}
