//! Rasterization of agent positions into partially observed frames, and the
//! discrete state codec between field coordinates and grid cells.

mod codec;
mod raster;
mod visibility;

pub use codec::{BeliefHeatmap, GridSpec};
pub use raster::{render_frame, ObservationGrid, Palette, Resolution, AGENT_RADIUS, BALL_COLOR};
pub use visibility::{apply_occlusion_schedule, crop_camera, VisibilityMask};

pub(crate) use codec::in_unit;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error("position ({x}, {y}) lies outside the unit field")]
    OutOfField { x: f64, y: f64 },
    #[error("occlusion period {period} does not divide {num_frames} frames")]
    Period { num_frames: usize, period: usize },
}
