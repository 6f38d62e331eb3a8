//! Allocation-only core of the multi-agent belief tracker: a reverse-mode
//! autodiff engine, trajectory simulators, the rasterizer and state codec,
//! the graph-structured variational RNN with its ablations, the training
//! objective and schedules, and the evaluation metrics.
//!
//! Nothing here touches the filesystem or threads; the `beliefnet` crate adds
//! file formats, parallel drivers and the command-line tool.
#![no_std]

extern crate alloc;
// Only used for runtime CPU feature detection.
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod eval;
mod geom;
pub mod model;
pub mod render;
pub mod sim;
pub mod train;

pub use geom::{Pos, Rect};
