use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RenderError;
use crate::{Pos, Rect};

/// Per-frame, per-agent visibility (`true` = rendered).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    pub frames: Vec<Vec<bool>>,
}

impl VisibilityMask {
    pub fn all_visible(num_frames: usize, k: usize) -> Self {
        VisibilityMask { frames: vec![vec![true; k]; num_frames] }
    }
}

/// Hides one uniformly chosen agent for each consecutive `period`-frame window.
pub fn apply_occlusion_schedule(num_frames: usize, k: usize, period: usize, seed: u64) -> Result<VisibilityMask, RenderError> {
    if period == 0 || num_frames % period != 0 {
        return Err(RenderError::Period { num_frames, period });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(num_frames);
    for _ in 0..num_frames / period {
        let hidden = rng.random_range(0..k);
        let mut row = vec![true; k];
        row[hidden] = false;
        frames.extend(core::iter::repeat_n(row, period));
    }
    Ok(VisibilityMask { frames })
}

/// Agents inside the closed rectangle stay visible and are mapped to
/// rectangle-local coordinates; agents outside are hidden.
pub fn crop_camera(positions: &[Pos], rect: Rect) -> (Vec<Pos>, Vec<bool>) {
    positions
        .iter()
        .map(|&p| {
            let visible = rect.contains(p);
            let local = if visible { rect.to_local(p) } else { [0.0, 0.0] };
            (local, visible)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hidden_agent_per_window() {
        let m = apply_occlusion_schedule(50, 6, 10, 3).unwrap();
        assert_eq!(m.frames.len(), 50);
        for window in m.frames.chunks(10) {
            assert!(window.iter().all(|r| r == &window[0]));
            assert_eq!(window[0].iter().filter(|v| !**v).count(), 1);
        }
    }

    #[test]
    fn forced_choice_and_determinism() {
        let m = apply_occlusion_schedule(30, 1, 10, 9).unwrap();
        assert!(m.frames.iter().all(|r| r == &[false]));
        assert_eq!(apply_occlusion_schedule(40, 4, 10, 5).unwrap(), apply_occlusion_schedule(40, 4, 10, 5).unwrap());
        assert!(matches!(apply_occlusion_schedule(45, 4, 10, 5), Err(RenderError::Period { .. })));
    }

    #[test]
    fn crop_examples() {
        let pts = [[0.1, 0.2], [0.9, 0.95]];
        let (local, vis) = crop_camera(&pts, Rect::UNIT);
        assert_eq!(local, pts.to_vec());
        assert_eq!(vis, vec![true, true]);
        let rect = Rect { x0: 0.2, y0: 0.2, x1: 0.6, y1: 0.6 };
        let (local, vis) = crop_camera(&[[0.6, 0.2], [0.61, 0.3], [0.4, 0.4]], rect);
        assert_eq!(vis, vec![true, false, true]);
        assert!((local[2][0] - 0.5).abs() < 1e-12 && (local[0][0] - 1.0).abs() < 1e-12);
    }
}
