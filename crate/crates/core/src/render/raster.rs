use alloc::vec;
use alloc::vec::Vec;

use crate::sim::Role;
use crate::Pos;

/// Raster size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { width: 48, height: 32 }
    }
}

/// Disc radius in pixels.
pub const AGENT_RADIUS: f64 = 2.0;

/// A `3 x height x width` image (channel-major) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationGrid {
    pub width: usize,
    pub height: usize,
    pub step: usize,
    pub data: Vec<f64>,
}

impl ObservationGrid {
    pub const CHANNELS: usize = 3;

    pub fn zeros(res: Resolution, step: usize) -> Self {
        ObservationGrid { width: res.width, height: res.height, step, data: vec![0.0; 3 * res.width * res.height] }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution { width: self.width, height: self.height }
    }

    pub fn pixel(&self, channel: usize, x: usize, y: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Pixel-wise mean of several frames.
    pub fn average(frames: &[ObservationGrid], step: usize) -> Self {
        let mut out = ObservationGrid { step, ..frames[0].clone() };
        let n = frames.len() as f64;
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = frames.iter().map(|f| f.data[i]).sum::<f64>() / n;
        }
        out
    }
}

/// RGB color per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub colors: Vec<[f64; 3]>,
    /// Paint order: players first, ball last.
    pub order: Vec<usize>,
}

pub const BALL_COLOR: [f64; 3] = [1.0, 1.0, 0.0];

fn hsv_to_rgb(hue_deg: f64) -> [f64; 3] {
    let h = (hue_deg % 360.0 + 360.0) % 360.0 / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

impl Palette {
    /// Evenly spaced full-saturation hues for the non-ball agents, kept clear
    /// of the yellow band reserved for the ball.
    pub fn for_roles(roles: &[Role]) -> Self {
        let players: Vec<usize> = (0..roles.len()).filter(|&i| !roles[i].is_ball()).collect();
        let mut colors = vec![BALL_COLOR; roles.len()];
        let span = 280.0;
        for (j, &i) in players.iter().enumerate() {
            colors[i] = hsv_to_rgb(100.0 + span * j as f64 / players.len() as f64);
        }
        let mut order = players;
        order.extend((0..roles.len()).filter(|&i| roles[i].is_ball()));
        Palette { colors, order }
    }
}

/// Draws every visible agent as a filled disc; later agents in the palette's
/// order paint over earlier ones.
pub fn render_frame(positions: &[Pos], visible: &[bool], palette: &Palette, res: Resolution) -> ObservationGrid {
    let mut grid = ObservationGrid::zeros(res, 0);
    let (w, h) = (res.width, res.height);
    let r2 = AGENT_RADIUS * AGENT_RADIUS;
    for &k in &palette.order {
        if !visible[k] {
            continue;
        }
        let cx = positions[k][0] * w as f64;
        let cy = positions[k][1] * h as f64;
        let x_lo = libm::floor(cx - AGENT_RADIUS).max(0.0) as usize;
        let x_hi = (libm::ceil(cx + AGENT_RADIUS) as usize).min(w);
        let y_lo = libm::floor(cy - AGENT_RADIUS).max(0.0) as usize;
        let y_hi = (libm::ceil(cy + AGENT_RADIUS) as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r2 {
                    for c in 0..3 {
                        grid.data[(c * h + y) * w + x] = palette.colors[k][c];
                    }
                }
            }
        }
    }
    grid
}
