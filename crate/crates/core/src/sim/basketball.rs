use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Episode, Role, SimError};
use crate::render::in_unit;
use crate::Pos;

/// Raw frames per basketball example.
pub const BASKETBALL_FRAMES: usize = 50;

/// How raw court coordinates map onto the unit field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CourtExtent {
    pub width: f64,
    pub height: f64,
}

impl Default for CourtExtent {
    fn default() -> Self {
        CourtExtent { width: 1.0, height: 1.0 }
    }
}

/// Keeps the offense (team 0) and the ball, rescales to the unit field and
/// cuts a seeded 50-frame window out of longer sources.
pub fn basketball_episode(
    roles: &[Role],
    frames: &[Vec<Pos>],
    extent: CourtExtent,
    seed: u64,
    episode_index: usize,
) -> Result<Episode, SimError> {
    if frames.len() < BASKETBALL_FRAMES {
        return Err(SimError::TooShort { episode: episode_index, frames: frames.len(), needed: BASKETBALL_FRAMES });
    }
    let keep: Vec<usize> = (0..roles.len())
        .filter(|&i| matches!(roles[i], Role::Ball | Role::Player { team: 0, .. } | Role::Goalkeeper { team: 0 }))
        .collect();
    let start = if frames.len() > BASKETBALL_FRAMES {
        ChaCha8Rng::seed_from_u64(seed).random_range(0..=frames.len() - BASKETBALL_FRAMES)
    } else {
        0
    };
    let mut out = Vec::with_capacity(BASKETBALL_FRAMES);
    for (f, frame) in frames[start..start + BASKETBALL_FRAMES].iter().enumerate() {
        if frame.len() != roles.len() {
            return Err(SimError::AgentCount { frame: start + f, expected: roles.len(), got: frame.len() });
        }
        let mut row = Vec::with_capacity(keep.len());
        for &i in &keep {
            let p = [frame[i][0] / extent.width, frame[i][1] / extent.height];
            if !in_unit(p) {
                return Err(SimError::OutOfRange { episode: episode_index as u64, frame: start + f, agent: i, pos: p });
            }
            row.push(p);
        }
        out.push(row);
    }
    Ok(Episode { roles: keep.iter().map(|&i| roles[i]).collect(), frames: out, camera: None, seed })
}
