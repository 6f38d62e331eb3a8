use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::SimError;
use crate::render::in_unit;
use crate::{Pos, Rect};

/// What an agent is on the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Player { team: u8, index: u8 },
    Goalkeeper { team: u8 },
    Ball,
}

impl Role {
    pub fn is_ball(&self) -> bool {
        matches!(self, Role::Ball)
    }

    pub fn team(&self) -> Option<u8> {
        match self {
            Role::Player { team, .. } | Role::Goalkeeper { team } => Some(*team),
            Role::Ball => None,
        }
    }
}

/// Wire encoding: `player:<team>:<index>`, `goalkeeper:<team>`, `ball`.
impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Player { team, index } => write!(f, "player:{team}:{index}"),
            Role::Goalkeeper { team } => write!(f, "goalkeeper:{team}"),
            Role::Ball => f.write_str("ball"),
        }
    }
}

impl FromStr for Role {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SimError::BadRole(s.to_string());
        let mut parts = s.split(':');
        let role = match (parts.next(), parts.next(), parts.next()) {
            (Some("ball"), None, None) => Role::Ball,
            (Some("goalkeeper"), Some(t), None) => Role::Goalkeeper { team: t.parse().map_err(|_| bad())? },
            (Some("player"), Some(t), Some(i)) => {
                Role::Player { team: t.parse().map_err(|_| bad())?, index: i.parse().map_err(|_| bad())? }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(role)
    }
}

/// Ground-truth positions of `k` agents over time.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub roles: Vec<Role>,
    /// `frames[f][k]`
    pub frames: Vec<Vec<Pos>>,
    pub camera: Option<Vec<Rect>>,
    pub seed: u64,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.roles.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn ball_index(&self) -> Option<usize> {
        self.roles.iter().position(Role::is_ball)
    }

    /// Checks positions, camera containment and (when given) step divisibility.
    pub fn validate(&self, frames_per_step: Option<usize>) -> Result<(), SimError> {
        let k = self.k();
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.len() != k {
                return Err(SimError::AgentCount { frame: f, expected: k, got: frame.len() });
            }
            if let Some(a) = frame.iter().position(|&p| !in_unit(p)) {
                return Err(SimError::OutOfRange { episode: self.seed, frame: f, agent: a, pos: frame[a] });
            }
        }
        if let Some(cam) = &self.camera {
            if cam.len() != self.frames.len() {
                return Err(SimError::Camera(format!("{} rectangles for {} frames", cam.len(), self.frames.len())));
            }
            let ball = self.ball_index();
            for (f, r) in cam.iter().enumerate() {
                if !r.inside_unit() {
                    return Err(SimError::Camera(format!("frame {f}: rectangle leaves the field")));
                }
                if let Some(b) = ball {
                    if !r.contains(self.frames[f][b]) {
                        return Err(SimError::Camera(format!("frame {f}: ball outside camera")));
                    }
                }
            }
        }
        if let Some(fps) = frames_per_step {
            if fps == 0 || self.frames.len() % fps != 0 {
                return Err(SimError::StepGrouping { frames: self.frames.len(), frames_per_step: fps });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Loaded,
    Synthetic,
    Simulated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub episodes: Vec<Episode>,
    pub split: Split,
    pub provenance: Provenance,
}

impl TrajectorySet {
    pub fn new(episodes: Vec<Episode>, split: Split, provenance: Provenance) -> Result<Self, SimError> {
        if let Some(first) = episodes.first() {
            for e in &episodes {
                if e.k() != first.k() || e.num_frames() != first.num_frames() {
                    return Err(SimError::NonUniform);
                }
            }
        }
        Ok(TrajectorySet { episodes, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn k(&self) -> Option<usize> {
        self.episodes.first().map(Episode::k)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_round_trip() {
        for r in [Role::Ball, Role::Goalkeeper { team: 1 }, Role::Player { team: 0, index: 4 }] {
            assert_eq!(r.to_string().parse::<Role>().unwrap(), r);
        }
        assert!("keeper:1".parse::<Role>().is_err());
        assert!("player:0".parse::<Role>().is_err());
        assert!("ball:1".parse::<Role>().is_err());
    }

    #[test]
    fn validation_catches_out_of_range() {
        let e = Episode { roles: alloc::vec![Role::Ball], frames: alloc::vec![alloc::vec![[0.5, 1.2]]], camera: None, seed: 4 };
        assert!(matches!(e.validate(None), Err(SimError::OutOfRange { frame: 0, agent: 0, .. })));
    }
}
