use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Episode, Provenance, Role, SimError, Split, TrajectorySet};
use crate::Pos;

/// Interacting-agents generator settings. The last agent is the ball.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_agents: usize,
    pub episodes: usize,
    pub frames: usize,
    /// Scales both player repulsion and the ball's pull toward its carrier.
    pub interaction: f64,
    pub repulsion: bool,
    /// Standard deviation of the random acceleration applied to players.
    pub drive: f64,
    pub damping: f64,
    pub init_speed: f64,
    pub max_speed: f64,
    /// Per-frame probability that the ball switches carrier.
    pub switch_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_agents: 3,
            episodes: 100,
            frames: 50,
            interaction: 1.0,
            repulsion: true,
            drive: 0.0015,
            damping: 0.02,
            init_speed: 0.012,
            max_speed: 0.03,
            switch_prob: 0.02,
        }
    }
}

const REPULSION_GAIN: f64 = 0.004;
const REPULSION_RANGE: f64 = 0.2;
const BALL_PULL: f64 = 0.08;
const BALL_DAMPING: f64 = 0.35;

/// Reflects a coordinate into `[0, 1]`, flipping the matching velocity component.
pub fn reflect(p: &mut Pos, v: &mut Pos) {
    for d in 0..2 {
        if p[d] < 0.0 {
            p[d] = -p[d];
            v[d] = -v[d];
        } else if p[d] > 1.0 {
            p[d] = 2.0 - p[d];
            v[d] = -v[d];
        }
        p[d] = p[d].clamp(0.0, 1.0);
    }
}

fn cap(v: &mut Pos, max: f64) {
    let s = libm::hypot(v[0], v[1]);
    if s > max {
        v[0] *= max / s;
        v[1] *= max / s;
    }
}

fn roles(k: usize) -> Vec<Role> {
    let mut r: Vec<Role> = (0..k - 1).map(|i| Role::Player { team: 0, index: i as u8 }).collect();
    r.push(Role::Ball);
    r
}

/// One episode of damped second-order dynamics with pairwise repulsion,
/// wall reflection, and a ball that chases a randomly switching carrier.
pub fn synthetic_episode(cfg: &SynthConfig, seed: u64) -> Result<Episode, SimError> {
    let k = cfg.num_agents;
    if k < 2 {
        return Err(SimError::TooFewAgents { min: 2, got: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let players = k - 1;
    let mut pos: Vec<Pos> = (0..k).map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]).collect();
    let mut vel: Vec<Pos> = (0..k)
        .map(|_| {
            let a = rng.random_range(0.0..core::f64::consts::TAU);
            [cfg.init_speed * libm::cos(a), cfg.init_speed * libm::sin(a)]
        })
        .collect();
    vel[players] = [0.0, 0.0];
    let mut carrier = rng.random_range(0..players);
    let mut frames = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        frames.push(pos.clone());
        if rng.random::<f64>() < cfg.switch_prob {
            carrier = rng.random_range(0..players);
        }
        let mut acc = vec![[0.0; 2]; k];
        for i in 0..players {
            for d in 0..2 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                acc[i][d] = -cfg.damping * vel[i][d] + cfg.drive * noise;
            }
            if cfg.repulsion {
                for j in 0..players {
                    if i == j {
                        continue;
                    }
                    let d = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]];
                    let r = libm::hypot(d[0], d[1]).max(1e-6);
                    if r < REPULSION_RANGE {
                        let f = cfg.interaction * REPULSION_GAIN * (1.0 - r / REPULSION_RANGE) / r;
                        acc[i][0] += f * d[0];
                        acc[i][1] += f * d[1];
                    }
                }
            }
        }
        let target = pos[carrier];
        for d in 0..2 {
            acc[players][d] = cfg.interaction * (BALL_PULL * (target[d] - pos[players][d]) - BALL_DAMPING * vel[players][d]);
        }
        for i in 0..k {
            vel[i][0] += acc[i][0];
            vel[i][1] += acc[i][1];
            cap(&mut vel[i], cfg.max_speed);
            pos[i][0] += vel[i][0];
            pos[i][1] += vel[i][1];
            reflect(&mut pos[i], &mut vel[i]);
        }
    }
    Ok(Episode { roles: roles(k), frames, camera: None, seed })
}

/// A set of synthetic episodes; episode seeds are drawn from `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<TrajectorySet, SimError> {
    if cfg.num_agents < 2 {
        return Err(SimError::TooFewAgents { min: 2, got: cfg.num_agents });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes = (0..cfg.episodes)
        .map(|_| synthetic_episode(cfg, rng.next_u64()))
        .collect::<Result<Vec<_>, _>>()?;
    TrajectorySet::new(episodes, Split::Train, Provenance::Synthetic)
}
