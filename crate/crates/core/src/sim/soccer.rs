//! Two-team 2D soccer with a probabilistic decision tree per player and a
//! camera that follows the ball.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Episode, Role, SimError};
use crate::geom::dist;
use crate::{Pos, Rect};

#[derive(Clone, Debug, PartialEq)]
pub struct SoccerConfig {
    /// Players per team, goalkeeper included.
    pub team_size: usize,
    pub duration_secs: f64,
    pub ticks_per_sec: usize,
    pub window: [f64; 2],
    pub player_speed: f64,
    pub kick_prob: f64,
    pub idle_prob: f64,
    pub kick_power: (f64, f64),
    pub ball_friction: f64,
    pub contact_radius: f64,
    pub keeper_jitter: f64,
    pub support_weight: f64,
}

impl Default for SoccerConfig {
    fn default() -> Self {
        SoccerConfig {
            team_size: 5,
            duration_secs: 300.0,
            ticks_per_sec: 4,
            window: [0.5, 0.5],
            player_speed: 0.02,
            kick_prob: 0.3,
            idle_prob: 0.1,
            kick_power: (0.04, 0.08),
            ball_friction: 0.8,
            contact_radius: 0.02,
            keeper_jitter: 0.005,
            support_weight: 0.3,
        }
    }
}

impl SoccerConfig {
    pub fn num_agents(&self) -> usize {
        2 * self.team_size + 1
    }

    pub fn num_ticks(&self) -> usize {
        libm::round(self.duration_secs * self.ticks_per_sec as f64) as usize
    }
}

const COOLDOWN_TICKS: u32 = 4;
const GOAL_MOUTH: (f64, f64) = (0.4, 0.6);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    MoveToward(Pos),
    KickToward { target: Pos, power: f64 },
    /// Goalkeepers hold their post with a small jitter.
    IdleJitter,
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub index: usize,
    pub role: Role,
    pub pos: Pos,
    pub home: Pos,
}

/// Snapshot the tree reads from.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub roles: Vec<Role>,
    pub positions: Vec<Pos>,
    pub ball: Pos,
    pub carrier: Option<usize>,
}

fn opponent_goal(team: u8) -> Pos {
    if team == 0 {
        [1.0, 0.5]
    } else {
        [0.0, 0.5]
    }
}

impl WorldState {
    /// Field player of `team` closest to the ball; ties go to the lower index.
    pub fn nearest_to_ball(&self, team: u8) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.roles.iter().enumerate() {
            if matches!(r, Role::Player { team: t, .. } if *t == team) {
                let d = dist(self.positions[i], self.ball);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

/// One decision of the fixed probabilistic tree.
pub fn decision_tree_step<R: Rng + ?Sized>(agent: &AgentState, world: &WorldState, cfg: &SoccerConfig, rng: &mut R) -> Action {
    let team = match agent.role {
        Role::Goalkeeper { .. } => return Action::IdleJitter,
        Role::Ball => return Action::Idle,
        Role::Player { team, .. } => team,
    };
    let goal = opponent_goal(team);
    if world.carrier == Some(agent.index) {
        return if rng.random::<f64>() < cfg.kick_prob {
            Action::KickToward { target: goal, power: rng.random_range(cfg.kick_power.0..=cfg.kick_power.1) }
        } else {
            Action::MoveToward(goal)
        };
    }
    let teammate_has_ball = world.carrier.is_some_and(|c| world.roles[c].team() == Some(team));
    if !teammate_has_ball && world.nearest_to_ball(team) == Some(agent.index) {
        return Action::MoveToward(world.ball);
    }
    if rng.random::<f64>() < cfg.idle_prob {
        return Action::Idle;
    }
    let w = cfg.support_weight;
    Action::MoveToward([
        agent.home[0] + w * (world.ball[0] - agent.home[0]),
        agent.home[1] + w * (world.ball[1] - agent.home[1]),
    ])
}

/// Window of `size` centered on the ball and shifted to stay inside the field.
pub fn camera_window(ball: Pos, size: [f64; 2]) -> Rect {
    let place = |c: f64, s: f64| {
        let lo = (c - s / 2.0).clamp(0.0, 1.0 - s);
        (lo, lo + s)
    };
    let (x0, x1) = place(ball[0], size[0]);
    let (y0, y1) = place(ball[1], size[1]);
    Rect { x0, y0, x1, y1 }
}

fn step_toward(from: Pos, to: Pos, speed: f64) -> Pos {
    let d = dist(from, to);
    if d <= speed {
        return to;
    }
    let t = speed / d;
    [(from[0] + t * (to[0] - from[0])).clamp(0.0, 1.0), (from[1] + t * (to[1] - from[1])).clamp(0.0, 1.0)]
}

fn roster(team_size: usize) -> Vec<Role> {
    let mut roles = Vec::with_capacity(2 * team_size + 1);
    for team in 0..2u8 {
        roles.push(Role::Goalkeeper { team });
        for i in 1..team_size {
            roles.push(Role::Player { team, index: i as u8 });
        }
    }
    roles.push(Role::Ball);
    roles
}

/// Simulates one game; goalkeepers hold their posts, field players get a
/// random home position in their own half.
pub fn simulate_soccer(cfg: &SoccerConfig, seed: u64) -> Result<Episode, SimError> {
    if cfg.team_size < 2 {
        return Err(SimError::TooFewAgents { min: 2, got: cfg.team_size });
    }
    if cfg.window[0] <= 0.0 || cfg.window[1] <= 0.0 || cfg.window[0] > 1.0 || cfg.window[1] > 1.0 {
        return Err(SimError::Camera(alloc::format!("window {:?} must lie in (0, 1]", cfg.window)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roles = roster(cfg.team_size);
    let k = roles.len();
    let ball_idx = k - 1;
    let homes: Vec<Pos> = roles
        .iter()
        .map(|r| match r {
            Role::Goalkeeper { team: 0 } => [0.03, 0.5],
            Role::Goalkeeper { .. } => [0.97, 0.5],
            Role::Player { team: 0, .. } => [rng.random_range(0.1..0.5), rng.random_range(0.1..0.9)],
            Role::Player { .. } => [rng.random_range(0.5..0.9), rng.random_range(0.1..0.9)],
            Role::Ball => [0.5, 0.5],
        })
        .collect();
    let mut world = WorldState { roles: roles.clone(), positions: homes.clone(), ball: [0.5, 0.5], carrier: None };
    let mut ball_vel = [0.0, 0.0];
    let mut cooldown = vec![0u32; k];
    let mut frames = Vec::with_capacity(cfg.num_ticks());
    let mut camera = Vec::with_capacity(cfg.num_ticks());

    for _ in 0..cfg.num_ticks() {
        world.positions[ball_idx] = world.ball;
        frames.push(world.positions.clone());
        camera.push(camera_window(world.ball, cfg.window));

        let actions: Vec<Action> = (0..ball_idx)
            .map(|i| {
                let agent = AgentState { index: i, role: roles[i], pos: world.positions[i], home: homes[i] };
                decision_tree_step(&agent, &world, cfg, &mut rng)
            })
            .collect();

        for (i, action) in actions.iter().enumerate() {
            cooldown[i] = cooldown[i].saturating_sub(1);
            match *action {
                Action::MoveToward(target) => {
                    world.positions[i] = step_toward(world.positions[i], target, cfg.player_speed);
                }
                Action::KickToward { target, power } => {
                    let d = dist(world.ball, target).max(1e-9);
                    ball_vel = [power * (target[0] - world.ball[0]) / d, power * (target[1] - world.ball[1]) / d];
                    world.carrier = None;
                    cooldown[i] = COOLDOWN_TICKS;
                }
                Action::IdleJitter => {
                    let j = cfg.keeper_jitter;
                    world.positions[i] = [homes[i][0] + rng.random_range(-j..=j), homes[i][1] + rng.random_range(-j..=j)];
                }
                Action::Idle => {}
            }
        }

        if let Some(c) = world.carrier {
            world.ball = world.positions[c];
            ball_vel = [0.0, 0.0];
        } else {
            let mut b = [world.ball[0] + ball_vel[0], world.ball[1] + ball_vel[1]];
            let scored = (b[0] < 0.0 || b[0] > 1.0) && (GOAL_MOUTH.0..=GOAL_MOUTH.1).contains(&b[1]);
            if scored {
                b = [0.5, 0.5];
                ball_vel = [0.0, 0.0];
            } else {
                super::synthetic::reflect(&mut b, &mut ball_vel);
            }
            world.ball = b;
            ball_vel = [ball_vel[0] * cfg.ball_friction, ball_vel[1] * cfg.ball_friction];
        }

        // possession: free ball goes to the nearest field player in reach,
        // a carried ball to an opponent in reach (tackle)
        let reach = |i: usize, world: &WorldState| {
            matches!(roles[i], Role::Player { .. }) && cooldown[i] == 0 && dist(world.positions[i], world.ball) <= cfg.contact_radius
        };
        let mut claim: Option<(usize, f64)> = None;
        for i in 0..ball_idx {
            let eligible = match world.carrier {
                None => reach(i, &world),
                Some(c) => roles[i].team() != roles[c].team() && reach(i, &world),
            };
            if eligible {
                let d = dist(world.positions[i], world.ball);
                if claim.is_none_or(|(_, bd)| d < bd) {
                    claim = Some((i, d));
                }
            }
        }
        if let Some((i, _)) = claim {
            if let Some(prev) = world.carrier {
                cooldown[prev] = COOLDOWN_TICKS;
            }
            world.carrier = Some(i);
            world.ball = world.positions[i];
        }
    }
    Ok(Episode { roles, frames, camera: Some(camera), seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::GridSpec;

    fn short() -> SoccerConfig {
        SoccerConfig { duration_secs: 60.0, ..SoccerConfig::default() }
    }

    #[test]
    fn camera_examples() {
        let r = camera_window([0.5, 0.5], [0.4, 0.4]);
        assert!((r.x0 - 0.3).abs() < 1e-12 && (r.x1 - 0.7).abs() < 1e-12 && (r.y0 - 0.3).abs() < 1e-12 && (r.y1 - 0.7).abs() < 1e-12);
        assert_eq!(camera_window([0.0, 0.0], [0.4, 0.4]), Rect { x0: 0.0, y0: 0.0, x1: 0.4, y1: 0.4 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let b = [rng.random::<f64>(), rng.random::<f64>()];
            let s = [rng.random_range(0.05..=1.0), rng.random_range(0.05..=1.0)];
            let r = camera_window(b, s);
            assert!(r.contains(b) && r.inside_unit(), "{b:?} {s:?} {r:?}");
        }
    }

    #[test]
    fn episode_invariants() {
        let cfg = short();
        let e = simulate_soccer(&cfg, 11).unwrap();
        assert_eq!(e.k(), 11);
        assert_eq!(e.num_frames(), 240);
        e.validate(Some(4)).unwrap();
        let half_cell = 0.5 * GridSpec::default().cell_width();
        for (k, r) in e.roles.iter().enumerate() {
            if let Role::Goalkeeper { .. } = r {
                let first = e.frames[0][k];
                for f in &e.frames {
                    assert!(dist(f[k], first) < half_cell);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_validates_team_size() {
        assert_eq!(simulate_soccer(&short(), 5).unwrap(), simulate_soccer(&short(), 5).unwrap());
        let bad = SoccerConfig { team_size: 1, ..short() };
        assert!(matches!(simulate_soccer(&bad, 0), Err(SimError::TooFewAgents { .. })));
    }

    #[test]
    fn ball_moves_during_a_game() {
        let e = simulate_soccer(&short(), 2).unwrap();
        let b = e.ball_index().unwrap();
        let spread = e.frames.iter().map(|f| dist(f[b], [0.5, 0.5])).fold(0.0, f64::max);
        assert!(spread > 0.1, "{spread}");
    }

    fn world() -> (WorldState, SoccerConfig) {
        let roles = roster(3);
        let positions = vec![[0.03, 0.5], [0.3, 0.5], [0.45, 0.45], [0.97, 0.5], [0.8, 0.2], [0.7, 0.7], [0.5, 0.5]];
        (WorldState { roles, positions, ball: [0.5, 0.5], carrier: None }, SoccerConfig::default())
    }

    #[test]
    fn tree_branches() {
        let (w, cfg) = world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keeper = AgentState { index: 0, role: w.roles[0], pos: w.positions[0], home: w.positions[0] };
        for _ in 0..50 {
            assert_eq!(decision_tree_step(&keeper, &w, &cfg, &mut rng), Action::IdleJitter);
        }
        let chaser = AgentState { index: 2, role: w.roles[2], pos: w.positions[2], home: [0.3, 0.3] };
        assert_eq!(decision_tree_step(&chaser, &w, &cfg, &mut rng), Action::MoveToward(w.ball));
    }

    #[test]
    fn carrier_kicks_with_probability_point_three() {
        let (mut w, cfg) = world();
        w.carrier = Some(2);
        let carrier = AgentState { index: 2, role: w.roles[2], pos: w.positions[2], home: [0.3, 0.3] };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let kicks = (0..n)
            .filter(|_| matches!(decision_tree_step(&carrier, &w, &cfg, &mut rng), Action::KickToward { .. }))
            .count();
        let freq = kicks as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.02, "{freq}");
    }
}
