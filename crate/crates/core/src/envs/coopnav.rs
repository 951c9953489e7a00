//! Cooperative navigation: `M` point agents on a square, each assigned a landmark.
//!
//! The observed state is global: `[x, y, vx, vy]` for every agent followed by the
//! `[x, y]` of every landmark (`6M` entries). Each agent picks one of five actions
//! (stay, left, right, up, down) which adds `velocity_increment` along that axis; positions
//! integrate by `dt` and are clipped to the box, zeroing the clipped velocity component.
//!
//! Loss of agent `m` after a step is
//! `w_m (d_m + penalty * c_m) / (2 sqrt(2) half_width + penalty (M - 1))`,
//! where `d_m` is the distance to its landmark and `c_m` the number of other agents closer
//! than `collision_radius`. The denominator is the largest possible numerator, so the
//! loss lies in `[0, w_m]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Action, State};

pub const ACTIONS: usize = 5;

const MOVES: [[f64; 2]; ACTIONS] = [[0.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Landmarks {
    Fixed(Vec<[f64; 2]>),
    RandomizedPerEpisode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoopNavConfig {
    pub agents: usize,
    #[serde(default = "defaults::half_width")]
    pub world_half_width: f64,
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default = "defaults::collision_radius")]
    pub collision_radius: f64,
    #[serde(default = "defaults::collision_penalty")]
    pub collision_penalty: f64,
    #[serde(default = "defaults::velocity_increment")]
    pub velocity_increment: f64,
    pub reward_scales: Vec<f64>,
    pub landmarks: Landmarks,
    /// Emit a single loss, the mean of the per-agent losses, instead of one per agent.
    #[serde(default)]
    pub team_loss: bool,
}

mod defaults {
    pub fn half_width() -> f64 {
        1.0
    }
    pub fn dt() -> f64 {
        0.1
    }
    pub fn collision_radius() -> f64 {
        0.1
    }
    pub fn collision_penalty() -> f64 {
        1.0
    }
    pub fn velocity_increment() -> f64 {
        0.5
    }
}

impl CoopNavConfig {
    /// Unit scales, landmarks redrawn every episode.
    pub fn homogeneous(agents: usize) -> Self {
        CoopNavConfig {
            agents,
            world_half_width: defaults::half_width(),
            dt: defaults::dt(),
            collision_radius: defaults::collision_radius(),
            collision_penalty: defaults::collision_penalty(),
            velocity_increment: defaults::velocity_increment(),
            reward_scales: vec![1.0; agents],
            landmarks: Landmarks::RandomizedPerEpisode,
            team_loss: false,
        }
    }

    /// Scales drawn log-uniformly from `[1, 10]` with a fixed seed.
    pub fn heterogeneous(agents: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CoopNavConfig {
            reward_scales: (0..agents)
                .map(|_| 10f64.powf(rng.random::<f64>()))
                .collect(),
            ..Self::homogeneous(agents)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::config("coop-nav needs at least one agent"));
        }
        if self.reward_scales.len() != self.agents {
            return Err(Error::config("one reward scale per agent is required"));
        }
        if self.reward_scales.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::config("reward scales must be positive and finite"));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.world_half_width) || !positive(self.dt) || !positive(self.collision_radius) {
            return Err(Error::config(
                "world_half_width, dt and collision_radius must be positive",
            ));
        }
        if !(self.collision_penalty >= 0.0 && self.collision_penalty.is_finite()) {
            return Err(Error::config("collision_penalty must be non-negative"));
        }
        if !self.velocity_increment.is_finite() {
            return Err(Error::config("velocity_increment must be finite"));
        }
        if let Landmarks::Fixed(points) = &self.landmarks {
            if points.len() != self.agents {
                return Err(Error::config("one landmark per agent is required"));
            }
            let w = self.world_half_width;
            if points.iter().flatten().any(|c| c.abs() > w) {
                return Err(Error::config("landmarks must lie inside the box"));
            }
        }
        Ok(())
    }
}

/// A validated cooperative-navigation world.
#[derive(Clone, Debug, PartialEq)]
pub struct CoopNav {
    config: CoopNavConfig,
    normalizer: f64,
}

impl CoopNav {
    pub fn new(config: CoopNavConfig) -> Result<Self> {
        config.validate()?;
        let normalizer = 2.0 * std::f64::consts::SQRT_2 * config.world_half_width
            + config.collision_penalty * (config.agents - 1) as f64;
        Ok(CoopNav { config, normalizer })
    }

    pub fn config(&self) -> &CoopNavConfig {
        &self.config
    }

    pub fn agents(&self) -> usize {
        self.config.agents
    }

    pub fn observation_dim(&self) -> usize {
        6 * self.config.agents
    }

    pub fn learners(&self) -> usize {
        if self.config.team_loss {
            1
        } else {
            self.config.agents
        }
    }

    pub fn loss_bounds(&self) -> Vec<f64> {
        let w = &self.config.reward_scales;
        if self.config.team_loss {
            vec![w.iter().sum::<f64>() / w.len() as f64]
        } else {
            w.clone()
        }
    }

    pub(crate) fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let m = self.config.agents;
        let w = self.config.world_half_width;
        let mut s = vec![0.0; 6 * m];
        for i in 0..m {
            s[4 * i] = rng.random_range(-w..=w);
            s[4 * i + 1] = rng.random_range(-w..=w);
        }
        let marks = &mut s[4 * m..];
        match &self.config.landmarks {
            Landmarks::Fixed(points) => {
                for (slot, p) in marks.chunks_exact_mut(2).zip(points) {
                    slot.copy_from_slice(p);
                }
            }
            Landmarks::RandomizedPerEpisode => {
                for c in marks.iter_mut() {
                    *c = rng.random_range(-w..=w);
                }
            }
        }
        State::Continuous(s)
    }

    pub(crate) fn step(&self, state: &State, actions: &[Action]) -> Result<(State, Vec<f64>)> {
        let m = self.config.agents;
        let State::Continuous(s) = state else {
            return Err(Error::config("coop-nav requires a continuous state"));
        };
        if s.len() != 6 * m {
            return Err(Error::config(format!("coop-nav state must have {} entries", 6 * m)));
        }
        if actions.len() != m {
            return Err(Error::config(format!("coop-nav expects {m} actions, got {}", actions.len())));
        }
        let w = self.config.world_half_width;
        let mut next = s.clone();
        for (i, action) in actions.iter().enumerate() {
            let a = match action {
                Action::Discrete(a) if *a < ACTIONS => *a,
                other => return Err(Error::config(format!("invalid coop-nav action {other:?}"))),
            };
            for axis in 0..2 {
                let v = &mut next[4 * i + 2 + axis];
                *v += MOVES[a][axis] * self.config.velocity_increment;
                let p = s[4 * i + axis] + *v * self.config.dt;
                let clipped = p.clamp(-w, w);
                if clipped != p {
                    *v = 0.0;
                }
                next[4 * i + axis] = clipped;
            }
        }
        let losses = self.losses(&next);
        Ok((State::Continuous(next), losses))
    }

    /// Per-learner losses at a given (post-step) configuration.
    pub fn losses(&self, s: &[f64]) -> Vec<f64> {
        let m = self.config.agents;
        let pos = |i: usize| [s[4 * i], s[4 * i + 1]];
        let per_agent: Vec<f64> = (0..m)
            .map(|i| {
                let p = pos(i);
                let mark = [s[4 * m + 2 * i], s[4 * m + 2 * i + 1]];
                let collisions = (0..m)
                    .filter(|&j| j != i && dist(p, pos(j)) < self.config.collision_radius)
                    .count();
                let raw = dist(p, mark) + self.config.collision_penalty * collisions as f64;
                (self.config.reward_scales[i] * raw / self.normalizer).min(self.config.reward_scales[i])
            })
            .collect();
        if self.config.team_loss {
            vec![per_agent.iter().sum::<f64>() / m as f64]
        } else {
            per_agent
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(m: usize) -> CoopNav {
        CoopNav::new(CoopNavConfig {
            landmarks: Landmarks::Fixed(vec![[0.5, 0.5]; m]),
            ..CoopNavConfig::homogeneous(m)
        })
        .unwrap()
    }

    #[test]
    fn on_landmark_no_loss() {
        let env = world(1);
        let s = State::Continuous(vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
        let (_, losses) = env.step(&s, &[Action::Discrete(0)]).unwrap();
        assert_eq!(losses, vec![0.0]);
    }

    #[test]
    fn stay_at_rest_is_fixed_point() {
        let env = world(2);
        let s = vec![0.1, -0.3, 0.0, 0.0, -0.7, 0.2, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5];
        let (next, _) = env
            .step(&State::Continuous(s.clone()), &[Action::Discrete(0), Action::Discrete(0)])
            .unwrap();
        assert_eq!(next, State::Continuous(s));
    }

    #[test]
    fn moves_and_clips() {
        let env = world(1);
        let s = State::Continuous(vec![0.0, 0.99, 0.0, 0.2, 0.5, 0.5]);
        let (next, _) = env.step(&s, &[Action::Discrete(2)]).unwrap();
        let State::Continuous(n) = next else { unreachable!() };
        assert!((n[0] - 0.05).abs() < 1e-15);
        assert_eq!(n[2], 0.5);
        // y would reach 0.99 + 0.02 > 1: clipped, velocity zeroed
        assert_eq!(n[1], 1.0);
        assert_eq!(n[3], 0.0);
    }

    #[test]
    fn collisions_are_penalized_and_bounded() {
        let env = world(2);
        let s = vec![0.5, 0.5, 0.0, 0.0, 0.52, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5];
        let l = env.losses(&s);
        let norm = 2.0 * std::f64::consts::SQRT_2 + 1.0;
        assert!((l[0] - 1.0 / norm).abs() < 1e-15);
        assert!((l[1] - 1.02 / norm).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_actions_and_configs() {
        let env = world(1);
        let s = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(env.step(&s, &[Action::Discrete(5)]).is_err());
        assert!(env.step(&s, &[]).is_err());
        let mut cfg = CoopNavConfig::homogeneous(2);
        cfg.reward_scales[1] = 0.0;
        assert!(CoopNav::new(cfg).is_err());
        let mut cfg = CoopNavConfig::homogeneous(2);
        cfg.collision_radius = 0.0;
        assert!(CoopNav::new(cfg).is_err());
    }

    #[test]
    fn heterogeneous_scales_in_range() {
        let cfg = CoopNavConfig::heterogeneous(5, 11);
        assert!(cfg.reward_scales.iter().all(|w| (1.0..=10.0).contains(w)));
        assert_eq!(cfg, CoopNavConfig::heterogeneous(5, 11));
    }
}
