//! Environments: a tabular MDP that can be enumerated exactly, the cooperative-navigation
//! world, and per-worker instances for parallel RL.

mod coopnav;
mod tabular;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyBundle, PolicyFamily};
use crate::seed::StreamId;
use crate::space::{Action, State};

pub use coopnav::{CoopNav, CoopNavConfig, Landmarks, ACTIONS as COOPNAV_ACTIONS};
pub use tabular::{Path, PathIter, TabularMdp, ENUMERATION_LIMIT};

#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Tabular(TabularMdp),
    CoopNav(CoopNav),
}

/// One decision step: the state, the joint action taken in it and every learner's loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub actions: Vec<Action>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `T + 1` steps, `t = 0..=T`.
    pub steps: Vec<Step>,
    pub seed: Option<StreamId>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }
}

/// What a learner optimizes: its loss column of a shared (multi-agent) or private
/// (parallel) environment.
#[derive(Clone, Debug)]
pub struct Task {
    pub env: Arc<Env>,
    pub loss_index: usize,
}

impl Task {
    pub fn new(env: Arc<Env>, loss_index: usize) -> Result<Self> {
        if loss_index >= env.learners() {
            return Err(Error::config(format!(
                "loss index {loss_index} outside 0..{}",
                env.learners()
            )));
        }
        Ok(Task { env, loss_index })
    }

    pub fn loss_bound(&self) -> f64 {
        self.env.loss_bounds()[self.loss_index]
    }
}

impl Env {
    /// Number of loss functions the environment emits per step.
    pub fn learners(&self) -> usize {
        match self {
            Env::Tabular(t) => t.learners(),
            Env::CoopNav(c) => c.learners(),
        }
    }

    pub fn loss_bounds(&self) -> Vec<f64> {
        match self {
            Env::Tabular(t) => t.bounds.clone(),
            Env::CoopNav(c) => c.loss_bounds(),
        }
    }

    /// State count (tabular) or state vector length (coop-nav).
    pub fn observation_dim(&self) -> usize {
        match self {
            Env::Tabular(t) => t.states,
            Env::CoopNav(c) => c.observation_dim(),
        }
    }

    /// Number of action components in a joint action.
    pub fn action_components(&self) -> usize {
        match self {
            Env::Tabular(_) => 1,
            Env::CoopNav(c) => c.agents(),
        }
    }

    /// Actions available to each component.
    pub fn actions_per_component(&self) -> usize {
        match self {
            Env::Tabular(t) => t.actions,
            Env::CoopNav(_) => COOPNAV_ACTIONS,
        }
    }

    pub fn tabular(&self) -> Option<&TabularMdp> {
        match self {
            Env::Tabular(t) => Some(t),
            Env::CoopNav(_) => None,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        match self {
            Env::Tabular(t) => t.reset(rng),
            Env::CoopNav(c) => c.reset(rng),
        }
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &State,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<(State, Vec<f64>)> {
        let out = match self {
            Env::Tabular(t) => t.step(state, actions, rng)?,
            Env::CoopNav(c) => c.step(state, actions)?,
        };
        debug_assert!(
            out.1
                .iter()
                .zip(self.loss_bounds())
                .all(|(l, b)| *l >= 0.0 && *l <= b),
            "loss outside its bound"
        );
        Ok(out)
    }

    /// Checks that the bundle emits joint actions this environment accepts.
    pub fn check_bundle(&self, bundle: &PolicyBundle) -> Result<()> {
        if bundle.components() != self.action_components() {
            return Err(Error::config(format!(
                "policy bundle has {} components, environment expects {}",
                bundle.components(),
                self.action_components()
            )));
        }
        for p in bundle.policies() {
            if p.action_count() != Some(self.actions_per_component()) {
                return Err(Error::config(
                    "policy action count does not match the environment",
                ));
            }
            let tabular_policy = p.spec().family == PolicyFamily::TabularSoftmax;
            if tabular_policy && !matches!(self, Env::Tabular(_)) {
                return Err(Error::config("tabular policies need a tabular environment"));
            }
            if p.spec().state_dim != self.observation_dim() {
                return Err(Error::config(format!(
                    "policy state_dim {} does not match environment observation size {}",
                    p.spec().state_dim,
                    self.observation_dim()
                )));
            }
        }
        Ok(())
    }

    /// Samples a `horizon + 1` step trajectory under `theta`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        bundle: &PolicyBundle,
        theta: &[f64],
        horizon: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut state = self.reset(rng);
        let mut steps = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            let actions = bundle.sample(theta, &state, rng)?;
            let (next, losses) = self.step(&state, &actions, rng)?;
            steps.push(Step {
                state,
                actions,
                losses,
            });
            state = next;
        }
        Ok(Trajectory { steps, seed: None })
    }

    /// [`Env::rollout`] on the stream named by `id`, recording the id in the trajectory.
    pub fn rollout_seeded(
        &self,
        bundle: &PolicyBundle,
        theta: &[f64],
        horizon: usize,
        id: StreamId,
    ) -> Result<Trajectory> {
        let mut traj = self.rollout(bundle, theta, horizon, &mut id.stream())?;
        traj.seed = Some(id);
        Ok(traj)
    }
}

/// Base environment for [`make_parallel_instances`].
#[derive(Clone, Debug)]
pub enum ParallelBase {
    /// Must carry exactly one loss table.
    Tabular(TabularMdp),
    CoopNav(CoopNavConfig),
}

/// Per-worker environments for parallel RL.
///
/// Workers are paired; in pair `p` worker `2p` gets sign `+1` and worker `2p + 1` sign `-1`
/// (an unpaired last worker gets `0`). A worker with sign `c` scales the loss table and its
/// bound by `1 + c h`, and reweights the initial distribution to `rho (1 + c h eps_p)`
/// where `eps_p` is drawn per pair, centered so that `sum_s rho(s) eps_p(s) = 0` and scaled
/// to `max |eps_p| = 1`. Worker averages of `rho_m` and `l_m` therefore equal the base,
/// and transitions are shared. Coop-nav workers scale their reward coefficients the same
/// way and report a single team loss; their initial distribution is not perturbed.
pub fn make_parallel_instances<R: Rng + ?Sized>(
    base: &ParallelBase,
    workers: usize,
    heterogeneity: f64,
    rng: &mut R,
) -> Result<Vec<Env>> {
    if workers == 0 {
        return Err(Error::config("at least one worker is required"));
    }
    if !(0.0..1.0).contains(&heterogeneity) {
        return Err(Error::config(format!(
            "heterogeneity must lie in [0, 1), got {heterogeneity}"
        )));
    }
    let sign = |m: usize| -> f64 {
        if m % 2 == 1 {
            -1.0
        } else if m + 1 < workers {
            1.0
        } else {
            0.0
        }
    };
    match base {
        ParallelBase::Tabular(mdp) => {
            if mdp.learners() != 1 {
                return Err(Error::config(
                    "parallel instances need a base MDP with a single loss table",
                ));
            }
            let mut eps = Vec::new();
            let mut out = Vec::with_capacity(workers);
            for m in 0..workers {
                if m % 2 == 0 {
                    eps = centered_direction(&mdp.rho, rng);
                }
                let c = sign(m) * heterogeneity;
                let mut rho: Vec<f64> = mdp
                    .rho
                    .iter()
                    .zip(&eps)
                    .map(|(r, e)| r * (1.0 + c * e))
                    .collect();
                let total: f64 = rho.iter().sum();
                rho.iter_mut().for_each(|r| *r /= total);
                let scale = 1.0 + c;
                let losses = vec![mdp.losses[0].iter().map(|l| l * scale).collect()];
                out.push(Env::Tabular(TabularMdp::new(
                    mdp.states,
                    mdp.actions,
                    mdp.transitions.clone(),
                    rho,
                    losses,
                    Some(vec![mdp.bounds[0] * scale]),
                )?));
            }
            Ok(out)
        }
        ParallelBase::CoopNav(config) => (0..workers)
            .map(|m| {
                let scale = 1.0 + sign(m) * heterogeneity;
                let cfg = CoopNavConfig {
                    reward_scales: config.reward_scales.iter().map(|w| w * scale).collect(),
                    team_loss: true,
                    ..config.clone()
                };
                Ok(Env::CoopNav(CoopNav::new(cfg)?))
            })
            .collect(),
    }
}

fn centered_direction<R: Rng + ?Sized>(rho: &[f64], rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = rho.iter().map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mean: f64 = raw.iter().zip(rho).map(|(e, r)| e * r).sum();
    let centered: Vec<f64> = raw.iter().map(|e| e - mean).collect();
    let max = centered.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    if max > 0.0 {
        centered.iter().map(|e| e / max).collect()
    } else {
        centered
    }
}
