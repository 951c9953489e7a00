//! Plain policy gradient and lazily aggregated policy gradient.
//!
//! Learners ([`Learner`]) answer broadcasts with fresh batch gradients and decide locally
//! whether to upload. The [`Engine`] drives a [`Controller`] through a
//! [`Transport`](crate::transport::Transport), one bulk-synchronous round per iteration.

mod engine;
mod learner;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::analysis::{max_stepsize, ProblemConstants};
use crate::error::{Error, Result};
use crate::params::ParamVector;

pub use engine::{Controller, Engine, RunOutcome, StepRecord};
pub use learner::{GradientSource, Learner, LearnerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pg,
    Lapg,
}

/// Source of the `sigma^2` term in the trigger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// High-probability bound from the problem constants.
    AnalyticBound,
    /// The learner's on-line estimate from its current batch.
    #[default]
    EmpiricalProxy,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    /// Weights `xi_1 >= ... >= xi_D`; the depth `D` is their count.
    pub xi: Vec<f64>,
    pub alpha: f64,
    #[serde(default)]
    pub variance_mode: VarianceMode,
    /// Confidence level of the analytic variance bound.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Planned iteration count entering the analytic variance bound.
    pub iterations: usize,
}

fn default_delta() -> f64 {
    0.1
}

impl TriggerConfig {
    pub fn depth(&self) -> usize {
        self.xi.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.xi.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config("trigger weights must be finite and non-negative"));
        }
        if self.xi.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("trigger weights must be non-increasing"));
        }
        if 3.0 * self.xi.iter().sum::<f64>() >= 1.0 {
            return Err(Error::config("trigger weights must satisfy 3 * sum(xi) < 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("stepsize must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Whether `alpha` is within the convergence guarantee for aggregate smoothness `L`.
    pub fn stepsize_certified(&self, total_smoothness: f64) -> Result<bool> {
        Ok(self.alpha <= max_stepsize(&self.xi, total_smoothness)?)
    }

    /// `(1 / (alpha^2 M^2)) sum_d xi_d diff_sq[d-1] + 6 sigma2`; missing history counts as 0.
    pub fn threshold(&self, diff_sq: &[f64], sigma2: f64, learners: usize) -> f64 {
        let scale = 1.0 / (self.alpha * self.alpha * (learners * learners) as f64);
        let motion: f64 = self.xi.iter().zip(diff_sq).map(|(x, d)| x * d).sum();
        scale * motion + 6.0 * sigma2
    }

    /// Per-learner analytic variance terms; zero unless the mode is `AnalyticBound`.
    pub fn analytic_sigma2(&self, constants: &ProblemConstants, batch_size: usize) -> Result<Vec<f64>> {
        match self.variance_mode {
            VarianceMode::AnalyticBound => {
                constants.sigma2(batch_size, self.iterations.max(1), self.delta)
            }
            _ => Ok(vec![0.0; constants.learners()]),
        }
    }
}

/// The last `D` parameter differences, most recent first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffHistory {
    depth: usize,
    diffs: VecDeque<(ParamVector, f64)>,
}

impl DiffHistory {
    pub fn new(depth: usize) -> Self {
        DiffHistory {
            depth,
            diffs: VecDeque::with_capacity(depth),
        }
    }

    pub fn push(&mut self, diff: ParamVector) {
        if self.depth == 0 {
            return;
        }
        let sq = diff.norm_sq();
        self.diffs.push_front((diff, sq));
        self.diffs.truncate(self.depth);
    }

    pub fn len(&self) -> usize {
        self.diffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diffs.is_empty()
    }

    pub fn norms_sq(&self) -> Vec<f64> {
        self.diffs.iter().map(|(_, s)| *s).collect()
    }

    pub fn diffs(&self) -> impl Iterator<Item = &ParamVector> {
        self.diffs.iter().map(|(d, _)| d)
    }
}

/// A learner's lazily maintained view.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerState {
    /// Parameters at the last upload; `None` before the first.
    pub lagged_params: Option<ParamVector>,
    /// Gradient at `lagged_params`, mirrored by the controller.
    pub last_uploaded_grad: ParamVector,
    pub sigma2: f64,
    pub upload_count: u64,
}

impl LearnerState {
    pub fn new(dim: usize) -> Self {
        LearnerState {
            lagged_params: None,
            last_uploaded_grad: ParamVector::zeros(dim),
            sigma2: 0.0,
            upload_count: 0,
        }
    }
}

/// True when the innovation `||new_grad - last_uploaded_grad||^2` reaches the threshold.
pub fn trigger_check(
    new_grad: &[f64],
    state: &LearnerState,
    history: &DiffHistory,
    cfg: &TriggerConfig,
    learners: usize,
) -> bool {
    let innovation = state.last_uploaded_grad.distance_sq(new_grad);
    innovation >= cfg.threshold(&history.norms_sq(), state.sigma2, learners)
}

/// `theta - alpha grad + beta (theta - theta_prev)`, returned with `theta` as the new
/// previous iterate.
pub fn apply_update(
    theta: &ParamVector,
    theta_prev: &ParamVector,
    grad: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<(ParamVector, ParamVector)> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::config(format!("momentum {beta} outside [0, 1)")));
    }
    theta.check_dim(grad.len(), "gradient")?;
    theta.check_dim(theta_prev.len(), "previous iterate")?;
    let next: Vec<f64> = if beta == 0.0 {
        theta.iter().zip(grad).map(|(t, g)| t - alpha * g).collect()
    } else {
        theta
            .iter()
            .zip(grad)
            .zip(theta_prev.iter())
            .map(|((t, g), p)| t - alpha * g + beta * (t - p))
            .collect()
    };
    let next = ParamVector::from_vec_unchecked(next);
    if !next.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            detail: "parameter update is not finite".into(),
        });
    }
    Ok((next, theta.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(xi: Vec<f64>, alpha: f64) -> TriggerConfig {
        TriggerConfig {
            xi,
            alpha,
            variance_mode: VarianceMode::Off,
            delta: 0.1,
            iterations: 10,
        }
    }

    #[test]
    fn threshold_hand_example() {
        let c = cfg(vec![0.5], 0.1);
        let mut history = DiffHistory::new(1);
        history.push(ParamVector::from(vec![0.2]));
        assert!((c.threshold(&history.norms_sq(), 0.0, 2) - 0.5).abs() < 1e-12);
        let mut state = LearnerState::new(1);
        assert!(trigger_check(&[0.51f64.sqrt()], &state, &history, &c, 2));
        assert!(!trigger_check(&[0.49f64.sqrt()], &state, &history, &c, 2));
        state.last_uploaded_grad = ParamVector::from(vec![0.3]);
        assert!(!trigger_check(&[0.3], &state, &history, &c, 2));
    }

    #[test]
    fn zero_weights_trigger_on_any_innovation() {
        let c = cfg(vec![0.0, 0.0], 0.1);
        let mut history = DiffHistory::new(2);
        history.push(ParamVector::from(vec![5.0]));
        let state = LearnerState::new(1);
        assert!(trigger_check(&[1e-300], &state, &history, &c, 3));
        // ties trigger, so zero innovation against a zero threshold uploads too
        assert!(trigger_check(&[0.0], &state, &history, &c, 3));
    }

    #[test]
    fn history_keeps_most_recent() {
        let mut h = DiffHistory::new(2);
        for v in [1.0, 2.0, 3.0] {
            h.push(ParamVector::from(vec![v]));
        }
        assert_eq!(h.norms_sq(), vec![9.0, 4.0]);
        let mut none = DiffHistory::new(0);
        none.push(ParamVector::from(vec![1.0]));
        assert!(none.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(vec![0.1, 0.05], 0.1).validate().is_ok());
        assert!(cfg(vec![0.05, 0.1], 0.1).validate().is_err());
        assert!(cfg(vec![0.2, 0.2], 0.1).validate().is_err());
        assert!(cfg(vec![0.1], 0.0).validate().is_err());
        let c = cfg(vec![0.1], 0.1);
        assert!(c.stepsize_certified(6.9).unwrap());
        assert!(!c.stepsize_certified(7.1).unwrap());
    }

    #[test]
    fn update_examples() {
        let theta = ParamVector::from(vec![1.0, 2.0]);
        let prev = ParamVector::from(vec![0.5, 2.5]);
        let (next, old) = apply_update(&theta, &prev, &[1.0, -1.0], 0.5, 0.0).unwrap();
        assert_eq!(next.as_slice(), &[0.5, 2.5]);
        assert_eq!(old, theta);
        let (next, _) = apply_update(&theta, &prev, &[0.0, 0.0], 0.01, 0.6).unwrap();
        assert_eq!(next.as_slice(), &[1.0 + 0.6 * 0.5, 2.0 - 0.6 * 0.5]);
        let (next, _) = apply_update(&ParamVector::from(vec![3.0]), &ParamVector::from(vec![3.0]), &[2.0], 1.0, 0.0).unwrap();
        assert_eq!(next.as_slice(), &[1.0]);
        assert!(matches!(
            apply_update(&theta, &prev, &[f64::INFINITY, 0.0], 0.1, 0.0),
            Err(Error::Divergence { .. })
        ));
        assert!(apply_update(&theta, &prev, &[0.0, 0.0], 0.1, 1.0).is_err());
    }
}
