use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, Policy};
use crate::error::{Error, Result};
use crate::space::{Action, State};

/// Bounds on the score function: `||grad log pi|| <= g` and
/// `|d^2 log pi / d theta_i d theta_j| <= f`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBounds {
    pub g: f64,
    pub f: f64,
    /// `false` when the values are empirical maxima rather than proven bounds.
    pub certified: bool,
}

/// Region sampled by [`score_bounds_estimate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleBox {
    /// Every parameter coordinate is drawn uniformly from this interval.
    pub theta: (f64, f64),
    /// Continuous state coordinates are drawn from this interval.
    pub state: (f64, f64),
    /// Continuous action coordinates are drawn from this interval.
    pub action: (f64, f64),
    /// Draw state indices uniformly from `0..state_dim` instead of vectors.
    pub discrete_states: bool,
}

const HESSIAN_STEP: f64 = 1e-5;

/// Empirical maxima of `||score||` and of the finite-difference Hessian entries over
/// `sample_count` random `(theta, s, a)` draws. The result is flagged as uncertified.
pub fn score_bounds_estimate<R: Rng + ?Sized>(
    policy: &Policy,
    region: &SampleBox,
    sample_count: usize,
    rng: &mut R,
) -> Result<ScoreBounds> {
    if sample_count == 0 {
        return Err(Error::config("sample_count must be at least 1"));
    }
    let d = policy.dim();
    let mut g: f64 = 0.0;
    let mut f: f64 = 0.0;
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut score = vec![0.0; d];
    for _ in 0..sample_count {
        let theta: Vec<f64> = (0..d).map(|_| uniform(rng, region.theta)).collect();
        let state = if region.discrete_states {
            State::Discrete(rng.random_range(0..policy.spec().state_dim))
        } else {
            State::Continuous(
                (0..policy.spec().state_dim)
                    .map(|_| uniform(rng, region.state))
                    .collect(),
            )
        };
        let action = match &policy.spec().action_space {
            ActionSpace::Discrete { actions } => Action::Discrete(rng.random_range(0..*actions)),
            ActionSpace::Continuous { dim, .. } => {
                Action::Continuous((0..*dim).map(|_| uniform(rng, region.action)).collect())
            }
        };
        policy.score_into(&theta, &state, &action, &mut score)?;
        g = g.max(score.iter().map(|v| v * v).sum::<f64>().sqrt());

        let mut probe = theta.clone();
        for j in 0..d {
            probe[j] = theta[j] + HESSIAN_STEP;
            policy.score_into(&probe, &state, &action, &mut plus)?;
            probe[j] = theta[j] - HESSIAN_STEP;
            policy.score_into(&probe, &state, &action, &mut minus)?;
            probe[j] = theta[j];
            for (p, m) in plus.iter().zip(&minus) {
                f = f.max(((p - m) / (2.0 * HESSIAN_STEP)).abs());
            }
        }
    }
    Ok(ScoreBounds {
        g,
        f,
        certified: false,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.min(hi)..=hi.max(lo))
    }
}
