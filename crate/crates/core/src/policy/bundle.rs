use std::ops::Range;

use rand::Rng;

use super::Policy;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::space::{Action, State};

/// The joint policy driving an environment.
///
/// `Joint` is a single policy over the environment's (joint) action space, shared by
/// all learners. `PerAgent` is the product of local policies `pi_m(a_m | s; theta_m)`
/// acting on the shared global state; its parameter vector is the concatenation of the
/// local blocks in agent order.
#[derive(Clone, Debug)]
pub enum PolicyBundle {
    Joint(Policy),
    PerAgent(Vec<Policy>),
}

impl PolicyBundle {
    pub fn policies(&self) -> &[Policy] {
        match self {
            PolicyBundle::Joint(p) => std::slice::from_ref(p),
            PolicyBundle::PerAgent(ps) => ps,
        }
    }

    pub fn dim(&self) -> usize {
        self.policies().iter().map(Policy::dim).sum()
    }

    /// Number of action components in a joint action.
    pub fn components(&self) -> usize {
        self.policies().len()
    }

    /// Parameter range of each component.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.policies()
            .iter()
            .map(|p| {
                let r = start..start + p.dim();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut out = Vec::with_capacity(self.dim());
        for p in self.policies() {
            out.extend_from_slice(&p.init_params(rng));
        }
        ParamVector::from(out)
    }

    fn check(&self, theta: &[f64], actions: Option<&[Action]>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::config(format!(
                "parameter length {} does not match bundle dimension {}",
                theta.len(),
                self.dim()
            )));
        }
        if let Some(actions) = actions {
            if actions.len() != self.components() {
                return Err(Error::config(format!(
                    "joint action has {} components, expected {}",
                    actions.len(),
                    self.components()
                )));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        state: &State,
        rng: &mut R,
    ) -> Result<Vec<Action>> {
        self.check(theta, None)?;
        self.policies()
            .iter()
            .zip(self.blocks())
            .map(|(p, r)| p.sample_action(&theta[r], state, rng))
            .collect()
    }

    pub fn log_prob(&self, theta: &[f64], state: &State, actions: &[Action]) -> Result<f64> {
        self.check(theta, Some(actions))?;
        let mut total = 0.0;
        for ((p, r), a) in self.policies().iter().zip(self.blocks()).zip(actions) {
            total += p.log_prob(&theta[r], state, a)?;
        }
        Ok(total)
    }

    /// Score of the joint log-probability, written into `out`.
    pub fn score_into(
        &self,
        theta: &[f64],
        state: &State,
        actions: &[Action],
        out: &mut [f64],
    ) -> Result<()> {
        self.check(theta, Some(actions))?;
        for ((p, r), a) in self.policies().iter().zip(self.blocks()).zip(actions) {
            p.score_into(&theta[r.clone()], state, a, &mut out[r])?;
        }
        Ok(())
    }
}
