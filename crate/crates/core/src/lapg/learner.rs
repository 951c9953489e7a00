use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{trigger_check, DiffHistory, LearnerState, Mode, TriggerConfig, VarianceMode};
use crate::envs::Task;
use crate::error::{Error, Result};
use crate::estimator::{exact_gradient_dp, gpomdp_batch, BatchSpec};
use crate::params::ParamVector;
use crate::policy::PolicyBundle;
use crate::transport::{Reply, Responder, Upload, UploadKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientSource {
    /// Mini-batch G(PO)MDP from seeded rollouts.
    #[default]
    Sampled,
    /// Exact truncated gradient by dynamic programming (tabular environments only).
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub mode: Mode,
    pub trigger: TriggerConfig,
    pub batch: BatchSpec,
    pub source: GradientSource,
    /// Master seed of the rollout streams.
    pub master: u64,
    /// Variance term used when the trigger mode is `AnalyticBound`.
    pub analytic_sigma2: f64,
}

/// One learner: computes a fresh gradient at every broadcast and uploads according to its
/// mode.
pub struct Learner {
    index: usize,
    learners: usize,
    task: Task,
    bundle: Arc<PolicyBundle>,
    cfg: LearnerConfig,
    state: LearnerState,
    history: DiffHistory,
    last_theta: Option<ParamVector>,
}

impl Learner {
    /// Learner `index` (0-based) of `learners`.
    pub fn new(
        index: usize,
        learners: usize,
        task: Task,
        bundle: Arc<PolicyBundle>,
        cfg: LearnerConfig,
    ) -> Result<Self> {
        if index >= learners {
            return Err(Error::config(format!("learner index {index} outside 0..{learners}")));
        }
        task.env.check_bundle(&bundle)?;
        if cfg.source == GradientSource::Exact && task.env.tabular().is_none() {
            return Err(Error::config("exact gradients need a tabular environment"));
        }
        if cfg.mode == Mode::Lapg {
            cfg.trigger.validate()?;
        }
        let dim = bundle.dim();
        let depth = cfg.trigger.depth();
        Ok(Learner {
            index,
            learners,
            task,
            bundle,
            cfg,
            state: LearnerState::new(dim),
            history: DiffHistory::new(depth),
            last_theta: None,
        })
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }

    /// Gradient, variance proxy and objective estimate at `theta`.
    fn gradient(&self, theta: &[f64], iteration: u32) -> Result<(ParamVector, Option<f64>, f64)> {
        let spec = &self.cfg.batch;
        match self.cfg.source {
            GradientSource::Sampled => {
                let r = gpomdp_batch(
                    &self.task,
                    &self.bundle,
                    theta,
                    self.index,
                    iteration as usize,
                    spec,
                    self.cfg.master,
                )?;
                Ok((r.grad, r.variance_estimate, r.objective_estimate))
            }
            GradientSource::Exact => {
                let mdp = self.task.env.tabular().expect("checked at construction");
                let e = exact_gradient_dp(
                    mdp,
                    &self.bundle,
                    theta,
                    self.task.loss_index,
                    spec.horizon,
                    spec.gamma,
                )?;
                Ok((e.grad, None, e.objective))
            }
        }
    }
}

impl Responder for Learner {
    fn respond(&mut self, iteration: u32, theta: &[f64]) -> Result<Reply> {
        let theta = ParamVector::from(theta.to_vec());
        theta.check_dim(self.bundle.dim(), "broadcast")?;
        if let Some(prev) = &self.last_theta {
            self.history.push(theta.sub(prev));
        }
        let (grad, proxy, objective) = self.gradient(&theta, iteration)?;
        self.state.sigma2 = match self.cfg.trigger.variance_mode {
            VarianceMode::AnalyticBound => self.cfg.analytic_sigma2,
            VarianceMode::EmpiricalProxy => proxy.unwrap_or(0.0),
            VarianceMode::Off => 0.0,
        };
        let fire = match self.cfg.mode {
            Mode::Pg => true,
            Mode::Lapg => {
                self.state.lagged_params.is_none()
                    || trigger_check(&grad, &self.state, &self.history, &self.cfg.trigger, self.learners)
            }
        };
        let upload = fire.then(|| {
            let upload = match self.cfg.mode {
                Mode::Lapg if self.state.lagged_params.is_some() => {
                    encode_innovation(&self.state.last_uploaded_grad, &grad)
                }
                _ => (UploadKind::Full, grad.to_vec()),
            };
            self.state.last_uploaded_grad = grad;
            self.state.lagged_params = Some(theta.clone());
            self.state.upload_count += 1;
            Upload {
                kind: upload.0,
                vector: upload.1,
                sigma2: proxy,
            }
        });
        self.last_theta = Some(theta);
        Ok(Reply {
            upload,
            objective_estimate: objective,
        })
    }
}

/// The innovation `new - last`, unless adding it back to `last` would not reproduce `new`
/// exactly, in which case the full gradient is sent instead.
fn encode_innovation(last: &[f64], new: &[f64]) -> (UploadKind, Vec<f64>) {
    let delta: Vec<f64> = new.iter().zip(last).map(|(n, l)| n - l).collect();
    let exact = last
        .iter()
        .zip(&delta)
        .zip(new)
        .all(|((l, d), n)| (l + d).to_bits() == n.to_bits());
    if exact {
        (UploadKind::Delta, delta)
    } else {
        (UploadKind::Full, new.to_vec())
    }
}
