use serde::{Deserialize, Serialize};

use super::{apply_update, DiffHistory, Mode};
use crate::analysis::lyapunov;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::transport::{CommLedger, Reply, Transport, UploadKind};

/// Controller-side state: iterate, momentum memory, per-learner gradient mirrors and the
/// aggregated gradient.
#[derive(Clone, Debug)]
pub struct Controller {
    theta: ParamVector,
    theta_prev: ParamVector,
    mirrors: Vec<ParamVector>,
    aggregate: ParamVector,
    history: DiffHistory,
    iteration: u32,
    alpha: f64,
    beta: f64,
}

impl Controller {
    pub fn new(theta: ParamVector, learners: usize, alpha: f64, beta: f64, depth: usize) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::numeric("initial parameters are not finite"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config("stepsize must be positive"));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config(format!("momentum {beta} outside [0, 1)")));
        }
        let dim = theta.len();
        Ok(Controller {
            theta_prev: theta.clone(),
            theta,
            mirrors: vec![ParamVector::zeros(dim); learners],
            aggregate: ParamVector::zeros(dim),
            history: DiffHistory::new(depth),
            iteration: 0,
            alpha,
            beta,
        })
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn aggregate(&self) -> &ParamVector {
        &self.aggregate
    }

    /// The controller's copy of each learner's last uploaded gradient.
    pub fn mirrors(&self) -> &[ParamVector] {
        &self.mirrors
    }

    pub fn history(&self) -> &DiffHistory {
        &self.history
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    /// Applies the uploads of iteration `k` to the mirrors and rebuilds the aggregate;
    /// returns the 1-based ids of the uploading learners.
    fn commit(&mut self, replies: &[Reply], mode: Mode, k: u32) -> Result<Vec<usize>> {
        if replies.len() != self.mirrors.len() {
            return Err(Error::Protocol(format!(
                "{} replies for {} learners",
                replies.len(),
                self.mirrors.len()
            )));
        }
        let mut uploads = Vec::new();
        for (i, reply) in replies.iter().enumerate() {
            let Some(up) = &reply.upload else {
                if mode == Mode::Pg || k == 1 {
                    return Err(Error::Protocol(format!("learner {} skipped a mandatory upload", i + 1)));
                }
                continue;
            };
            self.theta.check_dim(up.vector.len(), "upload")?;
            match up.kind {
                UploadKind::Full => self.mirrors[i] = ParamVector::from(up.vector.clone()),
                UploadKind::Delta if k == 1 => {
                    return Err(Error::Protocol(format!("learner {} sent a delta before any full upload", i + 1)))
                }
                UploadKind::Delta => self.mirrors[i].add_assign(&up.vector),
            }
            uploads.push(i + 1);
        }
        let mut aggregate = ParamVector::zeros(self.theta.len());
        for m in &self.mirrors {
            aggregate.add_assign(m);
        }
        self.aggregate = aggregate;
        Ok(uploads)
    }

    fn advance(&mut self) -> Result<()> {
        let (next, prev) = apply_update(&self.theta, &self.theta_prev, &self.aggregate, self.alpha, self.beta)?;
        self.history.push(next.sub(&self.theta));
        self.theta = next;
        self.theta_prev = prev;
        self.iteration += 1;
        Ok(())
    }
}

/// Per-iteration record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// 1-based ids of the learners that uploaded.
    pub uploads: Vec<usize>,
    /// Norm of the aggregated gradient used in the update.
    pub grad_norm: f64,
    /// Sum of the learners' objective estimates at the broadcast iterate.
    pub objective_estimate: f64,
    pub lyapunov: Option<f64>,
    /// Communication counters after this iteration.
    pub comm: CommLedger,
    /// Set when the update used momentum, which the convergence analysis does not cover.
    pub momentum: bool,
}

/// Records of a run; `error` holds the reason it stopped early, if it did.
#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<StepRecord>,
    pub error: Option<Error>,
}

/// Drives the controller through a transport.
pub struct Engine<T: Transport> {
    controller: Controller,
    transport: T,
    mode: Mode,
    xi: Vec<f64>,
    best_objective: f64,
}

impl<T: Transport> Engine<T> {
    /// `xi` weights the parameter-motion terms of the Lyapunov diagnostic.
    pub fn new(controller: Controller, transport: T, mode: Mode, xi: Vec<f64>) -> Result<Self> {
        if controller.mirrors.len() != transport.learners() {
            return Err(Error::config(format!(
                "controller expects {} learners, transport has {}",
                controller.mirrors.len(),
                transport.learners()
            )));
        }
        Ok(Engine {
            controller,
            transport,
            mode,
            xi,
            best_objective: f64::INFINITY,
        })
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    /// One bulk-synchronous iteration: broadcast, collect, aggregate, update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let k = self.controller.iteration + 1;
        let replies = self.transport.exchange(k, self.controller.theta())?;
        let uploads = self.controller.commit(&replies, self.mode, k)?;
        let objective: f64 = replies.iter().map(|r| r.objective_estimate).sum();
        let lyap = objective.is_finite().then(|| {
            self.best_objective = self.best_objective.min(objective);
            lyapunov(
                objective - self.best_objective,
                &self.controller.history.norms_sq(),
                &self.xi,
                self.controller.alpha,
            )
        });
        let grad_norm = self.controller.aggregate.norm();
        self.controller.advance().map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence {
                iteration: k as usize,
                detail: format!("{detail} (aggregated gradient norm {grad_norm:e})"),
            },
            other => other,
        })?;
        Ok(StepRecord {
            iteration: k as usize,
            uploads,
            grad_norm,
            objective_estimate: objective,
            lyapunov: lyap,
            comm: self.transport.ledger().clone(),
            momentum: self.controller.beta != 0.0,
        })
    }

    /// Runs `iterations` steps, keeping the records gathered before any failure.
    pub fn run(&mut self, iterations: usize) -> RunOutcome {
        let mut records = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            match self.step() {
                Ok(r) => records.push(r),
                Err(e) => return RunOutcome { records, error: Some(e) },
            }
        }
        RunOutcome { records, error: None }
    }
}
