//! Controller/learner message exchange with communication accounting.
//!
//! One iteration is a bulk-synchronous round: the controller broadcasts `theta` to every
//! learner, each learner replies with an optional gradient upload followed by an
//! acknowledgement, and the replies are returned in learner-id order. Both backends keep a
//! [`CommLedger`] with identical counting rules; acknowledgements are not counted.

pub mod codec;
mod socket;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{decode, encode, frame_len, Kind, Message, HEADER_LEN};
pub use socket::{run_learner_client, SocketTransport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UploadKind {
    /// Difference from the previously uploaded gradient.
    Delta,
    /// The gradient itself.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub kind: UploadKind,
    pub vector: Vec<f64>,
    pub sigma2: Option<f64>,
}

/// A learner's answer to one broadcast.
#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub upload: Option<Upload>,
    /// Learner-side telemetry carried by the acknowledgement.
    pub objective_estimate: f64,
}

/// Learner-side message handler.
pub trait Responder: Send {
    fn respond(&mut self, iteration: u32, theta: &[f64]) -> Result<Reply>;
}

/// Counters of controller/learner traffic.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub uploads: u64,
    pub broadcasts: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub per_learner_uploads: Vec<u64>,
    #[serde(skip)]
    last_upload: Vec<Option<u32>>,
}

impl CommLedger {
    pub fn new(learners: usize) -> Self {
        CommLedger {
            per_learner_uploads: vec![0; learners],
            last_upload: vec![None; learners],
            ..Default::default()
        }
    }

    /// One broadcast of a `dim`-vector to every learner.
    pub fn record_broadcast(&mut self, dim: usize) {
        let m = self.per_learner_uploads.len() as u64;
        self.broadcasts += m;
        self.bytes_down += m * frame_len(Kind::Broadcast, dim) as u64;
    }

    /// An upload by 0-based learner `index`; a second upload in the same iteration is a
    /// protocol error.
    pub fn record_upload(&mut self, index: usize, iteration: u32, dim: usize) -> Result<()> {
        let slot = self
            .last_upload
            .get_mut(index)
            .ok_or_else(|| Error::Protocol(format!("unknown learner index {index}")))?;
        if *slot == Some(iteration) {
            return Err(Error::Protocol(format!(
                "duplicate upload from learner {} at iteration {iteration}",
                index + 1
            )));
        }
        *slot = Some(iteration);
        self.uploads += 1;
        self.per_learner_uploads[index] += 1;
        self.bytes_up += frame_len(Kind::UploadFull, dim) as u64;
        Ok(())
    }
}

pub trait Transport {
    fn learners(&self) -> usize;

    /// Broadcasts `theta` and collects every learner's reply, ordered by learner id.
    fn exchange(&mut self, iteration: u32, theta: &[f64]) -> Result<Vec<Reply>>;

    fn ledger(&self) -> &CommLedger;
}

/// Learners live in the controller's process and are called directly, concurrently.
pub struct InProcess {
    responders: Vec<Box<dyn Responder>>,
    ledger: CommLedger,
}

impl InProcess {
    pub fn new(responders: Vec<Box<dyn Responder>>) -> Self {
        let ledger = CommLedger::new(responders.len());
        InProcess { responders, ledger }
    }
}

impl Transport for InProcess {
    fn learners(&self) -> usize {
        self.responders.len()
    }

    fn exchange(&mut self, iteration: u32, theta: &[f64]) -> Result<Vec<Reply>> {
        if self.responders.is_empty() {
            return Ok(Vec::new());
        }
        self.ledger.record_broadcast(theta.len());
        let replies: Vec<Reply> = self
            .responders
            .par_iter_mut()
            .map(|r| r.respond(iteration, theta))
            .collect::<Result<_>>()?;
        for (i, reply) in replies.iter().enumerate() {
            if let Some(up) = &reply.upload {
                self.ledger.record_upload(i, iteration, up.vector.len())?;
            }
        }
        Ok(replies)
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}
