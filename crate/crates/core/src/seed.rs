//! Counter-based random stream derivation.
//!
//! A stream is identified by four indices `(master, learner, iteration, trajectory)`.
//! Each index is passed through the SplitMix64 finalizer (a bijection on `u64`) and the
//! four results form the 256-bit key of a ChaCha8 generator. Distinct index tuples
//! therefore map to distinct keys, and the output is identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the simulator.
pub type Stream = ChaCha8Rng;

/// Reserved learner index for streams that do not belong to a learner
/// (initial parameters, environment instance draws).
pub const CONTROLLER: u64 = u64::MAX;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(master: u64, learner: u64, iteration: u64, trajectory: u64) -> [u8; 32] {
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip([
        mix64(master),
        mix64(learner ^ 0x6C65_6172_6E65_7200),
        mix64(iteration ^ 0x6974_6572_0000_0000),
        mix64(trajectory ^ 0x7472_616A_0000_0000),
    ]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    seed
}

/// The stream for trajectory `n` of learner `m` at iteration `k`.
pub fn seed_stream(master: u64, learner: u64, iteration: u64, trajectory: u64) -> Stream {
    ChaCha8Rng::from_seed(key(master, learner, iteration, trajectory))
}

/// The four indices naming a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct StreamId {
    pub master: u64,
    pub learner: u64,
    pub iteration: u64,
    pub trajectory: u64,
}

impl StreamId {
    pub fn stream(&self) -> Stream {
        seed_stream(self.master, self.learner, self.iteration, self.trajectory)
    }
}

/// Derives a child master seed, e.g. for Monte-Carlo run `index`.
pub fn derive_master(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ mix64(index.wrapping_mul(GOLDEN_GAMMA) ^ 0x7275_6E00))
}
