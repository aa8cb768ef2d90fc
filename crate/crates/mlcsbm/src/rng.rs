//! Labeled substream RNG built on a counter-based generator.
//!
//! Every sampled object (label vector, each layer graph, covariate matrix,
//! replica, BP initialization, ...) draws from its own substream, derived
//! by hashing a label path into a ChaCha key. Substreams are stable across
//! platforms and independent of the order in which they are opened, so a
//! replica or a single component can be re-drawn in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// A node in a tree of named random substreams.
///
/// Children are addressed by string labels (plus an optional index); the
/// 256-bit state at each node is the SHA-256 hash of the parent state and
/// the label, so distinct label paths yield independent streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedTree {
    state: [u8; 32],
}

impl SeedTree {
    /// Root of the tree for a 64-bit master seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"mlcsbm-root");
        h.update(seed.to_le_bytes());
        Self { state: h.finalize().into() }
    }

    /// Child substream named by `label`.
    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([0u8]);
        h.update(label.as_bytes());
        Self { state: h.finalize().into() }
    }

    /// Child substream named by `label` and an index (for replica loops).
    pub fn child_idx(&self, label: &str, idx: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update([1u8]);
        h.update(label.as_bytes());
        h.update(idx.to_le_bytes());
        Self { state: h.finalize().into() }
    }

    /// Open the stream at this node.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.state)
    }

    /// Collapse this node to a 64-bit seed (for APIs that take one).
    pub fn seed_u64(&self) -> u64 {
        u64::from_le_bytes(self.state[..8].try_into().unwrap())
    }
}
