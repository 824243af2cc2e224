//! Seeded random streams.
//!
//! All randomness descends from one root seed through a tree of labelled
//! streams (root -> trial -> stage -> iteration -> rollout). A child seed is
//! `splitmix64(parent ^ splitmix64(label + 1))`, so sibling streams are
//! decorrelated and a stream is a pure function of its path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit tag for a textual label (FNV-1a).
pub fn label_tag(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A node in the stream tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stream {
    seed: u64,
}

impl Stream {
    pub fn root(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, index: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(index.wrapping_add(1))),
        }
    }

    pub fn named(&self, label: &str) -> Self {
        self.child(label_tag(label))
    }

    pub fn rng(&self) -> SimRng {
        SimRng::seed_from_u64(self.seed)
    }
}
