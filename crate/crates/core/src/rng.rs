//! Named random substreams derived from one root seed.
//!
//! Every stochastic component (fold assignment, weight initialisation,
//! mini-batch shuffling, synthetic data) draws from its own stream so that
//! adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// A child stream; `derive("init").derive("fold3")` is stable across runs.
    pub fn derive(&self, name: &str) -> SeedStream {
        SeedStream {
            root: splitmix64(self.root ^ fnv1a(name.as_bytes())),
        }
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.derive(name).root)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
