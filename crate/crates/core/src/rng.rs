//! Named random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const STREAM_SIMULATE: &str = "simulate";
pub const STREAM_FLOW_INIT: &str = "flow-init";
pub const STREAM_STEP2_NOISE: &str = "step2-noise";
pub const STREAM_MCMC: &str = "mcmc";
pub const STREAM_ABC: &str = "abc";

/// Independent generator for `(seed, name)`. Adding a stream never shifts
/// the draws of another one.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
