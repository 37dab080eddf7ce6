//! Seeded, counter-keyed random streams.
//!
//! Every consumer of randomness names its stream by a domain label plus a
//! small tuple of integer keys (timestep, column, signal index). The
//! generator for a key is independent of how many draws other keys made, so
//! results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Vector;

pub const INVERSION: &str = "inversion";
pub const SDEDIT: &str = "sdedit";
pub const SAMPLING: &str = "sampling";
pub const PC_INIT: &str = "pc-init";
pub const EVAL_FEATURES: &str = "eval-features";
pub const MC_ORACLE: &str = "mc-oracle";
pub const REFERENCE: &str = "reference";

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, domain, keys)`.
pub fn stream(seed: u64, domain: &str, keys: &[u64]) -> ChaCha8Rng {
    let base = mix64(seed ^ fnv1a64(domain.as_bytes()));
    let mut key = [0u8; 32];
    let mut state = base;
    for chunk in key.chunks_exact_mut(8) {
        state = mix64(state.wrapping_add(0x9e37_79b9_7f4a_7c15));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut id = 0x6a09_e667_f3bc_c908u64;
    for &k in keys {
        id = mix64(id ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}

/// Derive a child seed, e.g. one per signal in a batch.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    mix64(mix64(seed ^ fnv1a64(domain.as_bytes())) ^ index)
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}
