//! Teacher-explorer-student learning for open set recognition.
//!
//! A teacher classifier is distilled into soft targets that carry an explicit
//! "unknown" share, a GAN explorer generates samples the student currently
//! considers unknown, and a one-vs-rest student learns from both. Test
//! samples are accepted or rejected with calibrated collective-decision
//! thresholds.

pub mod datagen;
pub mod distill;
pub mod error;
pub mod explorer;
pub mod harness;
pub mod nn;
pub mod recognition;
pub mod student;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere randomness is consumed.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
