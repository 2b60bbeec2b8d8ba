//! Seed splitting.
//!
//! Every random draw comes from a ChaCha8 generator keyed by the master seed,
//! with the 64-bit stream id selecting an independent sequence:
//!
//! ```text
//! stream = domain << 48 | a << 24 | b      (a, b < 2^24)
//! ```
//!
//! so a subject's or platform's draws never depend on how many other
//! subjects were generated, or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Values are part of the reproducibility contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Anatomy = 1,
    PlatformMixing = 2,
    PlatformGain = 3,
    PlatformNoise = 4,
    Split = 5,
    Shuffle = 6,
    Init = 7,
}

pub fn stream(master: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    debug_assert!(a < 1 << 24 && b < 1 << 24);
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((domain as u64) << 48) | ((a & 0xFF_FFFF) << 24) | (b & 0xFF_FFFF));
    rng
}
