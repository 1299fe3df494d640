//! Deterministic random streams.
//!
//! Every artifact-level run carries one seed. Modules derive their own
//! ChaCha streams from it so that adding draws in one module never shifts
//! another module's sequence, and chunked parallel work stays reproducible
//! regardless of the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains, one per consumer.
pub mod domain {
    pub const MEDIUM: u64 = 1;
    pub const TM_NOISE: u64 = 2;
    pub const FRAMES: u64 = 3;
    pub const DARK: u64 = 4;
    pub const PLATEAU: u64 = 5;
    pub const SCREENS: u64 = 6;
    /// Cross-talk triggers, kept apart from photon events so paired runs
    /// with and without cross-talk share the same primaries.
    pub const CROSSTALK: u64 = 7;
    pub const SHAPING: u64 = 8;
}

/// Independent stream `index` within `domain` for the given run seed.
pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mixed = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(index);
    rng
}
