//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed. Seeds
//! for replications and roles are derived from one base seed with the
//! SplitMix64 finalizer, so streams never overlap by construction and a run is
//! reproducible from its base seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer (full 64-bit avalanche).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for child stream `index` of `base`.
#[inline]
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

/// Distinct consumers of randomness within one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Data,
    Noise,
    Fit,
    Sandwich,
    Baseline,
    Holdout,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Data => 0x6461_7461,
            Role::Noise => 0x6e6f_6973,
            Role::Fit => 0x6669_7474,
            Role::Sandwich => 0x7361_6e64,
            Role::Baseline => 0x6261_7365,
            Role::Holdout => 0x686f_6c64,
        }
    }
}

/// Seed for `role` in replication `rep` of a run with `base` seed.
pub fn role_seed(base: u64, rep: u64, role: Role) -> u64 {
    derive_seed(derive_seed(base, rep), role.tag())
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
