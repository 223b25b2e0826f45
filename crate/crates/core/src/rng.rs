//! Seeded randomness.
//!
//! Every random decision in the crate goes through [`Rng`], a ChaCha8
//! stream. Independent sub-streams (per entity, per run phase) are derived
//! with [`derive_seed`] so that work split across entities stays
//! reproducible regardless of evaluation order.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw by Box-Muller, one per call.
///
/// Computed with `libm` alone so that a seed yields the same values however
/// the crate graph is built; samplers that defer to `num-traits` switch to
/// the platform's math library whenever another crate enables its `std`
/// feature.
pub fn standard_normal(rng: &mut Rng) -> f64 {
    // In (0, 1] so the logarithm stays finite.
    let u = 1.0 - rng.random::<f64>();
    let v = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u)) * libm::cos(core::f64::consts::TAU * v)
}

/// SplitMix64 finalizer applied to `seed ^ (index * golden)`.
///
/// Used to derive per-entity or per-phase seeds; `derive_seed(s, i)` for
/// distinct `i` gives well-separated, deterministic streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Complete, restorable position of a [`Rng`] stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
