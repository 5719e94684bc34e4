//! Seeded random streams.
//!
//! Every random consumer draws from ChaCha8 with the 64-bit top-level seed
//! expanded by `ChaCha8Rng::seed_from_u64` and a fixed stream number chosen
//! from the constants below. ChaCha8 output is specified bit-for-bit, so a
//! given (seed, stream) pair yields the same numbers on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;
pub const STREAM_PRETRAIN_VAL_MASK: u64 = 4;
/// Fine-tuning streams are `STREAM_FINETUNE_BASE + followup * 10_000 + assessment`.
pub const STREAM_FINETUNE_BASE: u64 = 1 << 40;
/// Synthetic patient `i` draws from `STREAM_SYNTH_BASE + i`.
pub const STREAM_SYNTH_BASE: u64 = 1 << 32;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn finetune_stream_id(followup_days: u32, assessment_days: u32) -> u64 {
    STREAM_FINETUNE_BASE + u64::from(followup_days) * 10_000 + u64::from(assessment_days)
}
