//! Sub-seed derivation. Every random stream is `root ^ ROLE` for a fixed role constant,
//! optionally mixed with an index, so no component touches a global RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ROLE_INIT: u64 = 0x494e_4954_0000_0001;
pub const ROLE_SHUFFLE: u64 = 0x5348_5546_0000_0002;
pub const ROLE_DROPOUT: u64 = 0x4452_4f50_0000_0003;
pub const ROLE_SYNTH_MIX: u64 = 0x4d49_5845_0000_0004;
pub const ROLE_SYNTH_SAMPLE: u64 = 0x5341_4d50_0000_0005;
pub const ROLE_SYNTH_ANOMALY: u64 = 0x414e_4f4d_0000_0006;
pub const ROLE_FEW_SHOT: u64 = 0x4645_5753_0000_0007;
pub const ROLE_SYNTH_ARTIFACT: u64 = 0x4152_5446_0000_0008;

/// SplitMix64 finalizer; spreads nearby indices across the seed space.
pub fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, role: u64) -> u64 {
    root ^ role
}

pub fn derive_indexed(root: u64, role: u64, index: u64) -> u64 {
    mix(derive(root, role) ^ mix(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
