// SPDX-License-Identifier: Apache-2.0

//! Seed derivation.
//!
//! Every random stream in a run is derived from one root seed:
//!
//! ```text
//! stage_key  = fnv1a64(stage_name)
//! seed(i)    = splitmix64(splitmix64(root ^ stage_key) + i)
//! ```
//!
//! where `i` is the item index within the stage (sample index, permutation
//! seed index, and so on) and additions wrap. Streams for different stages
//! or items are therefore independent of evaluation order.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a64(stage)).wrapping_add(index))
}
