//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a stream addressed by a master
//! seed plus a path of integers (run, iteration, timepoint, particle, ...).
//! Streams are independent of evaluation order, so results do not depend on
//! how work is split across threads.

use rand_pcg::Pcg64Mcg;

pub type StreamRng = Pcg64Mcg;

/// Stream-path tags that keep different consumers of one seed apart.
pub mod tag {
    pub const STATE: u64 = 0x5354_4154;
    pub const ITEM: u64 = 0x4954_454d;
    pub const RESAMPLE: u64 = 0x5245_5341;
    pub const PARTICLE: u64 = 0x5041_5254;
    pub const RUN: u64 = 0x5255_4e00;
    pub const FINAL: u64 = 0x4649_4e41;
    pub const SLICE: u64 = 0x534c_4943;
    pub const REPLICATE: u64 = 0x5245_504c;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a seed and a path into a single 64-bit key.
#[inline]
pub fn mix(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// Independent generator for `(seed, path...)`.
#[inline]
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let hi = mix(seed, path);
    let lo = splitmix64(hi ^ 0xd1b5_4a32_d192_ed03);
    Pcg64Mcg::new(((hi as u128) << 64) | lo as u128)
}
