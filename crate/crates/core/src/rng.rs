//! Counter-based randomness.
//!
//! Every random draw in the crate is a pure function of a key and a counter,
//! so results do not depend on evaluation order or thread layout. The mixing
//! function is the SplitMix64 finalizer; keys are absorbed one 64-bit word at
//! a time.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Absorb one word into a running key.
#[inline(always)]
pub fn absorb(key: u64, word: u64) -> u64 {
    mix64(key ^ mix64(word.wrapping_add(GAMMA)))
}

/// Output `index` of the SplitMix64 stream whose state starts at `base`.
#[inline(always)]
pub fn stream_at(base: u64, index: u64) -> u64 {
    mix64(base.wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)))
}

pub fn key_of_str(tag: &str) -> u64 {
    let fnv = tag.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    mix64(fnv)
}

/// Key identifying a lattice site by its coordinates.
pub fn site_key(coords: &[i64]) -> u64 {
    coords
        .iter()
        .fold(absorb(0x5151_7e5e_ed00_0000, coords.len() as u64), |k, &c| {
            absorb(k, c as u64)
        })
}

/// Map a uniform 64-bit word onto `0..n` (multiply-shift).
#[inline(always)]
pub fn below(word: u64, n: u64) -> u64 {
    ((word as u128 * n as u128) >> 64) as u64
}

/// Uniform in `[0, 1)` with 53 bits of precision.
#[inline(always)]
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential SplitMix64 stream. Used where the consumption order is itself
/// deterministic (queue selection, collapsed-mode draws).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline(always)]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    #[inline(always)]
    pub fn below(&mut self, n: u64) -> u64 {
        below(self.next_u64(), n)
    }
}
