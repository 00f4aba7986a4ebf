//! Portable seeding and random streams.
//!
//! Every random decision made while forging a dataset is drawn from a
//! [`SplitMix64`] stream seeded by [`derive_seed`]. Both are fully specified
//! below so that other implementations can reproduce a dataset bit for bit:
//!
//! - `derive_seed` is 64-bit FNV-1a over the UTF-8 bytes of
//!   `call_id + "|" + turn_index + "|" + master_seed` (decimal integers).
//! - `SplitMix64::next_u64` adds `0x9E3779B97F4A7C15` to the state and returns
//!   the standard splitmix finalizer of the new state.
//! - `below(n)` maps a draw `x` to `(x * n) >> 64` computed in 128 bits.
//! - `shuffle` is Fisher-Yates from the last position down, swapping
//!   position `i` with `below(i + 1)`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Stable per-example seed, independent of iteration order.
pub fn derive_seed(master_seed: u64, call_id: &str, turn_index: usize) -> u64 {
    let key = format!("{call_id}|{turn_index}|{master_seed}");
    fnv1a64(key.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) has no valid outcome");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Uniform integer in `lo..=hi`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Uniform real in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
