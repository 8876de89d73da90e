//! Counter-based random draws.
//!
//! Every draw is a pure function of `(key, index)`, so results do not depend on
//! the order in which pixels, rows or samples are visited.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b.wrapping_add(GOLDEN)))
}

/// Stable 64-bit hash of a seed and a string label (FNV-1a folded through SplitMix64).
pub fn stable_hash(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    combine(seed, h)
}

#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: combine(seed, stream),
        }
    }

    pub fn bits(&self, index: u64) -> u64 {
        combine(self.key, index)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&self, index: u64) -> f64 {
        (self.bits(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller over the counter pair (2i, 2i+1).
    pub fn normal(&self, index: u64) -> f64 {
        let u1 = 1.0 - self.uniform(2 * index); // (0, 1]
        let u2 = self.uniform(2 * index + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in the closed range [lo, hi].
    pub fn range_i64(&self, index: u64, lo: i64, hi: i64) -> i64 {
        let span = (hi - lo + 1) as f64;
        lo + ((self.uniform(index) * span).floor() as i64).min(hi - lo)
    }
}
