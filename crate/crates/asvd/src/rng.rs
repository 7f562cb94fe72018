//! Deterministic random number generation.
//!
//! Everything seeded in this crate flows through [`SplitMix64`], so a seed
//! plus a tensor name fully determines the generated values on every
//! platform. The README documents the exact update function for
//! reimplementation in other languages.

/// SplitMix64 generator (Steele, Lea, Flood 2014).
///
/// State advances by the golden-gamma constant; output is the finalizer mix
/// of the new state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw from `[0, 1)` using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer below `n`. Modulo bias is negligible for the small
    /// ranges used here (vocabulary sizes, index picks).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller. Used only by tests and synthetic
    /// ensembles, not by model synthesis.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// FNV-1a 64-bit hash of a byte string.
pub fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Independent stream for a named tensor: state starts at `seed XOR fnv1a64(name)`.
pub fn stream(seed: u64, name: &str) -> SplitMix64 {
    SplitMix64::new(seed ^ fnv1a64(name))
}
