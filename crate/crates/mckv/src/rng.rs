//! Counter-derived deterministic random number streams.
//!
//! Every random quantity in the crate is a pure function of
//! `(master seed, scenario index, stream index, position in stream)`.
//! Stream seeds are derived with SplitMix64-style mixing:
//!
//! ```text
//! stream_seed = mix64(master ^ mix64(scenario_index) ^ mix64(stream_index))
//! ```
//!
//! where `mix64` adds the golden-ratio increment `0x9E3779B97F4A7C15` and then
//! applies the SplitMix64 finalizer (xor-shift 30, multiply
//! `0xBF58476D1CE4E5B9`, xor-shift 27, multiply `0x94D049BB133111EB`,
//! xor-shift 31). The increment is included so `mix64(0) != 0` and index 0
//! does not collapse onto the raw master seed.
//!
//! Because streams never share state, particles and scenarios can be simulated
//! in any order and on any number of threads without changing a single bit of
//! any draw. Normal variates use Box–Muller on 53-bit uniforms; the second
//! variate of each pair is cached so the draw sequence is platform-stable.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

/// SplitMix64 finalizer with golden-ratio offset. Bijective on `u64`.
#[inline]
pub fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Stream index reserved for the common-noise path of a scenario.
pub const COMMON_NOISE_STREAM: u64 = 0;

/// Stream index of particle `i` under a salt.
///
/// Salt 0 is the default lineage; nonzero salts give statistically fresh
/// idiosyncratic noise for re-simulations that must share the common noise
/// (matched-scenario comparisons, Markovian re-runs).
#[inline]
pub fn particle_stream(salt: u32, particle_index: usize) -> u64 {
    debug_assert!(particle_index < u32::MAX as usize);
    ((salt as u64) << 32) | (particle_index as u64 + 1)
}

/// Streams used for auxiliary per-particle randomness (open-loop control
/// noise, randomized coefficients) so they never alias the `W` draws.
#[inline]
pub fn auxiliary_stream(salt: u32, particle_index: usize) -> u64 {
    (1 << 63) | particle_stream(salt, particle_index)
}

/// A single SplitMix64 generator positioned on one derived stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
    spare_normal: Option<f64>,
}

impl StreamRng {
    /// Generator seeded directly; prefer [`StreamRng::for_stream`].
    pub fn new(seed: u64) -> Self {
        StreamRng {
            state: seed,
            spare_normal: None,
        }
    }

    /// Generator for `(master, scenario, stream)` per the module-level scheme.
    pub fn for_stream(master_seed: u64, scenario_index: u64, stream_index: u64) -> Self {
        Self::new(mix64(
            master_seed ^ mix64(scenario_index) ^ mix64(stream_index),
        ))
    }

    /// Next raw 64-bit value (SplitMix64 step).
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
        z ^ (z >> 31)
    }

    /// Uniform on the half-open interval `(0, 1]` (safe to pass to `ln`).
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn next_uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        // Map (0,1] onto [lo,hi) by flipping the endpoint.
        lo + (hi - lo) * (1.0 - self.next_uniform())
    }

    /// Standard normal variate (Box–Muller, pair cached).
    #[inline]
    pub fn next_standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal variate with the given mean and standard deviation.
    #[inline]
    pub fn next_normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.next_standard_normal()
    }

    /// Index drawn uniformly from `0..n`.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the n used here (n << 2^64).
        (self.next_u64() % n as u64) as usize
    }
}
