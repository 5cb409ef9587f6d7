//! Counter-based splittable random streams.
//!
//! A stream is identified by a 64-bit key; draw `i` is a bijective mix of
//! `key + (i + 1) * GOLDEN_GAMMA`, i.e. the SplitMix64 sequence started at the
//! key. Children are derived from `(key, child_key)` alone, so splitting is O(1)
//! and does not depend on how far the parent has advanced.
//!
//! Every non-uniform sampler in the crate is built on [`RngStream::draw_uniform`]
//! and [`RngStream::standard_normal`], which consumes exactly one uniform via
//! the inverse normal CDF. Sharing a stream therefore shares randomness, which
//! is what common-random-number coupling relies on.

use crate::real::Real;
use crate::special;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const SPLIT_SALT: u64 = 0xd1b5_4a32_d192_ed03;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    position: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words drawn so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Child stream determined by `(self.seed(), key)` only.
    pub fn split(&self, key: u64) -> RngStream {
        let k = mix64(key.wrapping_mul(SPLIT_SALT).wrapping_add(GOLDEN_GAMMA));
        RngStream::new(mix64(self.seed ^ k).wrapping_add(k.rotate_left(17)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        mix64(self.seed.wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn draw_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    #[inline]
    pub fn draw_open_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate from one open uniform.
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        special::norm_ppf(self.draw_open_uniform())
    }

    /// Open uniform in the working precision, guaranteed strictly inside `(0, 1)`.
    #[inline]
    pub fn uniform<T: Real>(&mut self) -> T {
        let u = T::lit(self.draw_open_uniform());
        if u >= T::one() {
            T::one() - T::epsilon()
        } else if u <= T::zero() {
            T::min_positive_value()
        } else {
            u
        }
    }

    #[inline]
    pub fn normal<T: Real>(&mut self) -> T {
        T::lit(self.standard_normal())
    }

    /// Exponential(1) variate, `-ln(1-u)`.
    #[inline]
    pub fn exponential<T: Real>(&mut self) -> T {
        let u: T = self.uniform();
        -(-u).ln_1p()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.draw_uniform() * n as f64) as usize).min(n - 1)
    }
}
