//! Counter-based deterministic random stream.
//!
//! Every draw is a pure function of (seed, counter), so a stream can be
//! checkpointed by storing two u64s and resumed bit-exactly. The normal
//! sampler avoids libm transcendentals (which are not correctly rounded on
//! every platform); the only non-arithmetic primitive is sqrt, which IEEE 754
//! requires to be exact.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ln(x) for x in (0, 1]: frexp to [1,2), then 2*atanh((m-1)/(m+1)) by series.
/// Pure +,-,*,/ so results are bit-identical across platforms.
fn det_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7FF) as i64 - 1023;
    let mantissa = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | (1023u64 << 52));
    let z = (mantissa - 1.0) / (mantissa + 1.0);
    let z2 = z * z;
    let mut term = z;
    let mut sum = 0.0;
    let mut k = 1u32;
    // |z| <= 1/3 so terms shrink by >= 9x; 40 terms is far past f64 precision.
    while k < 80 {
        sum += term / f64::from(k);
        term *= z2;
        k += 2;
    }
    2.0 * sum + exp as f64 * std::f64::consts::LN_2
}

/// Deterministic counter-based random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Derive an independent stream from a label; used to give data sampling,
    /// corruption, dropout etc. their own checkpointable counters.
    pub fn substream(&self, tag: &str) -> RngState {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        for b in tag.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        RngState::new(splitmix64(self.seed ^ h))
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.seed ^ splitmix64(self.counter));
        self.counter += 1;
        out
    }

    /// Uniform in [0, 1).
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    pub fn uniform<T: Scalar>(&mut self) -> T {
        T::from_f64(self.uniform_f64())
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via the Marsaglia polar method.
    pub fn normal_f64(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform_f64() - 1.0;
            let v = 2.0 * self.uniform_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * det_ln(s) / s).sqrt();
            }
        }
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        T::from_f64(self.normal_f64())
    }

    /// Normal truncated to |z| <= 2, scaled by `std`.
    pub fn trunc_normal_f64(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal_f64();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Fisher-Yates shuffle of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}
