//! Counter-based random streams.
//!
//! A [`SeededStream`] is a key into the Philox-2x64-10 block function. Every
//! draw is addressed by a counter, so the value at index `i` never depends on
//! how many other draws were made, in which order, or on which thread.
//! Substreams are derived by hashing a path index into the key.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::math;

const PHILOX_M: u64 = 0xD2B7_4407_B1CE_6E93;
const PHILOX_W: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(PHILOX_W);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn philox2x64(mut ctr: [u64; 2], mut key: u64) -> [u64; 2] {
    for _ in 0..10 {
        let prod = (ctr[0] as u128) * (PHILOX_M as u128);
        let hi = (prod >> 64) as u64;
        let lo = prod as u64;
        ctr = [hi ^ key ^ ctr[1], lo];
        key = key.wrapping_add(PHILOX_W);
    }
    ctr
}

/// A reproducible, randomly addressable stream of random numbers.
///
/// Identified by a root seed and a path of substream indices. Values are
/// `Copy`; deriving a substream never mutates the parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeededStream {
    root_seed: u64,
    key: u64,
    depth: u32,
}

impl SeededStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            key: splitmix(root_seed ^ 0x6866_645f_726e_6731),
            depth: 0,
        }
    }

    /// Stream for `root_seed` followed by every index in `path`.
    pub fn from_path(root_seed: u64, path: &[u64]) -> Self {
        path.iter()
            .fold(Self::new(root_seed), |s, &p| s.substream(p))
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    /// Number of path components below the root.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Child stream `index`. Distinct indices give independent streams.
    pub fn substream(&self, index: u64) -> Self {
        let salt = splitmix(index ^ ((self.depth as u64 + 1) << 56));
        Self {
            root_seed: self.root_seed,
            key: splitmix(self.key ^ salt.rotate_left(17)),
            depth: self.depth + 1,
        }
    }

    #[inline]
    fn block(&self, counter: u64) -> [u64; 2] {
        philox2x64([counter, 0], self.key)
    }

    /// Raw 64 random bits at `index`.
    #[inline]
    pub fn u64_at(&self, index: u64) -> u64 {
        self.block(index)[0]
    }

    /// Uniform on `[0, 1)` at `index`, 53 bits of precision.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * TWO_POW_M53
    }

    /// Standard normal at `index` (Box-Muller on one Philox block).
    #[inline]
    pub fn normal_at(&self, index: u64) -> f64 {
        let [a, b] = self.block(index);
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((a >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (b >> 11) as f64 * TWO_POW_M53;
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(core::f64::consts::TAU * u2)
    }

    /// The first `n` normals of this stream.
    pub fn normals(&self, n: usize) -> Vec<f64> {
        (0..n as u64).map(|i| self.normal_at(i)).collect()
    }

    /// The first `n` uniforms of this stream.
    pub fn uniforms(&self, n: usize) -> Vec<f64> {
        (0..n as u64).map(|i| self.uniform_at(i)).collect()
    }
}

/// `n` i.i.d. standard normal draws from `stream`.
pub fn sample_standard_normal(stream: &SeededStream, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("sample_standard_normal needs n >= 1"));
    }
    Ok(stream.normals(n))
}
