//! Seeded, stream-labelled random numbers.
//!
//! Each [`Rng`] is a ChaCha8 generator keyed by a 64-bit seed with its
//! stream id derived from a textual label (`"init"`, `"noise"`, ...) and an
//! optional sub-index. The same `(seed, label, index)` and the same draw
//! position always yield the same value.
//!
//! Gaussian draws use the Box–Muller transform over two uniforms with 53
//! bits of precision; both outputs of each transform are consumed.

use core::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::{Scalar, Tensor};

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finaliser, used to combine stream labels with sub-indices.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream: &str) -> Self {
        Self::with_stream_id(seed, fnv1a(stream))
    }

    /// Independent generator for item `index` of a labelled stream, e.g.
    /// one per training step or per crossbar window.
    pub fn substream(seed: u64, stream: &str, index: u64) -> Self {
        Self::with_stream_id(seed, mix(fnv1a(stream) ^ mix(index.wrapping_add(1))))
    }

    fn with_stream_id(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { inner, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. Gaussian tensor with the given mean and standard deviation.
pub fn seeded_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], mean: f64, sigma: f64) -> Tensor<T> {
    if sigma == 0.0 {
        return Tensor::full(shape, T::of(mean));
    }
    Tensor::from_fn(shape, |_| T::of(mean + sigma * rng.normal()))
}

/// I.i.d. uniform tensor on `[lo, hi)`.
pub fn seeded_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.uniform_range(lo, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: [u64; 4] = core::array::from_fn(|_| 0);
        let mut r1 = Rng::new(7, "noise");
        let mut r2 = Rng::new(7, "noise");
        let mut r3 = Rng::new(7, "init");
        let x1 = a.map(|_| r1.next_u64());
        let x2 = a.map(|_| r2.next_u64());
        let x3 = a.map(|_| r3.next_u64());
        assert_eq!(x1, x2);
        assert_ne!(x1, x3);
        assert_ne!(
            Rng::substream(7, "noise", 0).next_u64(),
            Rng::substream(7, "noise", 1).next_u64()
        );
    }

    #[test]
    fn zero_sigma_gives_constant() {
        let mut rng = Rng::new(1, "noise");
        let t: Tensor<f64> = seeded_normal(&mut rng, &[3, 4], 0.25, 0.0);
        assert!(t.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let mut rng = Rng::new(2024, "noise");
        let (mean, sigma) = (1.5, 2.0);
        let t: Tensor<f64> = seeded_normal(&mut rng, &[1_000_000], mean, sigma);
        let m = t.sum() / 1e6;
        assert!((m - mean).abs() <= 4.0 * sigma / 1000.0, "mean {m}");
        let var = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 1e6;
        assert!((var.sqrt() - sigma).abs() < 0.01 * sigma);
    }

    #[test]
    fn identical_seeds_bit_identical() {
        let a: Tensor<f32> = seeded_normal(&mut Rng::new(9, "noise"), &[64], 0.0, 1.0);
        let b: Tensor<f32> = seeded_normal(&mut Rng::new(9, "noise"), &[64], 0.0, 1.0);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<alloc::vec::Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(3, "shuffle");
        for n in 1..50 {
            assert!(rng.below(n) < n);
        }
    }
}
