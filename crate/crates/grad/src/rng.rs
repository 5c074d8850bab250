//! Deterministic random source.
//!
//! Every stochastic path takes an explicit `RandomSource`; parallel or
//! restartable consumers derive independent sources from (seed, stream keys)
//! instead of sharing generator state.

use ndarray::{ArrayD, IxDyn};
use rand::distributions::uniform::{SampleRange, SampleUniform};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::elem::Elem;

pub struct RandomSource {
    rng: ChaCha12Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Derives a source from a seed and a list of stream keys. Same inputs,
    /// same stream; any differing key gives an independent stream.
    pub fn derive(seed: u64, keys: &[u64]) -> Self {
        // FNV-1a over the keys picks the ChaCha stream.
        let mut h: u64 = 0xcbf29ce484222325;
        for &k in keys {
            for b in k.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(h);
        RandomSource { rng }
    }

    pub fn normal_f64(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn range<T: SampleUniform, R: SampleRange<T>>(&mut self, range: R) -> T {
        self.rng.gen_range(range)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    pub fn normal_array<E: Elem>(&mut self, shape: &[usize], std: f64) -> ArrayD<E> {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(self.normal_f64() * std))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
    }

    /// Fisher–Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    pub fn fill_bytes(&mut self, buf: &mut [u8]) {
        self.rng.fill_bytes(buf);
    }
}
