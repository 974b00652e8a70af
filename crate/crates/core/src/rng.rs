//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 keystream selected by `(seed, stream id)`. Gaussian
//! increments are drawn with a fixed number of keystream words per call, so the
//! normals of step `k` of path `j` sit at a fixed keystream offset and do not
//! depend on scheduling, worker count, or what other paths consumed.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AUX_BIT: u64 = 1 << 63;
const TWO_PI: f64 = std::f64::consts::TAU;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Stream used for the Brownian increments of path `path`.
    pub fn for_path(seed: u64, path: u64) -> Self {
        assert!(path & AUX_BIT == 0, "path index too large");
        Self::raw(seed, path)
    }

    /// Auxiliary stream (sampling, permutations, validation) that never
    /// collides with a path stream.
    pub fn auxiliary(seed: u64, tag: u64) -> Self {
        Self::raw(seed, AUX_BIT | tag)
    }

    fn raw(seed: u64, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        Self { rng }
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * INV_2_53
    }

    /// Uniform on (0, 1].
    fn uniform_positive(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * INV_2_53
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, bound: usize) -> usize {
        ((self.uniform() * bound as f64) as usize).min(bound - 1)
    }

    /// Box–Muller pair.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let r = (-2.0 * self.uniform_positive().ln()).sqrt();
        let theta = TWO_PI * self.uniform();
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    /// Fills `out` with standard normals, consuming exactly
    /// `words_per_fill(out.len())` keystream words.
    pub fn fill_normals(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal_pair().0;
        }
    }

    /// Jumps to the start of fill number `index` for fills of length `len`.
    pub fn seek_fill(&mut self, index: u64, len: usize) {
        self.rng
            .set_word_pos(index as u128 * words_per_fill(len) as u128);
    }
}

/// 32-bit keystream words consumed by one `fill_normals` call of length `len`.
pub fn words_per_fill(len: usize) -> u64 {
    // two u64 draws per Box–Muller pair
    len.div_ceil(2) as u64 * 4
}
