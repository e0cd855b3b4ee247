//! Deterministic, stream-separated randomness.
//!
//! Every consumer of randomness gets its own `RandomSource`, keyed by a
//! (seed, stream) pair. The stream id is usually derived from a component
//! name, so adding a new component (a fresh stream) never perturbs the draws
//! any existing component sees. Sequences are bit-identical for identical
//! (seed, stream) regardless of host or thread schedule: the generator is
//! ChaCha8 with a seed derived by SplitMix64 from the pair, and all
//! distributions go through fixed f64 code paths.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::DenseMatrix;

/// FNV-1a, inlined for a stable cross-platform name hash.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    /// Source for the stream named `name` under the root `seed`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::with_stream_id(seed, fnv1a(name))
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut state = seed ^ stream.rotate_left(17);
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self { seed, stream, rng: ChaCha8Rng::from_seed(bytes) }
    }

    /// Child source for a sub-component; mixes the label into this stream id.
    pub fn derive(&self, label: &str) -> Self {
        Self::with_stream_id(self.seed, self.stream.rotate_left(29) ^ fnv1a(label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in [0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Standard normal draw.
    pub fn next_gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_uniform() < p
    }

    /// Uniform integer in [0, bound).
    pub fn next_index(&mut self, bound: usize) -> usize {
        self.rng.random_range(0..bound)
    }

    pub fn gaussian_vec(&mut self, len: usize, sigma: f64) -> Vec<f64> {
        (0..len).map(|_| sigma * self.next_gaussian()).collect()
    }

    /// Matrix with i.i.d. N(0, sigma^2) entries, drawn in row-major order.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> DenseMatrix {
        let data = self.gaussian_vec(rows * cols, sigma);
        DenseMatrix::from_vec(rows, cols, data).expect("gaussian draws are finite")
    }

    /// `count` distinct (row, col) coordinates in an m x n grid, sorted
    /// row-major. Patterns are fixed at construction; only values train.
    pub fn sparse_mask(&mut self, m: usize, n: usize, count: usize) -> Vec<(usize, usize)> {
        assert!(count <= m * n, "mask larger than the matrix");
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < count {
            let i = self.next_index(m);
            let j = self.next_index(n);
            chosen.insert((i, j));
        }
        chosen.into_iter().collect()
    }
}
