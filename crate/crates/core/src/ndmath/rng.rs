use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded counter-based generator with named independent streams.
///
/// Streams derive from `(seed, stream id)` only, so the draws of one stream
/// do not depend on how calls to other streams interleave.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Named stream under the same seed.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::with_stream(seed, fnv1a(name.as_bytes(), FNV_OFFSET))
    }

    /// Child stream derived from this stream's identity (not its position).
    pub fn fork(&self, name: &str) -> Self {
        let h = fnv1a(&self.stream.to_le_bytes(), FNV_OFFSET);
        Self::with_stream(self.seed, fnv1a(name.as_bytes(), h))
    }

    /// Child stream for item `index` under `name`.
    pub fn fork_indexed(&self, name: &str, index: u64) -> Self {
        let h = fnv1a(&self.stream.to_le_bytes(), FNV_OFFSET);
        let h = fnv1a(name.as_bytes(), h);
        Self::with_stream(self.seed, fnv1a(&index.to_le_bytes(), h))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        xs.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `[0, n)`, uniformly, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Standard Gumbel variate.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().max(f64::MIN_POSITIVE);
        -(-u.ln()).ln()
    }
}
