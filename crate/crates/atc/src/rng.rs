//! Deterministic random number generation.
//!
//! Every source of randomness in a run is a named substream derived from the
//! master seed, so that reruns with the same config and seed are bit-identical
//! and the consumption pattern of one subsystem (say, augmentation) can never
//! shift the stream seen by another (env resets, sampling, init).
//!
//! The generator is PCG-XSH-RR 64/32; substream derivation hashes the stream
//! name into the state and the stream selector with SplitMix64.

/// PCG32 generator with an explicit stream selector.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    inc: u64,
}

const PCG_MULT: u64 = 6364136223846793005;

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a 64
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    /// Master generator for a run.
    pub fn from_seed(seed: u64) -> Self {
        let mut s = seed;
        let state = splitmix64(&mut s);
        let inc = splitmix64(&mut s) | 1;
        let mut rng = Rng { state: 0, inc };
        rng.state = state.wrapping_add(rng.inc);
        rng.next_u32();
        rng
    }

    /// Named substream: deterministic function of (self's identity, name).
    /// Does not advance `self`.
    pub fn substream(&self, name: &str) -> Rng {
        let mut s = self.state ^ self.inc.rotate_left(17) ^ hash_name(name);
        let state = splitmix64(&mut s);
        let inc = splitmix64(&mut s) | 1;
        let mut rng = Rng { state: 0, inc };
        rng.state = state.wrapping_add(rng.inc);
        rng.next_u32();
        rng
    }

    /// Indexed substream, e.g. one per image of a batch.
    pub fn substream_indexed(&self, name: &str, index: u64) -> Rng {
        let mut s = self.state ^ self.inc.rotate_left(17) ^ hash_name(name) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
        let state = splitmix64(&mut s);
        let inc = splitmix64(&mut s) | 1;
        let mut rng = Rng { state: 0, inc };
        rng.state = state.wrapping_add(rng.inc);
        rng.next_u32();
        rng
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        ((self.next_u32() as u64) << 32) | self.next_u32() as u64
    }

    /// Uniform in `[0, n)` via widening multiply (bias < 2^-32, irrelevant here).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u32() as u64) * (n as u64)) >> 32) as usize
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn range_i32(&mut self, lo: i32, hi: i32) -> i32 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as usize) as i32
    }

    /// Uniform in `[0, 1)` with 24 bits of mantissa.
    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in `[-m, m]`.
    pub fn symmetric_f32(&mut self, m: f32) -> f32 {
        (self.uniform_f32() * 2.0 - 1.0) * m
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.uniform_f32() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal_f64(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_f32(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Sample an index from unnormalized non-negative weights.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut target = self.uniform_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
