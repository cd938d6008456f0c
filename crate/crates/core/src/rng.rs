//! Counter-based random streams keyed on (seed, client, round).
//!
//! Each stream is a ChaCha8 keystream whose key is derived from the tuple, so
//! a stream can be reconstructed from its coordinates alone and parallel
//! workers never share generator state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags so that the same (client, round) can own several
/// independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Default = 0,
    LocalTraining = 1,
    Compression = 2,
    Attack = 3,
    Data = 4,
    Init = 5,
    Oracle = 6,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(words: &[u64]) -> [u8; 32] {
    let mut state = 0x5052_6f42_6974_2b00;
    for &w in words {
        state ^= w;
        splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Deterministic random stream for one (seed, client, round) triple.
#[derive(Debug, Clone)]
pub struct RngStream {
    global_seed: u64,
    client_id: u64,
    round: u64,
    draw_counter: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(global_seed: u64, client_id: u64, round: u64) -> Self {
        Self::with_domain(global_seed, Domain::Default, client_id, round)
    }

    pub fn with_domain(global_seed: u64, domain: Domain, client_id: u64, round: u64) -> Self {
        let key = derive_key(&[global_seed, domain as u64, client_id, round]);
        Self {
            global_seed,
            client_id,
            round,
            draw_counter: 0,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn client_id(&self) -> u64 {
        self.client_id
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Number of 32/64-bit words consumed so far.
    pub fn draw_counter(&self) -> u64 {
        self.draw_counter
    }

    /// Uniform draw on [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.standard_normal()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the residual bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.draw_counter += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draw_counter += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draw_counter += dst.len().div_ceil(8) as u64;
        self.inner.fill_bytes(dst)
    }
}
