//! Reproducible random streams.
//!
//! A stream is identified by a 64-bit seed and a 64-bit stream id. The
//! generator is ChaCha12, whose block counter and stream id are separate
//! words of the cipher state, so distinct stream ids never overlap.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Identifier of the generator algorithm, stored alongside seeds in logs.
pub const ALGORITHM: &str = "chacha12";

/// Single-owner random stream. Parallel callers split with
/// [`RngStream::substream`] instead of sharing.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    /// Stream 0 of `seed`.
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Named child stream. The child id depends only on this stream's id,
    /// the name and the index, never on how many values were drawn.
    pub fn substream(&self, name: &str, index: u64) -> RngStream {
        let mut h = fnv1a(name.as_bytes(), 0xcbf2_9ce4_8422_2325);
        h = fnv1a(&index.to_le_bytes(), h);
        h = fnv1a(&self.stream.to_le_bytes(), h);
        RngStream::with_stream(self.seed, splitmix(h))
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
