//! Seeded random substreams.
//!
//! Every run owns one seed. Independent consumers (environment, agent,
//! adversary, verifier noise) draw from separate ChaCha streams derived from
//! that seed, so switching an agent component on or off never shifts the
//! draws seen by the environment or the verifier.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Substream {
    Env,
    Agent,
    Adversary,
    VerifierNoise,
    Bootstrap,
}

impl Substream {
    fn id(self) -> u64 {
        match self {
            Substream::Env => 1,
            Substream::Agent => 2,
            Substream::Adversary => 3,
            Substream::VerifierNoise => 4,
            Substream::Bootstrap => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Substream::Env => "env",
            Substream::Agent => "agent",
            Substream::Adversary => "adversary",
            Substream::VerifierNoise => "verifier_noise",
            Substream::Bootstrap => "bootstrap",
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a label into a 64-bit key (FNV-1a, stable across platforms).
pub fn label_key(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunStreams {
    seed: u64,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, substream: Substream) -> CountingRng<ChaCha8Rng> {
        self.child(substream, "")
    }

    /// A labelled child of a substream, e.g. `child(Env, "drift")`.
    pub fn child(&self, substream: Substream, label: &str) -> CountingRng<ChaCha8Rng> {
        let key = splitmix64(self.seed ^ splitmix64(label_key(label)));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(substream.id());
        CountingRng::new(rng)
    }
}

/// Wraps a generator and counts the 32/64-bit words it hands out.
#[derive(Debug, Clone)]
pub struct CountingRng<R> {
    inner: R,
    words: u64,
}

impl<R> CountingRng<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, words: 0 }
    }

    pub fn words_drawn(&self) -> u64 {
        self.words
    }
}

impl<R: RngCore> RngCore for CountingRng<R> {
    fn next_u32(&mut self) -> u32 {
        self.words += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.words += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.words += dst.len().div_ceil(8) as u64;
        self.inner.fill_bytes(dst)
    }
}

pub type StreamRng = CountingRng<ChaCha8Rng>;
