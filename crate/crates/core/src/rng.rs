//! Named, seedable random substreams.
//!
//! A run owns one root seed. Every consumer of randomness asks for a stream by
//! name (`"particles"`, `"resampling"`, `"reference"`, ...) plus an integer
//! counter, and receives an independent ChaCha generator. Per-particle noise
//! uses the ChaCha stream id as the particle index, so the draws for particle
//! `i` at step `k` do not depend on how the work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    root: u64,
}

impl RngStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    fn key(&self, name: &str, counter: u64) -> [u8; 32] {
        let mut key = [0u8; 32];
        let mut h = splitmix(self.root ^ fnv1a(name));
        h = splitmix(h ^ counter.wrapping_mul(GOLDEN));
        for chunk in key.chunks_mut(8) {
            h = splitmix(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        key
    }

    /// Generator for stream `name` at counter `counter` (typically the iteration).
    pub fn stream(&self, name: &str, counter: u64) -> StreamRng {
        ChaCha8Rng::from_seed(self.key(name, counter))
    }

    /// Generator for a single lane (particle, chain) of a stream.
    pub fn lane(&self, name: &str, counter: u64, lane: u64) -> StreamRng {
        let mut rng = self.stream(name, counter);
        rng.set_stream(lane);
        rng
    }

    /// Fills `out` with standard normals for lane `lane` of `name` at `counter`.
    pub fn fill_normal(&self, name: &str, counter: u64, lane: u64, out: &mut [f64]) {
        let mut rng = self.lane(name, counter, lane);
        fill_standard_normal(&mut rng, out);
    }

    /// A child stream family, e.g. one per seed replicate or per evaluation checkpoint.
    pub fn child(&self, name: &str, counter: u64) -> RngStreams {
        RngStreams::new(splitmix(splitmix(self.root ^ fnv1a(name)) ^ counter))
    }
}

pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
