//! Seeded, splittable random streams.
//!
//! Every stochastic operation takes an explicit generator drawn from a
//! [`SeedSource`]. Streams are addressed by a label plus an index path, so a
//! run is reproducible from one integer seed and independent consumers never
//! share state.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSource {
    seed: u64,
}

impl SeedSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the stream named `label`.
    pub fn stream(&self, label: &str) -> StreamRng {
        self.stream_at(label, &[])
    }

    /// Generator for the stream named `label` at position `path`
    /// (e.g. `[epoch, batch]`).
    pub fn stream_at(&self, label: &str, path: &[u64]) -> StreamRng {
        let mut rng = StreamRng::seed_from_u64(self.seed);
        rng.set_stream(stream_id(label, path));
        rng
    }

    /// Child source, for handing a whole sub-experiment its own seed space.
    pub fn split(&self, label: &str, index: u64) -> SeedSource {
        SeedSource {
            seed: splitmix(self.seed ^ stream_id(label, &[index])),
        }
    }
}

// FNV-1a over the label bytes and path words, finished with splitmix64.
fn stream_id(label: &str, path: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in label.bytes() {
        eat(b);
    }
    eat(0xff);
    for word in path {
        for b in word.to_le_bytes() {
            eat(b);
        }
    }
    splitmix(h)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_label_same_draws() {
        let src = SeedSource::new(7);
        let a: Vec<u64> = (0..4).map(|_| src.stream("x").random()).collect();
        let mut r1 = src.stream("x");
        let mut r2 = src.stream("x");
        let b: Vec<u64> = (0..4).map(|_| r1.random()).collect();
        let c: Vec<u64> = (0..4).map(|_| r2.random()).collect();
        assert_eq!(b, c);
        // fresh generator per call, so the first draw repeats
        assert!(a.iter().all(|v| *v == a[0]));
    }

    #[test]
    fn labels_and_paths_separate_streams() {
        let src = SeedSource::new(7);
        let x: u64 = src.stream("x").random();
        let y: u64 = src.stream("y").random();
        let x1: u64 = src.stream_at("x", &[1]).random();
        let x2: u64 = src.stream_at("x", &[2]).random();
        assert_ne!(x, y);
        assert_ne!(x1, x2);
        assert_ne!(src.split("cell", 0).seed(), src.split("cell", 1).seed());
    }
}
