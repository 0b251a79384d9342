//! Reproducible, splittable random streams.
//!
//! A stream is the pair `(seed, stream_id)`. The generator behind it is
//! ChaCha8, which is counter based: distinct stream ids select disjoint
//! keystreams for the same key, so streams can be handed to any worker
//! without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Tags for the independent noise sources of one path.
pub mod tag {
    pub const SLOW: u64 = 1;
    pub const FAST: u64 = 2;
    pub const FROZEN: u64 = 3;
    pub const INNER: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const EXPERIMENT: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Derives the stream for `(tag, index)` below this one. Children of
    /// different parents, tags or indices get different ids.
    pub fn child(&self, tag: u64, index: u64) -> Self {
        let h = splitmix64(self.stream_id ^ splitmix64(tag.wrapping_mul(0x2545_f491_4f6c_dd1d)));
        Self {
            seed: self.seed,
            stream_id: splitmix64(h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        }
    }

    /// Stream of path `i` in an ensemble rooted at this stream.
    pub fn path(&self, i: usize) -> Self {
        self.child(tag::EXPERIMENT, i as u64)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_stream_same_sequence() {
        let s = RngStream::with_stream(7, 11);
        let a: Vec<u64> = (0..16).map({
            let mut r = s.rng();
            move |_| r.random()
        }).collect();
        let mut r = s.rng();
        let b: Vec<u64> = (0..16).map(|_| r.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn children_differ() {
        let s = RngStream::new(1);
        let ids: std::collections::HashSet<u64> = (0..1000)
            .flat_map(|i| [s.child(tag::SLOW, i).stream_id, s.child(tag::FAST, i).stream_id])
            .collect();
        assert_eq!(ids.len(), 2000);
        let mut a = s.child(tag::SLOW, 0).rng();
        let mut b = s.child(tag::FAST, 0).rng();
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let n = 200_000;
        let mut a = RngStream::with_stream(3, 0).rng();
        let mut b = RngStream::with_stream(3, 1).rng();
        let mut sum = 0.0;
        for _ in 0..n {
            let u: f64 = a.random::<f64>() - 0.5;
            let v: f64 = b.random::<f64>() - 0.5;
            sum += u * v;
        }
        // Var(uv) = 1/144.
        let corr = sum / n as f64;
        let se = (1.0 / 144.0 / n as f64).sqrt();
        assert!(corr.abs() < 4.0 * se, "corr {corr}");
    }
}
