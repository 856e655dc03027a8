//! Seeded random streams.
//!
//! Every stochastic step in a run draws from an [`Rng`] derived from the
//! experiment seed through [`Rng::split`]. Streams are ChaCha8 keyed by a
//! 64-bit seed, so a given `(seed, tag)` pair yields the same sequence on
//! every platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream keyed by `(seed, tag)`.
    ///
    /// The result depends only on the seed this stream was created with, not
    /// on how many values have been drawn from it.
    pub fn split(&self, tag: &str) -> Rng {
        assert!(!tag.is_empty(), "stream tag must be nonempty");
        Rng::new(derive_seed(self.seed, tag))
    }
}

/// Free-function form of [`Rng::split`].
pub fn split_stream(rng: &Rng, tag: &str) -> Rng {
    rng.split(tag)
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded into the seed and finished with splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn draws(rng: &mut Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.gen::<u64>()).collect()
    }

    #[test]
    fn same_seed_and_tag_repeat() {
        let root = Rng::new(7);
        let a = draws(&mut root.split("partition"), 10);
        let b = draws(&mut split_stream(&root, "partition"), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn split_ignores_parent_position() {
        let mut root = Rng::new(7);
        let before = draws(&mut root.split("x"), 4);
        let _ = draws(&mut root, 100);
        assert_eq!(before, draws(&mut root.split("x"), 4));
    }

    #[test]
    fn different_tags_differ() {
        let root = Rng::new(7);
        let a = root.split("partition").gen::<u64>();
        let b = root.split("pacing").gen::<u64>();
        assert_ne!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = draws(&mut Rng::new(7).split("tag"), 10);
        let b = draws(&mut Rng::new(8).split("tag"), 10);
        assert_ne!(a, b);
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pinned so an accidental change to seed derivation is caught.
        let first = Rng::new(7).split("partition").gen::<u64>();
        assert_eq!(first, 16188681015088597691);
        assert_ne!(first, Rng::new(7).gen::<u64>());
    }

    #[test]
    #[should_panic]
    fn empty_tag_rejected() {
        Rng::new(1).split("");
    }
}
