//! Keyed, counter-based randomness for stochastic rounding.
//!
//! A draw is a pure function of `(seed, tag, index, step)`: the experiment
//! seed, a tensor tag, the flat element index and the global training step.
//! No generator state is shared, so results do not depend on evaluation
//! order or how work is split across threads.

/// Source of 64-bit rounding draws, addressed by flat element index.
///
/// A draw `d` stands for the uniform value `d / 2^64`.
pub trait DrawSource: Sync {
    fn draw(&self, index: u64) -> u64;

    /// Tag given to tensors produced from this stream.
    fn tag(&self) -> &str {
        ""
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes; stable across platforms and releases.
pub fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Root of all rounding randomness for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundRng {
    seed: u64,
}

impl RoundRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, tag: &str, step: u64) -> RoundStream {
        RoundStream::new(self.seed, tag, step)
    }

    /// One keyed draw.
    pub fn draw(&self, tag: &str, index: u64, step: u64) -> u64 {
        self.stream(tag, step).draw(index)
    }

    /// One keyed draw as an `f64` in `[0, 1)` (53-bit resolution).
    pub fn uniform(&self, tag: &str, index: u64, step: u64) -> f64 {
        to_unit(self.draw(tag, index, step))
    }
}

/// `d / 2^64` truncated to 53 bits.
pub fn to_unit(d: u64) -> f64 {
    (d >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Draws for one `(seed, tag, step)` key; indexed by element.
#[derive(Debug, Clone)]
pub struct RoundStream {
    k0: u64,
    k1: u64,
    tag: String,
}

impl RoundStream {
    pub fn new(seed: u64, tag: &str, step: u64) -> Self {
        let t = tag_hash(tag);
        let k0 = mix64(seed ^ mix64(t ^ mix64(step.wrapping_add(GOLDEN))));
        let k1 = mix64(k0 ^ 0x6a09_e667_f3bc_c909);
        Self { k0, k1, tag: tag.to_string() }
    }
}

impl DrawSource for RoundStream {
    #[inline]
    fn draw(&self, index: u64) -> u64 {
        let x = mix64(index.wrapping_mul(GOLDEN).wrapping_add(self.k0));
        mix64(x ^ self.k1)
    }

    fn tag(&self) -> &str {
        &self.tag
    }
}

/// The same draw for every element. Useful for nearest rounding, where
/// draws are ignored, and for tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstDraw(pub u64);

impl DrawSource for ConstDraw {
    fn draw(&self, _index: u64) -> u64 {
        self.0
    }
}

/// Pre-recorded draws, one per element index.
#[derive(Debug, Clone)]
pub struct RecordedDraws {
    draws: Vec<u64>,
    tag: String,
}

impl RecordedDraws {
    pub fn new(draws: Vec<u64>, tag: impl Into<String>) -> Self {
        Self { draws, tag: tag.into() }
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.draws
    }
}

impl DrawSource for RecordedDraws {
    fn draw(&self, index: u64) -> u64 {
        self.draws[index as usize]
    }

    fn tag(&self) -> &str {
        &self.tag
    }
}

/// Mixes an experiment seed with a small integer (epoch, layer index, ...)
/// into a seed for a conventional sequential generator.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix64(seed ^ mix64(salt.wrapping_add(0x243f_6a88_85a3_08d3)))
}
