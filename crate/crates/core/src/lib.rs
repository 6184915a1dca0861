//! Factor-decomposed text-to-image GAN.
//!
//! The sentence embedding reaches the generator and the conditional
//! discriminator head only through additive instance normalization
//! (AddIN) biases; the noise vector alone seeds the base feature map.

pub mod checkpoint;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod gradcheck;
pub mod layers;
pub mod matching;
pub mod norm;
pub mod probe;
pub mod synth;
pub mod text;
pub mod training;
pub mod variant;

pub use error::{Error, Result};
pub use fdgan_tensor as tensor;

/// Provenance bits attached to graph inputs so that structural audits can
/// inspect which sources meet at each concatenation.
pub mod tags {
    pub const NOISE: u8 = 1;
    pub const SENTENCE: u8 = 2;
    pub const WORDS: u8 = 4;
    pub const IMAGE: u8 = 8;

    /// True when one concatenated input carries `a` and a different one carries `b`.
    pub fn mixes(input_tags: &[u8], a: u8, b: u8) -> bool {
        input_tags.iter().enumerate().any(|(i, &ti)| {
            ti & a != 0 && input_tags.iter().enumerate().any(|(j, &tj)| i != j && tj & b != 0)
        })
    }
}
