//! Deterministic stand-ins for the pretrained text and image encoders.
//!
//! Both encoders are seeded random projections built from the portable
//! generators in [`crate::rng`], so every embedding is reproducible bit for
//! bit from `(input, seed)` alone. Shapes and determinism match what the
//! attention and pipeline layers expect from real encoders; no semantics are
//! learned.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a_64, Xoshiro256PlusPlus};
use crate::tensor::ImageTensor;
use crate::util::sinusoidal_embedding;

/// Hashed vocabulary size of the stub tokenizer. Id 0 is reserved for padding.
pub const VOCAB_SIZE: usize = 4096;
/// Fixed token sequence length after padding/truncation.
pub const MAX_TOKENS: usize = 16;
/// Text embedding width.
pub const D_TEXT: usize = 64;
/// Image embedding width.
pub const D_IMAGE: usize = 64;
/// Default patch size of the image encoder.
pub const DEFAULT_PATCH: usize = 8;

/// Substream tags for deriving encoder table seeds.
const TAG_TEXT_TABLE: u64 = 0x7445_7874;
const TAG_IMAGE_PROJ: u64 = 0x7049_6d67;

/// A tokenized prompt with its embedding matrix `[MAX_TOKENS, D_TEXT]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<u32>,
    pub embedding: Array2<f64>,
}

/// Patch-token embedding of an image, `[m, D_IMAGE]` with
/// `m = (H/patch) * (W/patch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub embedding: Array2<f64>,
    pub source_dims: (usize, usize, usize),
}

/// Lowercase, split on non-alphanumeric runs, hash each word with FNV-1a 64
/// into ids `1..VOCAB_SIZE`, pad with 0 to [`MAX_TOKENS`], truncate beyond.
pub fn tokenize(prompt: &str) -> Vec<u32> {
    let lowered = prompt.to_lowercase();
    let mut ids: Vec<u32> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| 1 + (fnv1a_64(w.as_bytes()) % (VOCAB_SIZE as u64 - 1)) as u32)
        .collect();
    ids.truncate(MAX_TOKENS);
    ids.resize(MAX_TOKENS, 0);
    ids
}

/// Build the `[VOCAB_SIZE, D_TEXT]` token table for a seed: unit-variance
/// normal entries drawn row-major from the derived substream.
fn token_table(seed: u64) -> Array2<f64> {
    let mut rng = Xoshiro256PlusPlus::new(derive_seed(seed, TAG_TEXT_TABLE));
    Array2::from_shape_fn((VOCAB_SIZE, D_TEXT), |_| rng.standard_normal())
}

/// Look up each token id in the seed-fixed table and add a sinusoidal
/// position vector per sequence slot.
pub fn encode_text(tokens: &[u32], seed: u64) -> Result<TextEmbedding> {
    for &t in tokens {
        if t as usize >= VOCAB_SIZE {
            return Err(Error::Domain(format!(
                "token id {t} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
    }
    let table = token_table(seed);
    let mut embedding = Array2::zeros((tokens.len(), D_TEXT));
    for (i, &t) in tokens.iter().enumerate() {
        let pos = sinusoidal_embedding(i as f64, D_TEXT);
        for (j, p) in pos.iter().enumerate() {
            embedding[[i, j]] = table[[t as usize, j]] + p;
        }
    }
    Ok(TextEmbedding {
        tokens: tokens.to_vec(),
        embedding,
    })
}

/// Tokenize and encode in one step.
pub fn encode_prompt(prompt: &str, seed: u64) -> Result<TextEmbedding> {
    encode_text(&tokenize(prompt), seed)
}

/// Flatten non-overlapping `patch x patch` blocks (row-major over the patch
/// grid, values ordered channel, then y, then x within a block) and apply a
/// seed-fixed linear projection -- no bias, entries `N(0, 1/(C*patch^2))` --
/// to width [`D_IMAGE`].
pub fn encode_image(img: &ImageTensor, patch: usize, seed: u64) -> Result<ImageEmbedding> {
    let (n, c, h, w) = img.dims();
    if n != 1 {
        return Err(Error::ShapeMismatch(format!(
            "image encoder expects a single sample, got N = {n}"
        )));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims ({h}, {w}) must be divisible by patch {patch}"
        )));
    }
    let in_dim = c * patch * patch;
    let mut rng = Xoshiro256PlusPlus::new(derive_seed(seed, TAG_IMAGE_PROJ));
    let scale = 1.0 / (in_dim as f64).sqrt();
    let proj = Array2::from_shape_fn((in_dim, D_IMAGE), |_| rng.standard_normal() * scale);

    let grid_h = h / patch;
    let grid_w = w / patch;
    let mut patches = Array2::zeros((grid_h * grid_w, in_dim));
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = gy * grid_w + gx;
            let mut idx = 0;
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        patches[[row, idx]] =
                            img.data()[[0, ch, gy * patch + py, gx * patch + px]];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(ImageEmbedding {
        embedding: patches.dot(&proj),
        source_dims: (c, h, w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256PlusPlus;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;

    #[test]
    fn empty_prompt_is_all_padding() {
        assert_eq!(tokenize(""), vec![0; 16]);
        assert_eq!(tokenize("  ,.;  "), vec![0; 16]);
    }

    #[test]
    fn tokenization_is_deterministic() {
        assert_eq!(tokenize("a cat"), tokenize("a cat"));
        assert_eq!(tokenize("A Cat"), tokenize("a cat"));
    }

    #[test]
    fn distinct_prompts_hash_apart() {
        // Vocabulary-hash sanity; if this ever collides the hash constants
        // need reseeding.
        assert_ne!(tokenize("a cat"), tokenize("a dog"));
        assert_ne!(tokenize("oil painting"), tokenize("ink drawing"));
    }

    #[test]
    fn long_prompts_truncate() {
        let long = "w ".repeat(40);
        assert_eq!(tokenize(&long).len(), MAX_TOKENS);
    }

    #[test]
    fn padding_rows_differ_only_by_position() {
        let emb = encode_text(&vec![0; MAX_TOKENS], 7).unwrap();
        assert_eq!(emb.embedding.dim(), (MAX_TOKENS, D_TEXT));
        for i in 1..MAX_TOKENS {
            for j in 0..D_TEXT {
                let pos0 = sinusoidal_embedding(0.0, D_TEXT)[j];
                let posi = sinusoidal_embedding(i as f64, D_TEXT)[j];
                assert_abs_diff_eq!(
                    emb.embedding[[i, j]] - posi,
                    emb.embedding[[0, j]] - pos0,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn seeds_change_the_table() {
        let tokens = tokenize("a cat");
        let a = encode_text(&tokens, 1).unwrap();
        let b = encode_text(&tokens, 2).unwrap();
        assert_ne!(a.embedding, b.embedding);
        let c = encode_text(&tokens, 1).unwrap();
        assert_eq!(a.embedding, c.embedding);
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        assert!(matches!(
            encode_text(&[4096], 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn patch_grid_token_count() {
        let img = ImageTensor::zeros((1, 3, 32, 32)).unwrap();
        let emb = encode_image(&img, 8, 5).unwrap();
        assert_eq!(emb.embedding.dim(), (16, D_IMAGE));
        assert_eq!(emb.source_dims, (3, 32, 32));
    }

    #[test]
    fn zero_image_encodes_to_zero() {
        let img = ImageTensor::zeros((1, 3, 16, 16)).unwrap();
        let emb = encode_image(&img, 8, 5).unwrap();
        assert!(emb.embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_linear() {
        let mut rng = Xoshiro256PlusPlus::new(88);
        let mk = |rng: &mut Xoshiro256PlusPlus| {
            let data = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.standard_normal());
            ImageTensor::new(data).unwrap()
        };
        for _ in 0..5 {
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let sum = a.affine_combine(1.0, &b, 1.0).unwrap();
            let ea = encode_image(&a, 8, 3).unwrap();
            let eb = encode_image(&b, 8, 3).unwrap();
            let esum = encode_image(&sum, 8, 3).unwrap();
            for ((x, y), z) in ea
                .embedding
                .iter()
                .zip(eb.embedding.iter())
                .zip(esum.embedding.iter())
            {
                assert_abs_diff_eq!(x + y, *z, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn non_divisible_dims_are_rejected() {
        let img = ImageTensor::zeros((1, 3, 30, 32)).unwrap();
        assert!(matches!(
            encode_image(&img, 8, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
