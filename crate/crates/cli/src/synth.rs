//! Synthetic utterances: token sequences from a tiny grammar, each token
//! rendered as a fixed spectral template plus seeded noise, so a small
//! model can actually learn the mapping and every byte is reproducible
//! from the seed.

use std::path::Path;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stfx_core::Tensor;

use crate::formats::{self, text_of_tokens, ALPHABET};

pub const FEAT_DIM: usize = 8;
pub const FRAMES_PER_TOKEN: usize = 12;
const NOISE_SIGMA: f64 = 0.15;
const MIN_TOKENS: usize = 3;
const MAX_TOKENS: usize = 8;

/// Each character keeps two feature bands active: one in the lower half,
/// one in the upper half, distinct per character.
fn bands(token: usize) -> (usize, usize) {
    let i = token - 2;
    (i % 4, 4 + i / 2)
}

/// Deterministic template: the low band carries a rising ramp and the high
/// band a falling one, giving the convolutional front-end some temporal
/// structure to latch onto.
pub fn render_tokens(tokens: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let frames = tokens.len() * FRAMES_PER_TOKEN;
    let mut data = vec![0.0; frames * FEAT_DIM];
    for (k, &tok) in tokens.iter().enumerate() {
        let (lo, hi) = bands(tok);
        for t in 0..FRAMES_PER_TOKEN {
            let row = k * FRAMES_PER_TOKEN + t;
            let ramp = t as f64 / (FRAMES_PER_TOKEN - 1) as f64;
            data[row * FEAT_DIM + lo] = 1.0 + 0.3 * ramp;
            data[row * FEAT_DIM + hi] = 0.8 - 0.3 * ramp;
        }
    }
    for v in &mut data {
        *v += NOISE_SIGMA * rng.sample::<f64, _>(StandardNormal);
    }
    Tensor::matrix(frames, FEAT_DIM, data).unwrap()
}

/// Grammar 0 draws characters uniformly; any other id favors the cyclic
/// successor of the previous character, which gives a bigram LM something
/// to learn.
pub fn sample_tokens(grammar: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(MIN_TOKENS..=MAX_TOKENS);
    let n = ALPHABET.len();
    let mut tokens = Vec::with_capacity(len);
    for i in 0..len {
        let tok = if grammar == 0 || i == 0 || rng.gen::<f64>() < 0.3 {
            rng.gen_range(0..n) + 2
        } else {
            (tokens[i - 1] - 2 + 1) % n + 2
        };
        tokens.push(tok);
    }
    tokens
}

/// Write `utts` feature files plus `transcripts.txt` into `dir` and return
/// the transcript entries.
pub fn synth_dataset(
    dir: &Path,
    seed: u64,
    utts: usize,
    grammar: usize,
) -> Result<Vec<(String, String)>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(utts);
    for i in 0..utts {
        let id = format!("utt{i:04}");
        let tokens = sample_tokens(grammar, &mut rng);
        let feats = render_tokens(&tokens, &mut rng);
        formats::write_features(&dir.join(format!("{id}.stfx")), &feats)?;
        entries.push((id, text_of_tokens(&tokens)?));
    }
    formats::write_transcripts(&dir.join("transcripts.txt"), &entries)?;
    Ok(entries)
}
