use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{join_sentences, SyntheticDoc};
use super::vocab::MASK_SENT;
use crate::error::{Error, Result};

/// Rescales a sentence-masking ratio so that the number of masked tokens
/// stays constant when the input length changes from `base_len` to `new_len`.
pub fn scale_mask_ratio(base_ratio: f64, base_len: usize, new_len: usize) -> Result<f64> {
    if !(base_ratio > 0.0 && base_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {base_ratio} is outside (0, 1)")));
    }
    if base_len == 0 || new_len == 0 {
        return Err(Error::InvalidArgument("lengths must be positive".into()));
    }
    let ratio = base_ratio * base_len as f64 / new_len as f64;
    if ratio >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "scaled mask ratio {ratio} for length {new_len} is not below 1"
        )));
    }
    Ok(ratio)
}

/// Number of sentences masked out of `n`; never below one.
pub fn num_masked(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Gap-sentence masking: picks sentences uniformly at random, replaces each
/// with one [`MASK_SENT`] token and returns `(input, target)`. The target is
/// the picked sentences in document order, joined by separators.
pub fn gsg_mask(doc: &SyntheticDoc, mask_ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {mask_ratio} is outside (0, 1]")));
    }
    let n = doc.sentences.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = num_masked(n, mask_ratio);
    let mut picked = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, k) {
        picked[i] = true;
    }
    let masked_doc: Vec<&[usize]> = doc
        .sentences
        .iter()
        .zip(&picked)
        .map(|(s, &p)| if p { &[MASK_SENT][..] } else { s.as_slice() })
        .collect();
    let input = join_sentences(masked_doc);
    let target = join_sentences(
        doc.sentences
            .iter()
            .zip(&picked)
            .filter(|(_, &p)| p)
            .map(|(s, _)| s.as_slice()),
    );
    Ok((input, target))
}

/// Documents whose surface length exceeds `min_chars`, in their original order.
pub fn filter_long(corpus: &[SyntheticDoc], min_chars: usize) -> Vec<SyntheticDoc> {
    let out: Vec<SyntheticDoc> = corpus.iter().filter(|d| d.chars > min_chars).cloned().collect();
    if out.is_empty() && !corpus.is_empty() {
        log::warn!(
            "no document out of {} is longer than {min_chars} characters",
            corpus.len()
        );
    }
    out
}
