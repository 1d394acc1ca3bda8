use std::cmp::Ordering;

use super::{EncoderStates, Model};
use crate::error::{Error, Result};

fn check_len(model: &Model, max_len: usize) -> Result<()> {
    if max_len == 0 || max_len > model.config.max_output_len {
        return Err(Error::InvalidArgument(format!(
            "decode max_len must be in 1..={}, got {max_len}",
            model.config.max_output_len
        )));
    }
    Ok(())
}

/// Log-probabilities of the next token after `prefix`.
fn next_log_probs(model: &Model, enc: &EncoderStates, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut dec_in = Vec::with_capacity(prefix.len() + 1);
    dec_in.push(model.config.decoder_start_id);
    dec_in.extend_from_slice(prefix);
    let logits = model.decode_logits(enc, &dec_in)?;
    let last = logits.row(prefix.len());
    let mx = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + last.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    Ok(last.iter().map(|x| x - lse).collect())
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Most likely token at each step until `eos_id` (included) or `max_len` tokens.
pub fn greedy_decode(model: &Model, input_ids: &[usize], max_len: usize, eos_id: usize) -> Result<Vec<usize>> {
    check_len(model, max_len)?;
    let enc = model.encode(input_ids)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let tok = argmax(&next_log_probs(model, &enc, &out)?);
        out.push(tok);
        if tok == eos_id {
            break;
        }
    }
    Ok(out)
}

fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
}

/// Higher log-probability first; ties go to the lexicographically smaller sequence.
fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search ranked by `log_prob / ((5 + len) / 6)^alpha`.
///
/// Each step expands every live hypothesis and keeps the `beam_size` best
/// expansions by raw log-probability. Expansions ending in `eos_id` or
/// reaching `max_len` are finished and leave the beam, so the beam never
/// extends past EOS. With `beam_size = 1` this is exactly greedy decoding.
pub fn beam_decode(
    model: &Model,
    input_ids: &[usize],
    beam_size: usize,
    alpha: f64,
    max_len: usize,
    eos_id: usize,
) -> Result<Vec<usize>> {
    if beam_size == 0 {
        return Err(Error::InvalidArgument("beam_size must be at least 1".into()));
    }
    check_len(model, max_len)?;
    let enc = model.encode(input_ids)?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::new();
        for hyp in &live {
            for (tok, lp) in next_log_probs(model, &enc, &hyp.tokens)?.into_iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hyp {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                });
            }
        }
        candidates.sort_by(by_score);
        candidates.truncate(beam_size);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&eos_id) || c.tokens.len() == max_len {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    let score = |h: &Hyp| h.log_prob / length_penalty(h.tokens.len(), alpha);
    let best = finished
        .into_iter()
        .max_by(|a, b| {
            score(a)
                .partial_cmp(&score(b))
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .expect("at least one hypothesis finishes");
    Ok(best.tokens)
}
