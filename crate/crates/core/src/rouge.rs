//! ROUGE-N, ROUGE-L and summary-level ROUGE-Lsum over token sequences,
//! following the conventions of the `rouge-score` package (no stemming).

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in seq.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<Score> {
    if n == 0 {
        return Err(Error::InvalidArgument("rouge_n needs n >= 1".into()));
    }
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = r.iter().map(|(g, &rc)| rc.min(c.get(g).copied().unwrap_or(0))).sum();
    let nc: usize = c.values().sum();
    let nr: usize = r.values().sum();
    Ok(Score::new(
        overlap as f64 / nc.max(1) as f64,
        overlap as f64 / nr.max(1) as f64,
    ))
}

fn lcs_table<T: Eq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Sequence-level LCS.
pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> Score {
    if cand.is_empty() || reference.is_empty() {
        return Score::default();
    }
    let l = lcs_len(cand, reference) as f64;
    Score::new(l / cand.len() as f64, l / reference.len() as f64)
}

/// Indices into `reference` of one LCS with `cand`, using the same
/// tie-breaking as `rouge-score`.
fn lcs_indices<T: Eq>(reference: &[T], cand: &[T]) -> Vec<usize> {
    let t = lcs_table(reference, cand);
    let (mut i, mut j) = (reference.len(), cand.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == cand[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i][j - 1] > t[i - 1][j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

/// Summary-level LCS: each reference line is matched against the union of
/// its LCS hits over all candidate lines, with token counts clipped.
pub fn rouge_lsum<T: Eq + Hash>(cand_lines: &[Vec<T>], ref_lines: &[Vec<T>]) -> Score {
    let m: usize = ref_lines.iter().map(Vec::len).sum();
    let n: usize = cand_lines.iter().map(Vec::len).sum();
    if m == 0 || n == 0 {
        return Score::default();
    }
    let mut ref_counts: HashMap<&T, usize> = HashMap::new();
    let mut cand_counts: HashMap<&T, usize> = HashMap::new();
    for t in ref_lines.iter().flatten() {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    for t in cand_lines.iter().flatten() {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    let mut hits = 0usize;
    for r in ref_lines {
        let mut union: Vec<usize> = cand_lines.iter().flat_map(|c| lcs_indices(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for i in union {
            let tok = &r[i];
            let (Some(cc), Some(rc)) = (cand_counts.get_mut(tok), ref_counts.get_mut(tok)) else {
                continue;
            };
            if *cc > 0 && *rc > 0 {
                hits += 1;
                *cc -= 1;
                *rc -= 1;
            }
        }
    }
    Score::new(hits as f64 / n as f64, hits as f64 / m as f64)
}

/// Geometric mean of three F1 scores.
pub fn rg(a: f64, b: f64, c: f64) -> f64 {
    (a * b * c).cbrt()
}

/// Corpus-mean ROUGE scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub r1: Score,
    pub r2: Score,
    pub rl: Score,
    pub rlsum: Score,
    /// Geometric mean of the R1, R2 and RL (or RLsum) F1 means.
    pub rg: f64,
    pub n_examples: usize,
}

/// Per-example scores for a candidate and a reference given as lines.
/// N-gram and sequence-level scores see the lines concatenated.
pub fn score_pair<T: Eq + Hash + Clone>(cand_lines: &[Vec<T>], ref_lines: &[Vec<T>]) -> [Score; 4] {
    let cand: Vec<T> = cand_lines.concat();
    let reference: Vec<T> = ref_lines.concat();
    [
        rouge_n(&cand, &reference, 1).expect("n = 1"),
        rouge_n(&cand, &reference, 2).expect("n = 2"),
        rouge_l(&cand, &reference),
        rouge_lsum(cand_lines, ref_lines),
    ]
}

fn mean(scores: &[Score]) -> Score {
    let n = scores.len().max(1) as f64;
    Score {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Means of per-example scores over `(candidate, reference)` pairs.
pub fn corpus_report<T: Eq + Hash + Clone>(pairs: &[(Vec<Vec<T>>, Vec<Vec<T>>)], rg_uses_lsum: bool) -> RougeReport {
    let per: Vec<[Score; 4]> = pairs.iter().map(|(c, r)| score_pair(c, r)).collect();
    let col = |k: usize| mean(&per.iter().map(|s| s[k]).collect::<Vec<_>>());
    let (r1, r2, rl, rlsum) = (col(0), col(1), col(2), col(3));
    let third = if rg_uses_lsum { rlsum.f1 } else { rl.f1 };
    RougeReport {
        r1,
        r2,
        rl,
        rlsum,
        rg: rg(r1.f1, r2.f1, third),
        n_examples: pairs.len(),
    }
}
