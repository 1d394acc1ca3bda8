//! Forward and backward attention kernels over flat `[h, L, d]` buffers.
//!
//! Both kernels keep the softmax weights from the forward pass; the backward
//! rules reuse them instead of recomputing logits.

use super::layout::BlockLayout;
use crate::posenc::RelativeBuckets;
use crate::tensor::counters;
use crate::tensor::gemm::{axpy, dot};
use crate::tensor::Mask;

/// Additive logit for forbidden (query, key) pairs.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
}

/// Token layout plus the number of global rows appended after the tokens.
#[derive(Clone, Debug)]
pub struct LocalPattern {
    pub layout: BlockLayout,
    pub globals: usize,
}

impl LocalPattern {
    /// Width of one stored token row of weights: block keys then global keys.
    fn token_width(&self) -> usize {
        self.layout.block_size + self.globals
    }

    fn token_probs_len(&self, heads: usize) -> usize {
        heads * self.layout.frame_len() * self.token_width()
    }

    fn rows(&self) -> usize {
        self.layout.seq_len + self.globals
    }
}

pub(crate) struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dbias: Option<Vec<f64>>,
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

#[inline]
fn bias_at(bias: Option<(&[f64], &RelativeBuckets)>, head: usize, i: usize, j: usize) -> f64 {
    match bias {
        Some((table, b)) => table[head * b.num_buckets() + b.bucket(j as isize - i as isize)],
        None => 0.0,
    }
}

pub(crate) fn dense_forward(
    dims: Dims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &Mask,
    bias: Option<(&[f64], &RelativeBuckets)>,
) -> (Vec<f64>, Vec<f64>) {
    let Dims { heads, lq, lk, d } = dims;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; heads * lq * d];
    let mut probs = vec![0.0; heads * lq * lk];
    for h in 0..heads {
        for i in 0..lq {
            let qi = &q[(h * lq + i) * d..(h * lq + i + 1) * d];
            let row = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let mut any = false;
            for (j, s) in row.iter_mut().enumerate() {
                let logit = dot(qi, &k[(h * lk + j) * d..(h * lk + j + 1) * d]) * scale;
                *s = if mask.allows(h, i, j, lq, lk) {
                    any = true;
                    logit + bias_at(bias, h, i, j)
                } else {
                    MASKED_LOGIT
                };
            }
            if !any {
                row.fill(0.0);
                continue;
            }
            softmax_in_place(row);
            let o = &mut out[(h * lq + i) * d..(h * lq + i + 1) * d];
            for (j, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    axpy(p, &v[(h * lk + j) * d..(h * lk + j + 1) * d], o);
                }
            }
        }
    }
    counters::add_scores((heads * lq * lk) as u64, d as u64);
    (out, probs)
}

pub(crate) fn dense_backward(
    dims: Dims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    buckets: Option<&RelativeBuckets>,
    g: &[f64],
) -> AttnGrads {
    let Dims { heads, lq, lk, d } = dims;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dbias = buckets.map(|b| vec![0.0; heads * b.num_buckets()]);
    let mut dp = vec![0.0; lk];
    for h in 0..heads {
        for i in 0..lq {
            let qrow = (h * lq + i) * d;
            let gi = &g[qrow..qrow + d];
            let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let mut total = 0.0;
            for j in 0..lk {
                dp[j] = if p[j] != 0.0 {
                    dot(gi, &v[(h * lk + j) * d..(h * lk + j + 1) * d])
                } else {
                    0.0
                };
                total += p[j] * dp[j];
            }
            for j in 0..lk {
                if p[j] == 0.0 {
                    continue;
                }
                let krow = (h * lk + j) * d;
                let ds = p[j] * (dp[j] - total);
                axpy(p[j], gi, &mut dv[krow..krow + d]);
                axpy(scale * ds, &k[krow..krow + d], &mut dq[qrow..qrow + d]);
                axpy(scale * ds, &q[qrow..qrow + d], &mut dk[krow..krow + d]);
                if let (Some(db), Some(b)) = (dbias.as_mut(), buckets) {
                    db[h * b.num_buckets() + b.bucket(j as isize - i as isize)] += ds;
                }
            }
        }
    }
    AttnGrads { dq, dk, dv, dbias }
}

/// Forward pass for block-local attention with optional global rows.
///
/// Token queries attend to their block plus every global key under one
/// softmax; global queries attend to every token and every global. Each block
/// is computed as a full `b × b` tile over the padded frame.
pub(crate) fn local_forward(
    heads: usize,
    d: usize,
    pattern: &LocalPattern,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: Option<(&[f64], &RelativeBuckets)>,
) -> (Vec<f64>, Vec<f64>) {
    let layout = &pattern.layout;
    let (l, g, b) = (layout.seq_len, pattern.globals, layout.block_size);
    let n = pattern.rows();
    let width = pattern.token_width();
    let scale = 1.0 / (d as f64).sqrt();
    let zero = vec![0.0; d];
    let tok_len = pattern.token_probs_len(heads);
    let mut probs = vec![0.0; tok_len + heads * g * n];
    let mut out = vec![0.0; heads * n * d];
    let mut scored = 0u64;

    for h in 0..heads {
        let row = |r: usize| (h * n + r) * d..(h * n + r + 1) * d;
        for blk in 0..layout.num_blocks() {
            for t in 0..b {
                let slot = blk * b + t;
                let qi = layout.real(slot);
                let qrow: &[f64] = match qi {
                    Some(i) => &q[row(i)],
                    None => &zero,
                };
                let p = &mut probs[(h * layout.frame_len() + slot) * width..][..width];
                for u in 0..b {
                    let kj = layout.real(blk * b + u);
                    let krow: &[f64] = match kj {
                        Some(j) => &k[row(j)],
                        None => &zero,
                    };
                    let logit = dot(qrow, krow) * scale;
                    p[u] = match (qi, kj) {
                        (Some(i), Some(j)) => logit + bias_at(bias, h, i, j),
                        _ => MASKED_LOGIT,
                    };
                }
                scored += b as u64;
                let Some(i) = qi else {
                    p.fill(0.0);
                    continue;
                };
                for gi in 0..g {
                    p[b + gi] = dot(qrow, &k[row(l + gi)]) * scale;
                }
                scored += g as u64;
                softmax_in_place(p);
                let o = row(i);
                for u in 0..b {
                    if let Some(j) = layout.real(blk * b + u) {
                        if p[u] != 0.0 {
                            axpy(p[u], &v[row(j)], &mut out[o.clone()]);
                        }
                    }
                }
                for gi in 0..g {
                    axpy(p[b + gi], &v[row(l + gi)], &mut out[o.clone()]);
                }
            }
        }
        for gi in 0..g {
            let r = l + gi;
            let qrow = &q[row(r)];
            let p = &mut probs[tok_len + (h * g + gi) * n..][..n];
            for (j, s) in p.iter_mut().enumerate() {
                *s = dot(qrow, &k[row(j)]) * scale;
            }
            scored += n as u64;
            softmax_in_place(p);
            let o = row(r);
            for (j, &pj) in p.iter().enumerate() {
                axpy(pj, &v[row(j)], &mut out[o.clone()]);
            }
        }
    }
    counters::add_scores(scored, d as u64);
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn local_backward(
    heads: usize,
    d: usize,
    pattern: &LocalPattern,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    buckets: Option<&RelativeBuckets>,
    g_out: &[f64],
) -> AttnGrads {
    let layout = &pattern.layout;
    let (l, g, b) = (layout.seq_len, pattern.globals, layout.block_size);
    let n = pattern.rows();
    let width = pattern.token_width();
    let scale = 1.0 / (d as f64).sqrt();
    let tok_len = pattern.token_probs_len(heads);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dbias = buckets.map(|bk| vec![0.0; heads * bk.num_buckets()]);
    let mut dp = vec![0.0; width.max(n)];
    // Key row (within the combined token+global rows) for each stored weight.
    let mut cols: Vec<Option<usize>> = vec![None; width.max(n)];

    for h in 0..heads {
        let at = |r: usize| (h * n + r) * d;
        let mut apply = |i: usize, p: &[f64], cols: &[Option<usize>], dp: &mut [f64], biased: &dyn Fn(usize) -> Option<usize>| {
            let gi = &g_out[at(i)..at(i) + d];
            let mut total = 0.0;
            for (c, col) in cols.iter().enumerate().take(p.len()) {
                dp[c] = match col {
                    Some(j) if p[c] != 0.0 => dot(gi, &v[at(*j)..at(*j) + d]),
                    _ => 0.0,
                };
                total += p[c] * dp[c];
            }
            for (c, col) in cols.iter().enumerate().take(p.len()) {
                let Some(j) = *col else { continue };
                if p[c] == 0.0 {
                    continue;
                }
                let ds = p[c] * (dp[c] - total);
                axpy(p[c], gi, &mut dv[at(j)..at(j) + d]);
                axpy(scale * ds, &k[at(j)..at(j) + d], &mut dq[at(i)..at(i) + d]);
                axpy(scale * ds, &q[at(i)..at(i) + d], &mut dk[at(j)..at(j) + d]);
                if let (Some(db), Some(bk)) = (dbias.as_mut(), buckets) {
                    if let Some(tok_j) = biased(c) {
                        db[h * bk.num_buckets() + bk.bucket(tok_j as isize - i as isize)] += ds;
                    }
                }
            }
        };

        for blk in 0..layout.num_blocks() {
            for u in 0..b {
                cols[u] = layout.real(blk * b + u);
            }
            for gi in 0..g {
                cols[b + gi] = Some(l + gi);
            }
            for t in 0..b {
                let slot = blk * b + t;
                let Some(i) = layout.real(slot) else { continue };
                let p = &probs[(h * layout.frame_len() + slot) * width..][..width];
                let block_cols = &cols[..width];
                let biased = |c: usize| if c < b { block_cols[c] } else { None };
                apply(i, p, block_cols, &mut dp, &biased);
            }
        }
        for (c, col) in cols.iter_mut().enumerate().take(n) {
            *col = Some(c);
        }
        for gi in 0..g {
            let p = &probs[tok_len + (h * g + gi) * n..][..n];
            apply(l + gi, p, &cols[..n], &mut dp, &|_| None);
        }
    }
    AttnGrads { dq, dk, dv, dbias }
}
