//! Position encodings: sinusoidal, learned absolute (with tiling for longer
//! inputs), rotary, and T5-style bucketed relative bias.
//!
//! Exactly one application site is active per scheme: sinusoidal and learned
//! encodings are added to token embeddings, RoPE rotates queries and keys,
//! T5 adds a per-head bias to attention logits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    None,
    Sinusoidal,
    LearnedAbsolute,
    Rope,
    T5Relative,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::None,
        Scheme::Sinusoidal,
        Scheme::LearnedAbsolute,
        Scheme::Rope,
        Scheme::T5Relative,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosEncConfig {
    pub scheme: Scheme,
    /// Wavelength base for sinusoidal and rotary encodings.
    #[serde(default = "default_factor")]
    pub sinusoidal_factor: f64,
    #[serde(default = "default_buckets")]
    pub t5_num_buckets: usize,
    #[serde(default = "default_max_distance")]
    pub t5_max_distance: usize,
}

fn default_factor() -> f64 {
    10_000.0
}
fn default_buckets() -> usize {
    32
}
fn default_max_distance() -> usize {
    128
}

impl PosEncConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            sinusoidal_factor: default_factor(),
            t5_num_buckets: default_buckets(),
            t5_max_distance: default_max_distance(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sinusoidal_factor.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "sinusoidal_factor must exceed 1, got {}",
                self.sinusoidal_factor
            )));
        }
        if self.t5_num_buckets < 2 {
            return Err(Error::Config("t5_num_buckets must be at least 2".into()));
        }
        if self.t5_max_distance <= self.t5_num_buckets {
            return Err(Error::Config(format!(
                "t5_max_distance ({}) must exceed t5_num_buckets ({})",
                self.t5_max_distance, self.t5_num_buckets
            )));
        }
        Ok(())
    }
}

/// `PE[p, 2i] = sin(p / factor^(2i/d))`, `PE[p, 2i+1] = cos(p / factor^(2i/d))`.
pub fn sinusoidal(len: usize, d: usize, factor: f64) -> Result<Tensor> {
    if d % 2 != 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal encoding needs an even width, got {d}"
        )));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("sinusoidal encoding of length 0".into()));
    }
    let mut data = vec![0.0; len * d];
    for i in 0..d / 2 {
        let inv = factor.powf(-(2.0 * i as f64) / d as f64);
        for p in 0..len {
            let (s, c) = (p as f64 * inv).sin_cos();
            data[p * d + 2 * i] = s;
            data[p * d + 2 * i + 1] = c;
        }
    }
    Tensor::new(vec![len, d], data)
}

/// First `len` rows of a learned position table.
pub fn learned_absolute(tape: &mut Tape, table: Var, len: usize) -> Result<Var> {
    let rows = tape.shape(table)[0];
    if len > rows {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {len} exceeds the {rows}-row position table; replicate it first"
        )));
    }
    let ids: Vec<usize> = (0..len).collect();
    tape.embedding(table, &ids)
}

/// Tiles a `[rows, d]` position table end to end up to `new_len` rows.
pub fn replicate(table: &Tensor, new_len: usize) -> Result<Tensor> {
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    if new_len < rows {
        return Err(Error::InvalidArgument(format!(
            "cannot replicate a {rows}-row table down to {new_len} rows"
        )));
    }
    let data = (0..new_len).flat_map(|p| table.row(p % rows).to_vec()).collect();
    Tensor::new(vec![new_len, d], data)
}

/// Rotates query or key heads `[h, L, d]` by their positions.
pub fn rope_apply(tape: &mut Tape, x: Var, positions: &[usize], base: f64) -> Result<Var> {
    tape.rope(x, Arc::new(positions.to_vec()), base)
}

/// T5 bucketing of the relative position `key − query`.
///
/// Half of the buckets (per direction when bidirectional) hold exact small
/// distances; the rest grow logarithmically up to `max_distance`.
pub fn relative_position_bucket(
    relative: isize,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut ret = 0;
    let mut n = -relative;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let n = n as usize;
    let max_exact = buckets / 2;
    if n < max_exact {
        return ret + n;
    }
    let scaled = ((n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
        * (buckets - max_exact) as f64) as usize;
    ret + (max_exact + scaled).min(buckets - 1)
}

/// Precomputed bucket lookup for one attention direction setting.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeBuckets {
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
    /// Buckets for relatives `-max_distance..=max_distance`; beyond that the
    /// bucket no longer changes.
    table: Vec<usize>,
}

impl RelativeBuckets {
    pub fn new(bidirectional: bool, num_buckets: usize, max_distance: usize) -> Self {
        let m = max_distance as isize;
        let table = (-m..=m)
            .map(|r| relative_position_bucket(r, bidirectional, num_buckets, max_distance))
            .collect();
        Self {
            bidirectional,
            num_buckets,
            max_distance,
            table,
        }
    }

    pub fn from_config(cfg: &PosEncConfig, bidirectional: bool) -> Self {
        Self::new(bidirectional, cfg.t5_num_buckets, cfg.t5_max_distance)
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn bidirectional(&self) -> bool {
        self.bidirectional
    }

    #[inline]
    pub fn bucket(&self, relative: isize) -> usize {
        let m = self.max_distance as isize;
        self.table[(relative.clamp(-m, m) + m) as usize]
    }
}

/// Materializes the `[h, Lq, Lk]` bias added to attention logits.
pub fn t5_relative_bias(lq: usize, lk: usize, buckets: &RelativeBuckets, table: &Tensor) -> Result<Tensor> {
    let s = table.shape();
    if s.len() != 2 || s[1] != buckets.num_buckets() {
        return Err(Error::InvalidArgument(format!(
            "bias table shape {s:?} does not match {} buckets",
            buckets.num_buckets()
        )));
    }
    let heads = s[0];
    let mut data = vec![0.0; heads * lq * lk];
    for h in 0..heads {
        for i in 0..lq {
            for j in 0..lk {
                data[(h * lq + i) * lk + j] =
                    table.get(&[h, buckets.bucket(j as isize - i as isize)]);
            }
        }
    }
    Tensor::new(vec![heads, lq, lk], data)
}

/// The "no position encoding" scheme: embeddings pass through untouched.
pub fn none_encoding(x: Var) -> Var {
    x
}
