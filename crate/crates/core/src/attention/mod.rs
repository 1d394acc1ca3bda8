//! Attention variants: full, block-local (optionally staggered), global-local,
//! causal decoder self-attention, and dense / global-only cross-attention.
//!
//! The tape-level kernels live in [`kernel`]; this module wires projections,
//! head splitting and position handling around them.

mod cost;
pub(crate) mod kernel;
mod layout;
mod spec;

use std::sync::Arc;

pub use cost::{attention_cost, attention_cost_for_layer, AttentionCost};
pub use kernel::{LocalPattern, MASKED_LOGIT};
pub use layout::{make_block_layout, BlockLayout};
pub use spec::{AttentionSpec, Variant};

use crate::error::{Error, Result};
use crate::tensor::{Mask, RelBias, Tape, Var};

/// Query/key/value/output projection matrices, each `[d_model, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Rotary position handling for one attention call.
#[derive(Clone, Debug)]
pub struct Rotary {
    /// Positions of the query rows; rows beyond this list are not rotated.
    pub q_positions: Arc<Vec<usize>>,
    pub k_positions: Arc<Vec<usize>>,
    pub base: f64,
}

/// Which keys each query may see.
#[derive(Clone, Debug)]
pub enum Pattern {
    Dense(Mask),
    Local(Arc<LocalPattern>),
}

/// Scaled dot-product attention on head-split `[h, L, d]` tensors.
pub fn full_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Mask) -> Result<Var> {
    tape.dense_attention(q, k, v, mask, None)
}

/// Attention restricted to the blocks of `layout`.
pub fn block_local_attention(tape: &mut Tape, q: Var, k: Var, v: Var, layout: &BlockLayout) -> Result<Var> {
    let l = tape.shape(q)[1];
    if layout.seq_len != l {
        return Err(Error::InvalidArgument(format!(
            "layout covers {} positions but the sequence has {l}",
            layout.seq_len
        )));
    }
    let pattern = Arc::new(LocalPattern {
        layout: layout.clone(),
        globals: 0,
    });
    tape.local_attention(q, k, v, pattern, None)
}

pub fn causal_self_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    tape.dense_attention(q, k, v, Mask::Causal, None)
}

/// Unmasked attention from decoder queries to encoder keys/values.
pub fn cross_attention(tape: &mut Tape, dec_q: Var, enc_k: Var, enc_v: Var) -> Result<Var> {
    tape.dense_attention(dec_q, enc_k, enc_v, Mask::None, None)
}

/// Attention from decoder queries to the global-token representations only.
pub fn global_cross_attention(
    tape: &mut Tape,
    enabled: bool,
    dec_q: Var,
    global_k: Var,
    global_v: Var,
) -> Result<Var> {
    if !enabled {
        return Err(Error::Config(
            "global cross-attention used while decoder_global_attn is disabled".into(),
        ));
    }
    tape.dense_attention(dec_q, global_k, global_v, Mask::None, None)
}

/// Full multi-head block: project, split heads, rotate, attend, merge, project out.
///
/// `xq` is `[Lq, d_model]`, `xkv` is `[Lk, d_model]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head(
    tape: &mut Tape,
    xq: Var,
    xkv: Var,
    proj: &Projections,
    heads: usize,
    pattern: &Pattern,
    rotary: Option<&Rotary>,
    bias: Option<RelBias>,
) -> Result<Var> {
    let q = tape.matmul(xq, proj.q)?;
    let k = tape.matmul(xkv, proj.k)?;
    let v = tape.matmul(xkv, proj.v)?;
    let mut q = tape.split_heads(q, heads)?;
    let mut k = tape.split_heads(k, heads)?;
    let v = tape.split_heads(v, heads)?;
    if let Some(r) = rotary {
        q = tape.rope(q, Arc::clone(&r.q_positions), r.base)?;
        k = tape.rope(k, Arc::clone(&r.k_positions), r.base)?;
    }
    let attended = match pattern {
        Pattern::Dense(mask) => tape.dense_attention(q, k, v, mask.clone(), bias)?,
        Pattern::Local(p) => tape.local_attention(q, k, v, Arc::clone(p), bias)?,
    };
    let merged = tape.merge_heads(attended)?;
    tape.matmul(merged, proj.o)
}

/// Global-local self-attention over `tokens` (`[L, d_model]`) and `globals`
/// (`[g, d_model]`), sharing one set of projections.
///
/// Returns the updated token and global streams.
#[allow(clippy::too_many_arguments)]
pub fn global_local_attention(
    tape: &mut Tape,
    tokens: Var,
    globals: Var,
    layout: &BlockLayout,
    proj: &Projections,
    heads: usize,
    rotary: Option<&Rotary>,
    bias: Option<RelBias>,
) -> Result<(Var, Var)> {
    let l = tape.shape(tokens)[0];
    let g = tape.shape(globals)[0];
    if layout.seq_len != l {
        return Err(Error::InvalidArgument(format!(
            "layout covers {} positions but the sequence has {l}",
            layout.seq_len
        )));
    }
    let x = tape.concat_rows(tokens, globals)?;
    let pattern = Pattern::Local(Arc::new(LocalPattern {
        layout: layout.clone(),
        globals: g,
    }));
    let out = multi_head(tape, x, x, proj, heads, &pattern, rotary, bias)?;
    Ok((tape.slice_rows(out, 0, l)?, tape.slice_rows(out, l, l + g)?))
}

/// Row-major `[n, n]` permission matrix of encoder self-attention in layer
/// `layer`, with `n = seq_len + globals` and global rows last.
pub fn self_attention_mask(spec: &AttentionSpec, seq_len: usize, layer: usize) -> Result<Vec<bool>> {
    spec.validate()?;
    let g = spec.globals();
    let n = seq_len + g;
    if spec.variant == Variant::Full {
        return Ok(vec![true; n * n]);
    }
    let layout = make_block_layout(seq_len, spec.block_size, layer, spec.staggered)?;
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = i >= seq_len || j >= seq_len || layout.allowed(i, j);
        }
    }
    Ok(m)
}
