use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::params::{dec_layer, enc_layer, Binder};
use super::ModelConfig;
use crate::attention::{make_block_layout, multi_head, LocalPattern, Pattern, Projections, Rotary, Variant};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::posenc::{self, RelativeBuckets, Scheme};
use crate::tensor::{Mask, RelBias, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Training mode carries the dropout RNG.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Final encoder states.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[L, d_model]`
    pub tokens: Var,
    /// `[g, d_model]` for global-local encoders.
    pub globals: Option<Var>,
}

fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => tape.dropout(x, p, true, *rng),
        _ => Ok(x),
    }
}

fn layer_norm(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let gain = b.get(tape, &format!("{prefix}.gain"))?;
    let bias = b.get(tape, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

fn projections(tape: &mut Tape, b: &mut Binder, prefix: &str) -> Result<Projections> {
    Ok(Projections {
        q: b.get(tape, &format!("{prefix}.q"))?,
        k: b.get(tape, &format!("{prefix}.k"))?,
        v: b.get(tape, &format!("{prefix}.v"))?,
        o: b.get(tape, &format!("{prefix}.o"))?,
    })
}

fn feed_forward(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w1 = b.get(tape, &format!("{prefix}.w1"))?;
    let b1 = b.get(tape, &format!("{prefix}.b1"))?;
    let w2 = b.get(tape, &format!("{prefix}.w2"))?;
    let b2 = b.get(tape, &format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, w2)?;
    tape.add(h, b2)
}

/// Pre-norm FFN sublayer with residual.
fn ffn_block(tape: &mut Tape, b: &mut Binder, cfg: &ModelConfig, prefix: &str, x: Var, mode: &mut Mode) -> Result<Var> {
    let h = layer_norm(tape, b, &format!("{prefix}.ffn_norm"), x)?;
    let h = feed_forward(tape, b, &format!("{prefix}.ffn"), h)?;
    let h = dropout(tape, h, cfg.dropout_p, mode)?;
    tape.add(x, h)
}

/// Token embeddings plus the additive position encoding, if the scheme has one.
fn embed(tape: &mut Tape, b: &mut Binder, cfg: &ModelConfig, ids: &[usize], side: &str) -> Result<Var> {
    let table = b.get(tape, "embed.tokens")?;
    let x = tape.embedding(table, ids)?;
    match cfg.posenc.scheme {
        Scheme::Sinusoidal => {
            let pe = posenc::sinusoidal(ids.len(), cfg.d_model, cfg.posenc.sinusoidal_factor)?;
            let pe = tape.constant(pe);
            tape.add(x, pe)
        }
        Scheme::LearnedAbsolute => {
            let table = b.get(tape, &format!("{side}.positions"))?;
            let pe = posenc::learned_absolute(tape, table, ids.len())?;
            tape.add(x, pe)
        }
        Scheme::None | Scheme::Rope | Scheme::T5Relative => Ok(posenc::none_encoding(x)),
    }
}

fn rotary(cfg: &ModelConfig, lq: usize, lk: usize) -> Option<Rotary> {
    (cfg.posenc.scheme == Scheme::Rope).then(|| Rotary {
        q_positions: Arc::new((0..lq).collect()),
        k_positions: Arc::new((0..lk).collect()),
        base: cfg.posenc.sinusoidal_factor,
    })
}

fn relative_bias(tape: &mut Tape, b: &mut Binder, cfg: &ModelConfig, side: &str) -> Result<Option<RelBias>> {
    if cfg.posenc.scheme != Scheme::T5Relative {
        return Ok(None);
    }
    Ok(Some(RelBias {
        table: b.get(tape, &format!("{side}.rel_bias"))?,
        buckets: Arc::new(RelativeBuckets::from_config(&cfg.posenc, side == "encoder")),
    }))
}

/// Runs the encoder on one sequence.
///
/// Global-local encoders carry the global tokens as extra rows after the
/// sequence; they share projections and FFN weights with the tokens but are
/// normalized by their own per-layer LayerNorm before attention.
pub fn encoder_forward(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &ModelConfig,
    ids: &[usize],
    mode: &mut Mode,
) -> Result<Encoded> {
    let l = ids.len();
    if l == 0 {
        return Err(Error::InvalidArgument("empty encoder input".into()));
    }
    if l > cfg.max_input_len {
        return Err(Error::InvalidArgument(format!(
            "input of length {l} exceeds max_input_len {}",
            cfg.max_input_len
        )));
    }
    let spec = &cfg.attention;
    let g = spec.globals();
    let mut x = embed(tape, b, cfg, ids, "encoder")?;
    x = dropout(tape, x, cfg.dropout_p, mode)?;
    if g > 0 {
        let globals = b.get(tape, "encoder.globals")?;
        x = tape.concat_rows(x, globals)?;
    }
    let rot = rotary(cfg, l, l);
    let bias = relative_bias(tape, b, cfg, "encoder")?;

    for i in 0..cfg.enc_layers {
        let p = enc_layer(i);
        let h = if g > 0 {
            let t = tape.slice_rows(x, 0, l)?;
            let gl = tape.slice_rows(x, l, l + g)?;
            let t = layer_norm(tape, b, &format!("{p}.attn_norm"), t)?;
            let gl = layer_norm(tape, b, &format!("{p}.global_norm"), gl)?;
            tape.concat_rows(t, gl)?
        } else {
            layer_norm(tape, b, &format!("{p}.attn_norm"), x)?
        };
        let pattern = match spec.variant {
            Variant::Full => Pattern::Dense(Mask::None),
            Variant::BlockLocal | Variant::GlobalLocal => Pattern::Local(Arc::new(LocalPattern {
                layout: make_block_layout(l, spec.block_size, i, spec.staggered)?,
                globals: g,
            })),
        };
        let proj = projections(tape, b, &format!("{p}.attn"))?;
        let a = multi_head(tape, h, h, &proj, cfg.num_heads, &pattern, rot.as_ref(), bias.clone())?;
        let a = dropout(tape, a, cfg.dropout_p, mode)?;
        x = tape.add(x, a)?;
        x = ffn_block(tape, b, cfg, &p, x, mode)?;
    }
    let x = layer_norm(tape, b, "encoder.final_norm", x)?;
    if g > 0 {
        Ok(Encoded {
            tokens: tape.slice_rows(x, 0, l)?,
            globals: Some(tape.slice_rows(x, l, l + g)?),
        })
    } else {
        Ok(Encoded {
            tokens: x,
            globals: None,
        })
    }
}

/// Teacher-forced decoder pass; returns `[T, V]` logits.
pub fn decoder_forward(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &ModelConfig,
    out_ids: &[usize],
    enc: &Encoded,
    mode: &mut Mode,
) -> Result<Var> {
    let t = out_ids.len();
    if t == 0 {
        return Err(Error::InvalidArgument("empty decoder input".into()));
    }
    if t > cfg.max_output_len {
        return Err(Error::InvalidArgument(format!(
            "decoder input of length {t} exceeds max_output_len {}",
            cfg.max_output_len
        )));
    }
    let globals = match (cfg.decoder_global_attn, enc.globals) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "decoder_global_attn is set but the encoder produced no global states".into(),
            ))
        }
        (_, g) => g,
    };
    let l = tape.shape(enc.tokens)[0];
    let mut y = embed(tape, b, cfg, out_ids, "decoder")?;
    y = dropout(tape, y, cfg.dropout_p, mode)?;
    let self_rot = rotary(cfg, t, t);
    let cross_rot = rotary(cfg, t, l);
    let bias = relative_bias(tape, b, cfg, "decoder")?;
    let causal = Pattern::Dense(Mask::Causal);
    let dense = Pattern::Dense(Mask::None);

    for i in 0..cfg.dec_layers {
        let p = dec_layer(i);
        let h = layer_norm(tape, b, &format!("{p}.self_norm"), y)?;
        let proj = projections(tape, b, &format!("{p}.self"))?;
        let a = multi_head(tape, h, h, &proj, cfg.num_heads, &causal, self_rot.as_ref(), bias.clone())?;
        let a = dropout(tape, a, cfg.dropout_p, mode)?;
        y = tape.add(y, a)?;
        if cfg.cross_attn_layers.contains(&i) {
            if cfg.decoder_global_attn {
                let gl = globals.expect("checked above");
                let h = layer_norm(tape, b, &format!("{p}.global_cross_norm"), y)?;
                let proj = projections(tape, b, &format!("{p}.global_cross"))?;
                let a = multi_head(tape, h, gl, &proj, cfg.num_heads, &dense, None, None)?;
                let a = dropout(tape, a, cfg.dropout_p, mode)?;
                y = tape.add(y, a)?;
            }
            let h = layer_norm(tape, b, &format!("{p}.cross_norm"), y)?;
            let proj = projections(tape, b, &format!("{p}.cross"))?;
            let a = multi_head(tape, h, enc.tokens, &proj, cfg.num_heads, &dense, cross_rot.as_ref(), None)?;
            let a = dropout(tape, a, cfg.dropout_p, mode)?;
            y = tape.add(y, a)?;
        }
        y = ffn_block(tape, b, cfg, &p, y, mode)?;
    }
    let y = layer_norm(tape, b, "decoder.final_norm", y)?;
    let out = if cfg.tie_embeddings {
        let table = b.get(tape, "embed.tokens")?;
        tape.transpose(table)?
    } else {
        b.get(tape, "output.proj")?
    };
    tape.matmul(y, out)
}

/// Decoder inputs for teacher forcing: the start token followed by all but
/// the last target token.
pub fn shift_right(cfg: &ModelConfig, target_ids: &[usize]) -> Vec<usize> {
    std::iter::once(cfg.decoder_start_id)
        .chain(target_ids[..target_ids.len().saturating_sub(1)].iter().copied())
        .collect()
}

/// Mean cross-entropy of `target_ids` under teacher forcing; padding is ignored.
pub fn seq2seq_loss(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &ModelConfig,
    input_ids: &[usize],
    target_ids: &[usize],
    mode: &mut Mode,
) -> Result<Var> {
    if target_ids.is_empty() {
        return Err(Error::InvalidArgument("empty target".into()));
    }
    let enc = encoder_forward(tape, b, cfg, input_ids, mode)?;
    let logits = decoder_forward(tape, b, cfg, &shift_right(cfg, target_ids), &enc, mode)?;
    tape.cross_entropy(logits, target_ids, PAD)
}
