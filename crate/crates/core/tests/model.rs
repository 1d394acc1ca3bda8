mod common;

use std::collections::BTreeSet;

use longattn_core::attention::AttentionSpec;
use longattn_core::model::{
    beam_decode, count_params, greedy_decode, param_inventory, EncoderStates, Model, ModelConfig, ParamStore,
    LAYER_NORM_EPS,
};
use longattn_core::posenc::{PosEncConfig, Scheme};
use longattn_core::tensor::{relative_error, Mask};
use longattn_core::{Error, Tape, Tensor, Var};
use rand::Rng;

const V: usize = 13;

fn config(attention: AttentionSpec, scheme: Scheme, enc: usize, dec: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(V, 8, 2, 16, enc, dec, attention, PosEncConfig::new(scheme));
    cfg.max_input_len = 32;
    cfg.max_output_len = 8;
    cfg.dropout_p = 0.0;
    cfg
}

fn full_cfg(scheme: Scheme) -> ModelConfig {
    config(AttentionSpec::full(2, 4), scheme, 2, 2)
}

fn ids(len: usize, seed: u64) -> Vec<usize> {
    let mut r = common::rng(seed);
    (0..len).map(|_| r.gen_range(4..V)).collect()
}

// Reference composition from tape primitives: dense attention everywhere,
// no position encoding.

fn p(tape: &mut Tape, m: &Model, name: &str) -> Var {
    tape.constant(m.params.get(name).unwrap_or_else(|| panic!("{name}")).clone())
}

fn ln(tape: &mut Tape, m: &Model, prefix: &str, x: Var) -> Var {
    let g = p(tape, m, &format!("{prefix}.gain"));
    let b = p(tape, m, &format!("{prefix}.bias"));
    tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap()
}

fn ref_attention(tape: &mut Tape, m: &Model, prefix: &str, xq: Var, xkv: Var, mask: Mask) -> Var {
    let h = m.config.num_heads;
    let proj = |t: &mut Tape, x: Var, w: &str| {
        let w = p(t, m, &format!("{prefix}.{w}"));
        let y = t.matmul(x, w).unwrap();
        t.split_heads(y, h).unwrap()
    };
    let q = proj(tape, xq, "q");
    let k = proj(tape, xkv, "k");
    let v = proj(tape, xkv, "v");
    let a = tape.dense_attention(q, k, v, mask, None).unwrap();
    let a = tape.merge_heads(a).unwrap();
    let o = p(tape, m, &format!("{prefix}.o"));
    tape.matmul(a, o).unwrap()
}

fn ref_ffn(tape: &mut Tape, m: &Model, prefix: &str, x: Var) -> Var {
    let h = ln(tape, m, &format!("{prefix}.ffn_norm"), x);
    let w1 = p(tape, m, &format!("{prefix}.ffn.w1"));
    let b1 = p(tape, m, &format!("{prefix}.ffn.b1"));
    let w2 = p(tape, m, &format!("{prefix}.ffn.w2"));
    let b2 = p(tape, m, &format!("{prefix}.ffn.b2"));
    let h = tape.matmul(h, w1).unwrap();
    let h = tape.add(h, b1).unwrap();
    let h = tape.gelu(h).unwrap();
    let h = tape.matmul(h, w2).unwrap();
    let h = tape.add(h, b2).unwrap();
    tape.add(x, h).unwrap()
}

/// Encoder over `x` rows where every row attends to every row; LayerNorm
/// parameters for all rows come from `attn_norm`.
fn ref_encoder(tape: &mut Tape, m: &Model, mut x: Var) -> Var {
    for i in 0..m.config.enc_layers {
        let pre = format!("encoder.layer{i}");
        let h = ln(tape, m, &format!("{pre}.attn_norm"), x);
        let a = ref_attention(tape, m, &format!("{pre}.attn"), h, h, Mask::None);
        x = tape.add(x, a).unwrap();
        x = ref_ffn(tape, m, &pre, x);
    }
    ln(tape, m, "encoder.final_norm", x)
}

fn ref_decoder(tape: &mut Tape, m: &Model, dec_ids: &[usize], enc: Var) -> Var {
    let table = p(tape, m, "embed.tokens");
    let mut y = tape.embedding(table, dec_ids).unwrap();
    for i in 0..m.config.dec_layers {
        let pre = format!("decoder.layer{i}");
        let h = ln(tape, m, &format!("{pre}.self_norm"), y);
        let a = ref_attention(tape, m, &format!("{pre}.self"), h, h, Mask::Causal);
        y = tape.add(y, a).unwrap();
        let h = ln(tape, m, &format!("{pre}.cross_norm"), y);
        let a = ref_attention(tape, m, &format!("{pre}.cross"), h, enc, Mask::None);
        y = tape.add(y, a).unwrap();
        y = ref_ffn(tape, m, &pre, y);
    }
    let y = ln(tape, m, "decoder.final_norm", y);
    let t = tape.transpose(table).unwrap();
    tape.matmul(y, t).unwrap()
}

#[test]
fn full_model_matches_reference_composition() {
    let m = Model::with_init_std(full_cfg(Scheme::None), 1, 0.3).unwrap();
    let input = ids(9, 2);
    let dec = [3, 5, 7, 11];
    let mut tape = Tape::new();
    let table = p(&mut tape, &m, "embed.tokens");
    let x = tape.embedding(table, &input).unwrap();
    let enc = ref_encoder(&mut tape, &m, x);
    let logits = ref_decoder(&mut tape, &m, &dec, enc);
    let expected = tape.value(logits).clone();
    let got = m.logits(&input, &dec).unwrap();
    assert!(got.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn zeroed_ffn_leaves_attention_plus_embeddings() {
    let mut cfg = config(AttentionSpec::full(2, 4), Scheme::None, 1, 1);
    cfg.max_input_len = 8;
    let mut m = Model::with_init_std(cfg, 4, 0.3).unwrap();
    m.params.insert("encoder.layer0.ffn.w2", Tensor::zeros(vec![16, 8]));
    let input = ids(6, 5);
    let mut tape = Tape::new();
    let table = p(&mut tape, &m, "embed.tokens");
    let x = tape.embedding(table, &input).unwrap();
    let h = ln(&mut tape, &m, "encoder.layer0.attn_norm", x);
    let a = ref_attention(&mut tape, &m, "encoder.layer0.attn", h, h, Mask::None);
    let sum = tape.add(x, a).unwrap();
    let out = ln(&mut tape, &m, "encoder.final_norm", sum);
    let got = m.encode(&input).unwrap();
    assert!(got.tokens.max_abs_diff(tape.value(out)) < 1e-12);
}

#[test]
fn global_local_with_wide_block_matches_full_with_extra_row() {
    let cfg = config(AttentionSpec::global_local(16, 1, false, 2, 4), Scheme::None, 2, 2);
    let m = Model::with_init_std(cfg, 6, 0.3).unwrap();
    let input = ids(10, 7);
    let mut tape = Tape::new();
    let table = p(&mut tape, &m, "embed.tokens");
    let x = tape.embedding(table, &input).unwrap();
    let g = p(&mut tape, &m, "encoder.globals");
    let x = tape.concat_rows(x, g).unwrap();
    // Fresh global norms equal fresh token norms, so one LayerNorm serves both.
    let enc = ref_encoder(&mut tape, &m, x);
    let expected = tape.value(enc).clone();
    let got = m.encode(&input).unwrap();
    let all = Tensor::new(
        vec![11, 8],
        got.tokens.data().iter().chain(got.globals.as_ref().unwrap().data()).copied().collect(),
    )
    .unwrap();
    assert!(all.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn block_local_with_wide_block_matches_full_for_every_encoding() {
    for scheme in Scheme::ALL {
        let full = Model::with_init_std(full_cfg(scheme), 8, 0.3).unwrap();
        for staggered in [false, true] {
            let mut cfg = full.config.clone();
            cfg.attention = AttentionSpec::block_local(32, staggered, 2, 4);
            let local = Model::from_parts(cfg, full.params.clone()).unwrap();
            // Odd staggered layers shift by half a block, so one block only
            // covers the sequence when it fits in half a block.
            let lens: &[usize] = if staggered { &[5, 16] } else { &[5, 17, 32] };
            for &len in lens {
                let input = ids(len, len as u64);
                let dec = [3, 9, 4];
                let a = full.logits(&input, &dec).unwrap();
                let b = local.logits(&input, &dec).unwrap();
                assert!(a.max_abs_diff(&b) < 1e-8, "{scheme:?} staggered={staggered} len={len}");
            }
        }
    }
}

#[test]
fn same_seed_same_model() {
    let cfg = config(AttentionSpec::global_local(4, 2, true, 2, 4), Scheme::T5Relative, 2, 2);
    let a = Model::new(cfg.clone(), 11).unwrap();
    let b = Model::new(cfg.clone(), 11).unwrap();
    let c = Model::new(cfg, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let input = ids(14, 1);
    assert_eq!(a.encode(&input).unwrap(), b.encode(&input).unwrap());
    assert_eq!(a.logits(&input, &[3, 4]).unwrap(), b.logits(&input, &[3, 4]).unwrap());
}

#[test]
fn decoder_is_causal() {
    for scheme in Scheme::ALL {
        let m = Model::with_init_std(full_cfg(scheme), 13, 0.3).unwrap();
        let input = ids(7, 3);
        let base = [3, 5, 6, 7, 8];
        let a = m.logits(&input, &base).unwrap();
        for t in 1..base.len() {
            let mut changed = base;
            changed[t] = 12;
            let b = m.logits(&input, &changed).unwrap();
            for s in 0..t {
                assert_eq!(a.row(s), b.row(s), "{scheme:?} t={t} s={s}");
            }
            assert_ne!(a.row(t), b.row(t));
        }
    }
}

#[test]
fn cross_attention_params_exist_only_on_configured_layers() {
    let mut cfg = config(AttentionSpec::full(2, 4), Scheme::None, 1, 4);
    cfg.cross_attn_layers = BTreeSet::from([0, 2]);
    let names: Vec<String> = param_inventory(&cfg).into_iter().map(|p| p.name).collect();
    for layer in 0..4 {
        let has = names.iter().any(|n| n.starts_with(&format!("decoder.layer{layer}.cross.")));
        assert_eq!(has, layer == 0 || layer == 2, "layer {layer}");
    }
    let m = Model::new(cfg, 0).unwrap();
    assert_eq!(m.num_params(), count_params(&m.config));
}

#[test]
fn encoder_reaches_the_decoder_only_through_cross_layers() {
    let mut cfg = config(AttentionSpec::full(2, 4), Scheme::None, 1, 3);
    cfg.cross_attn_layers = BTreeSet::from([0]);
    let mut m = Model::with_init_std(cfg, 21, 0.3).unwrap();
    let dec = [3, 4, 5];
    let a = m.logits(&ids(6, 1), &dec).unwrap();
    let b = m.logits(&ids(6, 2), &dec).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
    // With layer 0's cross output projection zeroed, no other path remains.
    m.params.insert("decoder.layer0.cross.o", Tensor::zeros(vec![8, 8]));
    let a = m.logits(&ids(6, 1), &dec).unwrap();
    let b = m.logits(&ids(6, 2), &dec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decoder_global_attention_uses_globals() {
    let mut cfg = config(AttentionSpec::global_local(4, 2, false, 2, 4), Scheme::Rope, 1, 1);
    cfg.decoder_global_attn = true;
    let m = Model::with_init_std(cfg, 3, 0.3).unwrap();
    let input = ids(9, 4);
    let enc = m.encode(&input).unwrap();
    let base = m.decode_logits(&enc, &[3, 6]).unwrap();
    let mut shifted = enc.clone();
    shifted.globals = Some(enc.globals.as_ref().unwrap().map(|x| x + 0.5));
    assert!(base.max_abs_diff(&m.decode_logits(&shifted, &[3, 6]).unwrap()) > 1e-6);
    let missing = EncoderStates {
        tokens: enc.tokens.clone(),
        globals: None,
    };
    assert!(matches!(m.decode_logits(&missing, &[3]), Err(Error::InvalidArgument(_))));
}

#[test]
fn rejects_overlong_inputs_and_outputs() {
    let m = Model::new(full_cfg(Scheme::None), 0).unwrap();
    assert!(matches!(m.encode(&ids(33, 0)), Err(Error::InvalidArgument(_))));
    assert!(matches!(m.encode(&[]), Err(Error::InvalidArgument(_))));
    assert!(matches!(m.logits(&ids(4, 0), &[3; 9]), Err(Error::InvalidArgument(_))));
    assert!(m.encode(&ids(32, 0)).is_ok());
}

#[test]
fn config_validation() {
    let base = full_cfg(Scheme::None);
    let mut c = base.clone();
    c.cross_attn_layers = BTreeSet::new();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.cross_attn_layers = BTreeSet::from([2]);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.decoder_global_attn = true;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.attention = AttentionSpec::full(4, 2);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.decoder_start_id = V;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let json = base.to_json();
    assert_eq!(ModelConfig::from_json(&json).unwrap(), base);
    let extra = json.replacen('{', "{\"surprise\": 1,", 1);
    assert!(matches!(ModelConfig::from_json(&extra), Err(Error::Config(_))));
}

#[test]
fn arch_hash_tracks_layout_but_not_dropout() {
    let a = config(AttentionSpec::block_local(4, true, 2, 4), Scheme::None, 2, 2);
    let mut b = a.clone();
    b.attention.staggered = false;
    let mut c = a.clone();
    c.dropout_p = 0.3;
    assert_ne!(a.arch_hash(), b.arch_hash());
    assert_eq!(a.arch_hash(), c.arch_hash());
    assert_eq!(a.arch_hash().len(), 64);
}

#[test]
fn hand_counted_toy_config() {
    let cfg = ModelConfig::new(10, 4, 2, 8, 1, 1, AttentionSpec::full(2, 2), PosEncConfig::new(Scheme::None));
    // embed 40; encoder layer 8+64+8+76; encoder norm 8;
    // decoder layer 8+64+8+64+8+76; decoder norm 8.
    assert_eq!(count_params(&cfg), 440);
    assert_eq!(ParamStore::init(&cfg, 0, 0.02).num_elements(), 440);
}

#[test]
fn global_local_param_delta() {
    for (g, layers) in [(1, 1), (4, 3), (16, 2)] {
        let bl = config(AttentionSpec::block_local(4, false, 2, 4), Scheme::None, layers, 2);
        let gl = config(AttentionSpec::global_local(4, g, false, 2, 4), Scheme::None, layers, 2);
        assert_eq!(count_params(&gl) - count_params(&bl), g * 8 + layers * 2 * 8);
    }
}

#[test]
fn dropping_cross_layers_param_delta() {
    let full = config(AttentionSpec::full(2, 4), Scheme::None, 1, 6);
    for k in 1..6 {
        let mut c = full.clone();
        c.cross_attn_layers = (k..6).collect();
        assert_eq!(count_params(&full) - count_params(&c), k * (4 * 8 * 8 + 2 * 8));
    }
}

#[test]
fn zero_init_gives_uniform_loss() {
    let mut cfg = ModelConfig::new(4, 8, 2, 16, 1, 1, AttentionSpec::full(2, 4), PosEncConfig::new(Scheme::None));
    cfg.dropout_p = 0.0;
    let m = Model::with_init_std(cfg.clone(), 0, 0.0).unwrap();
    let loss = m.loss(&[0, 1, 2], &[2, 0, 1]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    let m = Model::new(cfg, 0).unwrap();
    assert!((m.loss(&[0, 1, 2], &[2, 0, 1]).unwrap() - 4f64.ln()).abs() < 0.05);
}

#[test]
fn all_padding_target_has_zero_loss() {
    let m = Model::new(full_cfg(Scheme::Sinusoidal), 0).unwrap();
    assert_eq!(m.loss(&ids(5, 0), &[1, 1, 1]).unwrap(), 0.0);
    let (loss, grads) = m.loss_and_grads(&ids(5, 0), &[1, 1], None).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.values().all(|g| g.data().iter().all(|&x| x == 0.0)));
}

fn variants() -> Vec<(&'static str, AttentionSpec, bool)> {
    vec![
        ("full", AttentionSpec::full(2, 4), false),
        ("block_local", AttentionSpec::block_local(4, true, 2, 4), false),
        ("global_local", AttentionSpec::global_local(4, 2, true, 2, 4), true),
    ]
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, spec, dec_global) in variants() {
        for scheme in Scheme::ALL {
            let mut cfg = config(spec.clone(), scheme, 2, 2);
            cfg.decoder_global_attn = dec_global;
            let m = Model::with_init_std(cfg, 17, 0.3).unwrap();
            let input = ids(10, 9);
            let target = [5, 7, 1, 2];
            let (_, grads) = m.loss_and_grads(&input, &target, None).unwrap();
            assert_eq!(grads.len(), m.params.len(), "{name} {scheme:?}: every parameter is used");
            let mut worst: f64 = 0.0;
            for (pname, t) in m.params.iter() {
                let g = &grads[pname];
                let n = t.numel();
                for idx in [0, n / 2, n - 1, (n * 7) / 11] {
                    let h = 1e-5;
                    let mut plus = m.clone();
                    plus.params.insert(pname, t.with_element(idx, t.data()[idx] + h));
                    let mut minus = m.clone();
                    minus.params.insert(pname, t.with_element(idx, t.data()[idx] - h));
                    let fd = (plus.loss(&input, &target).unwrap() - minus.loss(&input, &target).unwrap()) / (2.0 * h);
                    let err = relative_error(g.data()[idx], fd);
                    // Entries whose gradient sits at finite-difference noise level
                    // carry no signal about correctness.
                    if g.data()[idx].abs().max(fd.abs()) > 1e-7 {
                        worst = worst.max(err);
                    }
                }
            }
            assert!(worst < 1e-4, "{name} {scheme:?}: {worst:e}");
        }
    }
}

#[test]
fn greedy_respects_max_len_and_eos() {
    let m = Model::new(full_cfg(Scheme::None), 2).unwrap();
    assert_eq!(greedy_decode(&m, &ids(4, 1), 1, 2).unwrap().len(), 1);
    assert!(greedy_decode(&m, &ids(4, 1), 0, 2).is_err());
    assert!(greedy_decode(&m, &ids(4, 1), 9, 2).is_err());

    // Untied output that always prefers the EOS id.
    let mut cfg = full_cfg(Scheme::None);
    cfg.tie_embeddings = false;
    let mut m = Model::new(cfg, 2).unwrap();
    m.params.insert("decoder.final_norm.gain", Tensor::zeros(vec![8]));
    m.params.insert("decoder.final_norm.bias", Tensor::ones(vec![8]));
    m.params.insert(
        "output.proj",
        Tensor::from_fn(vec![8, V], |i| if i % V == 2 { 1.0 } else { 0.0 }),
    );
    assert_eq!(greedy_decode(&m, &ids(4, 1), 8, 2).unwrap(), vec![2]);
}

fn tiny_vocab_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::new(3, 8, 2, 16, 1, 2, AttentionSpec::full(2, 4), PosEncConfig::new(Scheme::Sinusoidal));
    cfg.dropout_p = 0.0;
    cfg.decoder_start_id = 0;
    cfg.max_output_len = 3;
    Model::with_init_std(cfg, seed, 0.8).unwrap()
}

fn sequence_log_prob(m: &Model, input: &[usize], seq: &[usize]) -> f64 {
    let mut dec = vec![m.config.decoder_start_id];
    dec.extend_from_slice(&seq[..seq.len() - 1]);
    let logits = m.logits(input, &dec).unwrap();
    seq.iter()
        .enumerate()
        .map(|(t, &tok)| {
            let row = logits.row(t);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row[tok] - lse
        })
        .sum()
}

/// Every finished sequence: ends in EOS, or reaches `max_len` without it.
fn all_sequences(v: usize, eos: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for tok in 0..v {
                let mut s: Vec<usize> = prefix.clone();
                s.push(tok);
                if tok == eos || s.len() == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn wide_beam_with_zero_alpha_matches_exhaustive_search() {
    let eos = 2;
    let seqs = all_sequences(3, eos, 3);
    assert_eq!(seqs.len(), 1 + 2 + 4 + 8);
    for seed in 0..6 {
        let m = tiny_vocab_model(seed);
        let input = [1, 0, 2, 1];
        let best = seqs
            .iter()
            .map(|s| (sequence_log_prob(&m, &input, s), s))
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .unwrap();
        let beam = beam_decode(&m, &input, 9, 0.0, 3, eos).unwrap();
        assert_eq!(&beam, best.1, "seed {seed}");
        // A narrow beam can only do as well as the exhaustive optimum.
        let narrow = beam_decode(&m, &input, 2, 0.0, 3, eos).unwrap();
        assert!(sequence_log_prob(&m, &input, &narrow) <= best.0 + 1e-12);
    }
}

#[test]
fn length_penalty_ranking_matches_exhaustive_search() {
    let seqs = all_sequences(3, 2, 3);
    for alpha in [0.6, 1.5] {
        for seed in 0..4 {
            let m = tiny_vocab_model(seed + 40);
            let input = [0, 1, 1];
            let score = |s: &Vec<usize>| sequence_log_prob(&m, &input, s) / ((5.0 + s.len() as f64) / 6.0).powf(alpha);
            let best = seqs.iter().max_by(|a, b| score(a).partial_cmp(&score(b)).unwrap()).unwrap();
            assert_eq!(&beam_decode(&m, &input, 9, alpha, 3, 2).unwrap(), best);
        }
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for scheme in Scheme::ALL {
        let m = Model::with_init_std(full_cfg(scheme), 5, 0.5).unwrap();
        for seed in 0..5 {
            let input = ids(6, seed);
            for eos in [2, 7] {
                assert_eq!(
                    beam_decode(&m, &input, 1, 0.8, 8, eos).unwrap(),
                    greedy_decode(&m, &input, 8, eos).unwrap()
                );
            }
        }
    }
}

#[test]
fn beam_never_extends_past_eos() {
    for seed in 0..8 {
        let m = Model::with_init_std(full_cfg(Scheme::Rope), seed, 0.5).unwrap();
        for eos in 4..V {
            let out = beam_decode(&m, &ids(5, seed), 3, 0.8, 8, eos).unwrap();
            assert!(!out[..out.len() - 1].contains(&eos), "{out:?}");
        }
    }
    let m = Model::new(full_cfg(Scheme::None), 0).unwrap();
    assert!(matches!(beam_decode(&m, &[4], 0, 0.0, 2, 2), Err(Error::InvalidArgument(_))));
}
