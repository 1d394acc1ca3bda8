mod common;

use std::collections::BTreeSet;

use longattn_core::adapt::{
    drop_cross_attention, port_to_global_local, port_to_local, replicate_positions, Checkpoint, Manifest, ManifestEntry,
    CONFIG_FILE, MANIFEST_FILE, PARAMS_FILE,
};
use longattn_core::attention::AttentionSpec;
use longattn_core::model::{count_params, param_inventory, Model, ModelConfig};
use longattn_core::posenc::{PosEncConfig, Scheme};
use longattn_core::Error;
use rand::Rng;

const V: usize = 17;

fn config(attention: AttentionSpec, scheme: Scheme, enc: usize, dec: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(V, 8, 2, 16, enc, dec, attention, PosEncConfig::new(scheme));
    cfg.max_input_len = 16;
    cfg.max_output_len = 6;
    cfg.dropout_p = 0.0;
    cfg
}

fn ckpt(cfg: ModelConfig, seed: u64) -> Checkpoint {
    Checkpoint::from_model(&Model::with_init_std(cfg, seed, 0.3).unwrap()).unwrap()
}

fn ids(len: usize, seed: u64) -> Vec<usize> {
    let mut r = common::rng(seed);
    (0..len).map(|_| r.gen_range(4..V)).collect()
}

#[test]
fn save_load_save_is_byte_identical() {
    let cfg = config(AttentionSpec::global_local(4, 2, true, 2, 4), Scheme::T5Relative, 2, 2);
    let a = ckpt(cfg, 1);
    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    a.save(&d1).unwrap();
    let model = Checkpoint::open(&d1).unwrap().to_model().unwrap();
    Checkpoint::from_model(&model).unwrap().save(&d2).unwrap();
    for f in [MANIFEST_FILE, PARAMS_FILE, CONFIG_FILE] {
        assert_eq!(std::fs::read(d1.join(f)).unwrap(), std::fs::read(d2.join(f)).unwrap(), "{f}");
    }
    let blob = std::fs::read(d1.join(PARAMS_FILE)).unwrap();
    assert_eq!(blob.len(), count_params(&a.config) * 4);
}

#[test]
fn load_values_are_the_stored_f32s() {
    let cfg = config(AttentionSpec::full(2, 4), Scheme::None, 1, 1);
    let m = Model::with_init_std(cfg, 2, 0.3).unwrap();
    let loaded = Checkpoint::from_model(&m).unwrap().to_model().unwrap();
    for (name, t) in m.params.iter() {
        let got = loaded.params.get(name).unwrap();
        for (a, b) in t.data().iter().zip(got.data()) {
            assert_eq!(*b, f64::from(*a as f32));
        }
    }
}

/// Manifest and blob written by hand: element `j` of the `i`-th parameter in
/// inventory order holds `i + j / 1024`, which is exact in f32.
#[test]
fn hand_built_checkpoint_loads() {
    let cfg = config(AttentionSpec::full(2, 4), Scheme::LearnedAbsolute, 1, 1);
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (i, p) in param_inventory(&cfg).iter().enumerate() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: "f32le".into(),
            offset: blob.len(),
        });
        let n: usize = p.shape.iter().product();
        for j in 0..n {
            blob.extend_from_slice(&(i as f32 + j as f32 / 1024.0).to_le_bytes());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let reference = ckpt(cfg.clone(), 0);
    reference.save(dir.path()).unwrap();
    let hash = serde_json::from_slice::<Manifest>(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap())
        .unwrap()
        .config_hash;
    let manifest = Manifest {
        format_version: 1,
        compute_dtype: "f64".into(),
        config_hash: hash,
        params: entries,
    };
    let model = Checkpoint::from_parts(manifest, cfg.clone(), &blob).unwrap().to_model().unwrap();
    for (i, p) in param_inventory(&cfg).iter().enumerate() {
        let t = model.params.get(&p.name).unwrap();
        assert_eq!(t.shape(), p.shape.as_slice());
        for (j, &x) in t.data().iter().enumerate() {
            assert_eq!(x, i as f64 + j as f64 / 1024.0, "{}[{j}]", p.name);
        }
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = config(AttentionSpec::full(2, 4), Scheme::None, 1, 1);
    let c = ckpt(cfg.clone(), 3);
    let (manifest, blob) = (c.manifest().unwrap(), c.blob().unwrap());
    let ok = Checkpoint::from_parts(manifest.clone(), cfg.clone(), &blob).unwrap();
    assert_eq!(ok, c);

    let mut m = manifest.clone();
    m.format_version = 2;
    assert!(matches!(Checkpoint::from_parts(m, cfg.clone(), &blob), Err(Error::Checkpoint(_))));

    let mut other = cfg.clone();
    other.max_input_len += 1;
    assert!(Checkpoint::from_parts(manifest.clone(), other, &blob).is_err());

    assert!(Checkpoint::from_parts(manifest.clone(), cfg.clone(), &blob[..blob.len() - 4]).is_err());
    let mut longer = blob.clone();
    longer.extend_from_slice(&[0; 4]);
    assert!(Checkpoint::from_parts(manifest.clone(), cfg.clone(), &longer).is_err());

    let mut m = manifest.clone();
    m.params[1].offset -= 4;
    assert!(Checkpoint::from_parts(m, cfg.clone(), &blob).is_err());

    let mut m = manifest.clone();
    m.params.pop();
    let cut = manifest.params.last().unwrap().offset;
    assert!(Checkpoint::from_parts(m, cfg.clone(), &blob[..cut]).is_err());

    let mut m = manifest;
    m.params[0].dtype = "bf16".into();
    assert!(Checkpoint::from_parts(m, cfg, &blob).is_err());
}

#[test]
fn load_with_wrong_width_names_the_parameter() {
    let cfg = config(AttentionSpec::full(2, 4), Scheme::None, 1, 1);
    let c = ckpt(cfg.clone(), 4);
    let mut wide = cfg;
    wide.d_model = 12;
    wide.attention = AttentionSpec::full(2, 6);
    match c.load(&wide) {
        Err(Error::ParamShape { name, expected, found }) => {
            assert_eq!(name, "embed.tokens");
            assert_eq!((expected, found), (vec![V, 12], vec![V, 8]));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn port_to_local_keeps_weights_and_logits() {
    for scheme in Scheme::ALL {
        let src = ckpt(config(AttentionSpec::full(2, 4), scheme, 2, 2), 5);
        let local = port_to_local(&src, AttentionSpec::block_local(16, false, 2, 4)).unwrap();
        assert_eq!(local.blob().unwrap(), src.blob().unwrap());
        assert_eq!(local.config.attention, AttentionSpec::block_local(16, false, 2, 4));
        let (a, b) = (src.to_model().unwrap(), local.to_model().unwrap());
        for len in [3, 11, 16] {
            let input = ids(len, len as u64);
            let diff = a.logits(&input, &[3, 7]).unwrap().max_abs_diff(&b.logits(&input, &[3, 7]).unwrap());
            assert!(diff < 1e-8, "{scheme:?} {len}: {diff}");
        }
    }
    let src = ckpt(config(AttentionSpec::full(2, 4), Scheme::None, 1, 1), 5);
    assert!(port_to_local(&src, AttentionSpec::full(2, 4)).is_err());
    assert!(port_to_local(&src, AttentionSpec::block_local(4, false, 4, 2)).is_err());
}

#[test]
fn port_to_global_local_adds_only_globals_and_norms() {
    let src = ckpt(config(AttentionSpec::block_local(4, false, 2, 4), Scheme::Rope, 3, 2), 6);
    let g = 5;
    let gl = port_to_global_local(&src, AttentionSpec::global_local(4, g, false, 2, 4), 9).unwrap();
    assert_eq!(gl.num_params() - src.num_params(), g * 8 + 3 * 2 * 8);
    assert_eq!(gl.num_params(), count_params(&gl.config));

    let (_, vocab) = src.get("embed.tokens").unwrap();
    let (shape, globals) = gl.get("encoder.globals").unwrap();
    assert_eq!(shape, &[g, 8]);
    for row in globals.chunks(8) {
        assert!(vocab.chunks(8).any(|v| v == row), "{row:?}");
    }
    for i in 0..3 {
        for part in ["gain", "bias"] {
            let a = gl.get(&format!("encoder.layer{i}.global_norm.{part}")).unwrap();
            let b = src.get(&format!("encoder.layer{i}.attn_norm.{part}")).unwrap();
            assert_eq!(a, b);
        }
    }
    let before = src.param_digests();
    let after = gl.param_digests();
    for (name, h) in &before {
        assert_eq!(&after[name], h, "{name}");
    }
    gl.to_model().unwrap().logits(&ids(10, 1), &[3]).unwrap();

    assert!(port_to_global_local(&gl, AttentionSpec::global_local(4, 2, false, 2, 4), 0).is_err());
    assert!(port_to_global_local(&src, AttentionSpec::block_local(4, false, 2, 4), 0).is_err());
}

#[test]
fn global_rows_can_outnumber_the_vocabulary() {
    let src = ckpt(config(AttentionSpec::full(2, 4), Scheme::None, 1, 1), 7);
    let gl = port_to_global_local(&src, AttentionSpec::global_local(4, 3 * V, false, 2, 4), 1).unwrap();
    assert_eq!(gl.get("encoder.globals").unwrap().0, &[3 * V, 8]);
}

#[test]
fn global_port_seeds_differ_only_in_global_rows() {
    let src = ckpt(config(AttentionSpec::full(2, 4), Scheme::T5Relative, 2, 1), 8);
    let spec = AttentionSpec::global_local(4, 6, true, 2, 4);
    let a = port_to_global_local(&src, spec.clone(), 1).unwrap();
    let a2 = port_to_global_local(&src, spec.clone(), 1).unwrap();
    let b = port_to_global_local(&src, spec, 2).unwrap();
    assert_eq!(a, a2);
    let (da, db) = (a.param_digests(), b.param_digests());
    let differing: Vec<&String> = da.keys().filter(|k| da[*k] != db[*k]).collect();
    assert_eq!(differing, vec!["encoder.globals"]);
}

#[test]
fn replicated_positions_tile_and_keep_short_logits() {
    let src = ckpt(config(AttentionSpec::full(2, 4), Scheme::LearnedAbsolute, 2, 2), 9);
    let long = replicate_positions(&src, 40).unwrap();
    assert_eq!(long.config.max_input_len, 40);
    let (shape, table) = long.get("encoder.positions").unwrap();
    assert_eq!(shape, &[40, 8]);
    for p in 0..40 {
        assert_eq!(&table[p * 8..(p + 1) * 8], &table[(p % 16) * 8..(p % 16 + 1) * 8]);
    }
    let (a, b) = (src.to_model().unwrap(), long.to_model().unwrap());
    for len in [1, 9, 16] {
        let input = ids(len, 30 + len as u64);
        assert_eq!(a.logits(&input, &[3, 5, 8]).unwrap(), b.logits(&input, &[3, 5, 8]).unwrap());
    }
    b.logits(&ids(40, 2), &[3]).unwrap();
    assert!(a.logits(&ids(17, 2), &[3]).is_err());

    assert!(replicate_positions(&src, 15).is_err());
    let rope = ckpt(config(AttentionSpec::full(2, 4), Scheme::Rope, 1, 1), 9);
    assert!(replicate_positions(&rope, 32).is_err());
}

fn twelve_layer_decoder() -> Checkpoint {
    ckpt(config(AttentionSpec::global_local(4, 2, false, 2, 4), Scheme::LearnedAbsolute, 1, 12), 10)
}

#[test]
fn drop_cross_attention_keep_all_is_identity() {
    let src = twelve_layer_decoder();
    let same = drop_cross_attention(&src, &(0..12).collect()).unwrap();
    assert_eq!(same, src);
}

#[test]
fn drop_cross_attention_to_layers_zero_and_six() {
    let mut cfg = config(AttentionSpec::global_local(4, 2, false, 2, 4), Scheme::LearnedAbsolute, 1, 12);
    cfg.decoder_global_attn = true;
    for src in [twelve_layer_decoder(), ckpt(cfg, 11)] {
        let keep: BTreeSet<usize> = [0, 6].into();
        let dropped = drop_cross_attention(&src, &keep).unwrap();
        let mut target = src.config.clone();
        target.cross_attn_layers = keep.clone();
        assert_eq!(dropped.config, target);
        assert_eq!(dropped.num_params(), count_params(&target));

        let groups = |c: &Checkpoint| {
            c.names()
                .filter(|n| n.ends_with(".cross.q"))
                .count()
        };
        assert_eq!(groups(&src) - groups(&dropped), 10);

        let (before, after) = (src.param_digests(), dropped.param_digests());
        for (name, h) in &after {
            assert_eq!(&before[name], h, "{name}");
        }
        let model = dropped.to_model().unwrap();
        model.logits(&ids(12, 3), &[3, 4, 5]).unwrap();
    }
    let src = twelve_layer_decoder();
    assert!(drop_cross_attention(&src, &BTreeSet::new()).is_err());
    assert!(drop_cross_attention(&src, &[12].into()).is_err());
}

#[test]
fn replicate_and_drop_commute() {
    let src = twelve_layer_decoder();
    let keep: BTreeSet<usize> = [1, 5, 11].into();
    let a = replicate_positions(&drop_cross_attention(&src, &keep).unwrap(), 48).unwrap();
    let b = drop_cross_attention(&replicate_positions(&src, 48).unwrap(), &keep).unwrap();
    assert_eq!(a.blob().unwrap(), b.blob().unwrap());
    assert_eq!(a.manifest().unwrap(), b.manifest().unwrap());
}

#[test]
fn surgery_is_deterministic() {
    let src = ckpt(config(AttentionSpec::full(2, 4), Scheme::LearnedAbsolute, 2, 3), 12);
    let run = || {
        let c = port_to_global_local(&src, AttentionSpec::global_local(4, 3, true, 2, 4), 5).unwrap();
        let c = replicate_positions(&c, 64).unwrap();
        drop_cross_attention(&c, &[2].into()).unwrap().blob().unwrap()
    };
    assert_eq!(run(), run());
}
