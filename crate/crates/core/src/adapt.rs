//! On-disk checkpoints and weight surgery between architectures.
//!
//! A checkpoint directory holds `manifest.json`, `params.bin` (little-endian
//! f32, concatenated in manifest order) and `config.json`. Values are stored
//! at 32 bits and widened to f64 on load, so save/load/save is byte-stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionSpec, Variant};
use crate::error::{Error, Result};
use crate::model::{dec_layer, enc_layer, param_inventory, Model, ModelConfig, ParamStore};
use crate::posenc::{self, Scheme};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const STORAGE_DTYPE: &str = "f32le";
pub const COMPUTE_DTYPE: &str = "f64";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Precision used by the math once loaded.
    pub compute_dtype: String,
    pub config_hash: String,
    pub params: Vec<ManifestEntry>,
}

/// Parameters stored at 32 bits plus the config they belong to.
///
/// Tensors are kept in the config's inventory order, which is also the
/// order of the manifest and the blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn config_hash(cfg: &ModelConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Narrows a model's parameters to f32.
    pub fn from_model(model: &Model) -> Result<Self> {
        model.params.check_against(&model.config)?;
        let tensors = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.to_f32())))
            .collect();
        Ok(Self {
            config: model.config.clone(),
            tensors,
        })
    }

    /// Builds a model for `cfg`, which must match the stored parameters name
    /// for name and shape for shape.
    pub fn load(&self, cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let params: ParamStore = self
            .tensors
            .iter()
            .map(|(n, (shape, data))| Ok((n.clone(), Tensor::from_f32(shape.clone(), data)?)))
            .collect::<Result<_>>()?;
        Model::from_parts(cfg.clone(), params)
    }

    /// [`Checkpoint::load`] with the embedded config.
    pub fn to_model(&self) -> Result<Model> {
        self.load(&self.config)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|(_, d)| d.len()).sum()
    }

    /// Per-parameter SHA-256 of the stored bytes.
    pub fn param_digests(&self) -> BTreeMap<String, String> {
        self.tensors
            .iter()
            .map(|(n, (_, d))| {
                let mut h = Sha256::new();
                for x in d {
                    h.update(x.to_le_bytes());
                }
                (n.clone(), h.finalize().iter().map(|b| format!("{b:02x}")).collect())
            })
            .collect()
    }

    fn ordered(&self) -> Result<Vec<(&str, &[usize], &[f32])>> {
        let inv = param_inventory(&self.config);
        if inv.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters but the config needs {}",
                self.tensors.len(),
                inv.len()
            )));
        }
        inv.iter()
            .map(|p| {
                let (name, (shape, data)) = self
                    .tensors
                    .get_key_value(&p.name)
                    .ok_or_else(|| Error::MissingParam(p.name.clone()))?;
                Ok((name.as_str(), shape.as_slice(), data.as_slice()))
            })
            .collect()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let mut offset = 0;
        let params = self
            .ordered()?
            .into_iter()
            .map(|(name, shape, data)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    dtype: STORAGE_DTYPE.into(),
                    offset,
                };
                offset += data.len() * 4;
                e
            })
            .collect();
        Ok(Manifest {
            format_version: FORMAT_VERSION,
            compute_dtype: COMPUTE_DTYPE.into(),
            config_hash: config_hash(&self.config),
            params,
        })
    }

    /// The contents of `params.bin`.
    pub fn blob(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.num_params() * 4);
        for (_, _, data) in self.ordered()? {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest()?)?;
        let write = |file: &str, bytes: &[u8]| {
            let p = dir.join(file);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(PARAMS_FILE, &self.blob()?)?;
        write(CONFIG_FILE, self.config.to_json().as_bytes())?;
        write(MANIFEST_FILE, manifest.as_bytes())
    }

    /// Reads a checkpoint directory, checking version, config hash and blob
    /// layout.
    pub fn open(dir: &Path) -> Result<Self> {
        let read = |file: &str| {
            let p = dir.join(file);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        let config = ModelConfig::from_json(&String::from_utf8_lossy(&read(CONFIG_FILE)?))?;
        let blob = read(PARAMS_FILE)?;
        Self::from_parts(manifest, config, &blob)
    }

    /// Assembles a checkpoint from a manifest, config and raw blob.
    pub fn from_parts(manifest: Manifest, config: ModelConfig, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.config_hash != config_hash(&config) {
            return Err(Error::Checkpoint("config.json does not match the manifest hash".into()));
        }
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0;
        for e in manifest.params {
            if e.dtype != STORAGE_DTYPE {
                return Err(Error::Checkpoint(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "`{}` starts at byte {} but the previous parameter ends at {expected_offset}",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            let bytes = blob.get(e.offset..end).ok_or_else(|| {
                Error::Checkpoint(format!("`{}` runs past the end of {PARAMS_FILE}", e.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            if tensors.insert(e.name.clone(), (e.shape, data)).is_some() {
                return Err(Error::Checkpoint(format!("`{}` appears twice", e.name)));
            }
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(Error::Checkpoint(format!(
                "{PARAMS_FILE} has {} bytes, manifest accounts for {expected_offset}",
                blob.len()
            )));
        }
        let ckpt = Self { config, tensors };
        ckpt.ordered()?;
        Ok(ckpt)
    }
}

/// Swaps dense attention for block-local attention. The projections carry
/// over untouched.
pub fn port_to_local(ckpt: &Checkpoint, new_attn: AttentionSpec) -> Result<Checkpoint> {
    if new_attn.variant != Variant::BlockLocal {
        return Err(Error::InvalidArgument(format!(
            "port_to_local needs a block_local spec, got {:?}",
            new_attn.variant
        )));
    }
    let mut out = ckpt.clone();
    out.config.attention = new_attn;
    out.config.validate()?;
    Ok(out)
}

/// Adds global tokens to a model that has none.
///
/// Each global embedding is a copy of a vocabulary row drawn uniformly with
/// replacement, so any number of globals can be initialized. Each encoder
/// layer's global LayerNorm starts as a copy of its attention LayerNorm.
pub fn port_to_global_local(ckpt: &Checkpoint, new_attn: AttentionSpec, seed: u64) -> Result<Checkpoint> {
    if new_attn.variant != Variant::GlobalLocal {
        return Err(Error::InvalidArgument(format!(
            "port_to_global_local needs a global_local spec, got {:?}",
            new_attn.variant
        )));
    }
    if ckpt.config.attention.variant == Variant::GlobalLocal {
        return Err(Error::InvalidArgument("source checkpoint already has global tokens".into()));
    }
    let mut out = ckpt.clone();
    out.config.attention = new_attn;
    out.config.validate()?;

    let dm = out.config.d_model;
    let (_, vocab) = ckpt.get("embed.tokens").ok_or_else(|| Error::MissingParam("embed.tokens".into()))?;
    let rows = vocab.len() / dm;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = out.config.attention.num_global;
    let globals: Vec<f32> = (0..g)
        .flat_map(|_| {
            let r = rng.gen_range(0..rows);
            vocab[r * dm..(r + 1) * dm].to_vec()
        })
        .collect();
    out.tensors.insert("encoder.globals".into(), (vec![g, dm], globals));
    for i in 0..out.config.enc_layers {
        let p = enc_layer(i);
        for part in ["gain", "bias"] {
            let src = format!("{p}.attn_norm.{part}");
            let t = ckpt.tensors.get(&src).ok_or(Error::MissingParam(src))?.clone();
            out.tensors.insert(format!("{p}.global_norm.{part}"), t);
        }
    }
    out.ordered()?;
    Ok(out)
}

/// Tiles learned absolute encoder positions up to `new_max_len` rows.
pub fn replicate_positions(ckpt: &Checkpoint, new_max_len: usize) -> Result<Checkpoint> {
    if ckpt.config.posenc.scheme != Scheme::LearnedAbsolute {
        return Err(Error::InvalidArgument(format!(
            "position replication needs learned_absolute positions, not {:?}",
            ckpt.config.posenc.scheme
        )));
    }
    let name = "encoder.positions";
    let (shape, data) = ckpt.get(name).ok_or_else(|| Error::MissingParam(name.into()))?;
    let table = Tensor::from_f32(shape.to_vec(), data)?;
    let tiled = posenc::replicate(&table, new_max_len)?;
    let mut out = ckpt.clone();
    out.tensors
        .insert(name.into(), (tiled.shape().to_vec(), tiled.to_f32()));
    out.config.max_input_len = new_max_len;
    out.ordered()?;
    Ok(out)
}

/// Removes cross-attention from every decoder layer not in `keep`.
pub fn drop_cross_attention(ckpt: &Checkpoint, keep: &BTreeSet<usize>) -> Result<Checkpoint> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep at least one cross-attention layer".into()));
    }
    if let Some(bad) = keep.difference(&ckpt.config.cross_attn_layers).next() {
        return Err(Error::InvalidArgument(format!("decoder layer {bad} has no cross-attention to keep")));
    }
    let mut out = ckpt.clone();
    for &l in ckpt.config.cross_attn_layers.difference(keep) {
        let prefixes = [format!("{}.cross", dec_layer(l)), format!("{}.global_cross", dec_layer(l))];
        out.tensors.retain(|name, _| {
            !prefixes
                .iter()
                .any(|p| name.strip_prefix(p.as_str()).is_some_and(|rest| rest.starts_with('.') || rest.starts_with("_norm.")))
        });
    }
    out.config.cross_attn_layers = keep.clone();
    out.ordered()?;
    Ok(out)
}
