//! Experiment configuration: built-in defaults, a JSON file merged on top,
//! then `--set dotted.path=value` overrides. Unknown keys are errors.

use std::collections::BTreeSet;
use std::path::Path;

use longattn_core::attention::AttentionSpec;
use longattn_core::bench::{BenchSpec, ScalingConfig};
use longattn_core::data::{CorpusKind, LenDist, NeedleParams, ScheduleParams, ScheduleShape};
use longattn_core::model::ModelConfig;
use longattn_core::posenc::{PosEncConfig, Scheme};
use longattn_core::train::{Decoding, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Std of freshly initialized matrices and embeddings.
    pub init_std: f64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub bench: ScalingConfig,
    pub dump_mask: DumpMaskConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: CorpusKind,
    pub n_train: usize,
    pub n_test: usize,
    pub len: LenDist,
    pub needle: NeedleParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub shape: ScheduleShape,
    pub schedule: ScheduleParams,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Documents with no more than this many characters are skipped.
    pub min_doc_chars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// Surgeries applied in order when `--surgery` is not given.
    pub chain: Vec<Surgery>,
    /// Target attention of the `local` surgery.
    pub local: AttentionSpec,
    /// Target attention of the `global_local` surgery.
    pub global_local: AttentionSpec,
    /// New encoder position count for `replicate_positions`.
    pub max_input_len: usize,
    /// Decoder layers that keep cross-attention under `drop_cross_attention`.
    pub keep_cross_layers: BTreeSet<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Surgery {
    Local,
    GlobalLocal,
    ReplicatePositions,
    DropCrossAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub decoding: Decoding,
    /// Decode length cap; the model's `max_output_len` when absent.
    pub max_len: Option<usize>,
    /// Use ROUGE-Lsum instead of ROUGE-L as the third term of RG.
    pub rg_uses_lsum: bool,
    /// Exit with the acceptance-failure code below this exact-match rate.
    pub min_exact_match: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpMaskConfig {
    pub attention: AttentionSpec,
    pub seq_len: usize,
    pub layers: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (heads, head_dim) = (2, 16);
        let mut model = ModelConfig::new(
            64,
            heads * head_dim,
            heads,
            2 * heads * head_dim,
            2,
            1,
            AttentionSpec::full(heads, head_dim),
            PosEncConfig::new(Scheme::T5Relative),
        );
        model.max_input_len = 256;
        model.max_output_len = 16;
        model.dropout_p = 0.0;
        Self {
            model,
            init_std: 0.1,
            data: DataConfig {
                kind: CorpusKind::Needle,
                n_train: 50_000,
                n_test: 300,
                len: LenDist::fixed(256),
                needle: NeedleParams::default(),
            },
            pretrain: PretrainConfig {
                shape: ScheduleShape::S75L25,
                schedule: ScheduleParams {
                    total_budget: 16_384,
                    batch_size: 4,
                    short_len: 64,
                    long_len: 256,
                    short_output_len: 8,
                    long_output_len: 8,
                    base_mask_ratio: 0.45,
                },
                learning_rate: 1e-3,
                warmup_steps: 0,
                grad_clip: 1.0,
                min_doc_chars: 0,
            },
            adapt: AdaptConfig {
                chain: vec![Surgery::Local],
                local: AttentionSpec::block_local(32, true, heads, head_dim),
                global_local: AttentionSpec::global_local(32, 8, false, heads, head_dim),
                max_input_len: 512,
                keep_cross_layers: [0].into(),
            },
            finetune: TrainConfig {
                warmup_steps: 100,
                ..TrainConfig::new(3000, 16, 3e-3)
            },
            eval: EvalConfig {
                decoding: Decoding::Greedy,
                max_len: None,
                rg_uses_lsum: true,
                min_exact_match: None,
            },
            bench: ScalingConfig {
                specs: vec![
                    BenchSpec::new("local", AttentionSpec::block_local(64, false, 4, 16)),
                    BenchSpec::new("global_local", AttentionSpec::global_local(64, 32, false, 4, 16)),
                    BenchSpec::new("full", AttentionSpec::full(4, 16)),
                ],
                lengths: vec![256, 512, 1024],
                repeats: 3,
                ff_mult: 4,
                baseline: None,
                seed: 0,
            },
            dump_mask: DumpMaskConfig {
                attention: AttentionSpec::block_local(4, true, 1, 1),
                seq_len: 16,
                layers: vec![0, 1],
            },
        }
    }
}

/// Recursively copies `patch` into `base`. Keys missing from `base` are
/// inserted so that deserialization can reject them.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.path=value` override. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (depth, key) in keys.iter().enumerate() {
        let here = keys[..=depth].join(".");
        node = match node {
            Value::Object(map) => map
                .get_mut(*key)
                .ok_or_else(|| CliError::Config(format!("unknown config key `{here}`")))?,
            Value::Array(items) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| CliError::Config(format!("`{here}` indexes a list with a non-number")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("`{here}` is past the end of a {len}-item list")))?
            }
            _ => return Err(CliError::Config(format!("`{here}` descends into a scalar"))),
        };
    }
    *node = value;
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the optional file, then overrides, validated.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// Strict deserialization of a fully resolved config.
    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.model.validate()?;
        if !(cfg.init_std > 0.0) {
            return Err(CliError::Config(format!("init_std must be positive, got {}", cfg.init_std)));
        }
        cfg.finetune.validate()?;
        Ok(cfg)
    }
}
