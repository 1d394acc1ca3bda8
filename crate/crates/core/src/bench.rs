//! Attention scaling harness: wall time and exact MAC counts of one encoder
//! layer across attention variants and input lengths.
//!
//! Counters are deterministic and safe to assert on. Wall times are only
//! informational.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_cost_for_layer, AttentionSpec, Variant};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::posenc::{PosEncConfig, Scheme};
use crate::tensor::counters;

const WARMUPS: usize = 2;
pub const BENCH_VOCAB: usize = 64;

/// One attention configuration under test, with a display label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub label: String,
    pub attention: AttentionSpec,
}

impl BenchSpec {
    pub fn new(label: impl Into<String>, attention: AttentionSpec) -> Self {
        Self {
            label: label.into(),
            attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub specs: Vec<BenchSpec>,
    pub lengths: Vec<usize>,
    pub repeats: usize,
    /// FFN width as a multiple of `d_model`.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Ratios are relative to the row with this label and length. Defaults to
    /// the first spec at the first length.
    #[serde(default)]
    pub baseline: Option<(String, usize)>,
    #[serde(default)]
    pub seed: u64,
}

fn default_ff_mult() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub label: String,
    pub variant: Variant,
    #[serde(rename = "L")]
    pub seq_len: usize,
    /// Block size; empty for full attention.
    pub b: Option<usize>,
    pub g: usize,
    pub staggered: bool,
    pub wall_ms: f64,
    pub mac_count: u64,
    pub score_elems: u64,
    pub wall_ratio: f64,
    pub mac_ratio: f64,
    pub score_ratio: f64,
}

/// One encoder layer plus a one-layer decoder, no position encoding.
pub fn layer_model(spec: &AttentionSpec, seq_len: usize, ff_mult: usize, seed: u64) -> Result<Model> {
    let dm = spec.d_model();
    let mut cfg = ModelConfig::new(
        BENCH_VOCAB,
        dm,
        spec.num_heads,
        ff_mult * dm,
        1,
        1,
        spec.clone(),
        PosEncConfig::new(Scheme::None),
    );
    cfg.max_input_len = seq_len;
    cfg.dropout_p = 0.0;
    Model::new(cfg, seed)
}

/// Runs every spec at every length: two warmups, then `repeats` timed
/// encoder passes. MACs come from one counted pass and score elements from
/// the closed-form cost of the (unshifted) layer.
pub fn run_scaling(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    if cfg.specs.is_empty() || cfg.lengths.is_empty() || cfg.repeats == 0 {
        return Err(Error::Config("scaling run needs specs, lengths and repeats > 0".into()));
    }
    let mut rows = Vec::new();
    for spec in &cfg.specs {
        for &l in &cfg.lengths {
            let model = layer_model(&spec.attention, l, cfg.ff_mult, cfg.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ l as u64);
            let input: Vec<usize> = (0..l).map(|_| rng.gen_range(0..BENCH_VOCAB)).collect();
            for _ in 0..WARMUPS {
                model.encode(&input)?;
            }
            let (_, counts) = counters::measure(|| model.encode(&input));
            let mut times: Vec<f64> = (0..cfg.repeats)
                .map(|_| {
                    let t = Instant::now();
                    model.encode(&input).map(|_| t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<_>>()?;
            times.sort_by(f64::total_cmp);
            let a = &spec.attention;
            let local = a.variant != Variant::Full;
            rows.push(ScalingRow {
                label: spec.label.clone(),
                variant: a.variant,
                seq_len: l,
                b: local.then_some(a.block_size),
                g: a.globals(),
                staggered: local && a.staggered,
                wall_ms: times[times.len() / 2],
                mac_count: counts.total(),
                score_elems: attention_cost_for_layer(a, l, 0).score_mem_elems,
                wall_ratio: 1.0,
                mac_ratio: 1.0,
                score_ratio: 1.0,
            });
        }
    }
    let (label, l) = cfg
        .baseline
        .clone()
        .unwrap_or_else(|| (cfg.specs[0].label.clone(), cfg.lengths[0]));
    normalize(&mut rows, &label, l)?;
    Ok(rows)
}

/// Rewrites every ratio column relative to the row `label` at length `l`.
pub fn normalize(rows: &mut [ScalingRow], label: &str, l: usize) -> Result<()> {
    let base = rows
        .iter()
        .find(|r| r.label == label && r.seq_len == l)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("no baseline row `{label}` at L={l}")))?;
    for r in rows.iter_mut() {
        r.wall_ratio = r.wall_ms / base.wall_ms;
        r.mac_ratio = r.mac_count as f64 / base.mac_count as f64;
        r.score_ratio = r.score_elems as f64 / base.score_elems as f64;
    }
    Ok(())
}

pub fn write_csv(rows: &[ScalingRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<ScalingRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub seq_len: usize,
    pub block_size: usize,
    pub relation: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingReport {
    pub checks: Vec<OrderingCheck>,
}

impl OrderingReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Checks `mac(local) <= mac(full)` at every length and
/// `mac(local) <= mac(global_local) < mac(full)` once `L >= 8b`, matching
/// local and global-local rows on block size and staggering.
pub fn ordering_check(input: impl Read) -> Result<OrderingReport> {
    let rows = read_csv(input)?;
    let mut full: BTreeMap<usize, u64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.variant == Variant::Full) {
        full.insert(r.seq_len, r.mac_count);
    }
    let mut checks = Vec::new();
    for local in rows.iter().filter(|r| r.variant == Variant::BlockLocal) {
        let (l, b) = (local.seq_len, local.b.unwrap_or(0));
        let full_mac = full.get(&l).copied();
        if let Some(f) = full_mac {
            checks.push(OrderingCheck {
                seq_len: l,
                block_size: b,
                relation: format!("local {} <= full {f}", local.mac_count),
                pass: local.mac_count <= f,
            });
        }
        if l < 8 * b {
            continue;
        }
        let globals = rows.iter().filter(|r| {
            r.variant == Variant::GlobalLocal && r.seq_len == l && r.b == local.b && r.staggered == local.staggered
        });
        for gl in globals {
            let mut relation = format!("local {} <= global_local {}", local.mac_count, gl.mac_count);
            let mut pass = local.mac_count <= gl.mac_count;
            if let Some(f) = full_mac {
                relation.push_str(&format!(" < full {f}"));
                pass &= gl.mac_count < f;
            }
            checks.push(OrderingCheck {
                seq_len: l,
                block_size: b,
                relation,
                pass,
            });
        }
    }
    Ok(OrderingReport { checks })
}
