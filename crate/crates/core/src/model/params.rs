use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::posenc::Scheme;
use crate::tensor::{Tape, Tensor, Var};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, dm: usize) {
    out.push(spec(format!("{prefix}.gain"), &[dm], Init::Ones));
    out.push(spec(format!("{prefix}.bias"), &[dm], Init::Zeros));
}

fn projections(out: &mut Vec<ParamSpec>, prefix: &str, dm: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push(spec(format!("{prefix}.{p}"), &[dm, dm], Init::Normal));
    }
}

fn ffn(out: &mut Vec<ParamSpec>, prefix: &str, dm: usize, dff: usize) {
    out.push(spec(format!("{prefix}.w1"), &[dm, dff], Init::Normal));
    out.push(spec(format!("{prefix}.b1"), &[dff], Init::Zeros));
    out.push(spec(format!("{prefix}.w2"), &[dff, dm], Init::Normal));
    out.push(spec(format!("{prefix}.b2"), &[dm], Init::Zeros));
}

/// Prefix of the parameters owned by encoder layer `i`.
pub fn enc_layer(i: usize) -> String {
    format!("encoder.layer{i}")
}

/// Prefix of the parameters owned by decoder layer `i`.
pub fn dec_layer(i: usize) -> String {
    format!("decoder.layer{i}")
}

/// Every parameter the config needs, in a fixed order.
pub fn param_inventory(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let dm = cfg.d_model;
    let mut out = vec![spec("embed.tokens", &[cfg.vocab_size, dm], Init::Normal)];
    if !cfg.tie_embeddings {
        out.push(spec("output.proj", &[dm, cfg.vocab_size], Init::Normal));
    }
    match cfg.posenc.scheme {
        Scheme::LearnedAbsolute => {
            out.push(spec("encoder.positions", &[cfg.max_input_len, dm], Init::Normal));
            out.push(spec("decoder.positions", &[cfg.max_output_len, dm], Init::Normal));
        }
        Scheme::T5Relative => {
            let shape = [cfg.num_heads, cfg.posenc.t5_num_buckets];
            out.push(spec("encoder.rel_bias", &shape, Init::Normal));
            out.push(spec("decoder.rel_bias", &shape, Init::Normal));
        }
        Scheme::None | Scheme::Sinusoidal | Scheme::Rope => {}
    }
    let global = cfg.attention.variant == Variant::GlobalLocal;
    if global {
        out.push(spec("encoder.globals", &[cfg.attention.num_global, dm], Init::Normal));
    }
    for i in 0..cfg.enc_layers {
        let p = enc_layer(i);
        norm(&mut out, &format!("{p}.attn_norm"), dm);
        if global {
            norm(&mut out, &format!("{p}.global_norm"), dm);
        }
        projections(&mut out, &format!("{p}.attn"), dm);
        norm(&mut out, &format!("{p}.ffn_norm"), dm);
        ffn(&mut out, &format!("{p}.ffn"), dm, cfg.d_ff);
    }
    norm(&mut out, "encoder.final_norm", dm);
    for i in 0..cfg.dec_layers {
        let p = dec_layer(i);
        norm(&mut out, &format!("{p}.self_norm"), dm);
        projections(&mut out, &format!("{p}.self"), dm);
        if cfg.cross_attn_layers.contains(&i) {
            if cfg.decoder_global_attn {
                norm(&mut out, &format!("{p}.global_cross_norm"), dm);
                projections(&mut out, &format!("{p}.global_cross"), dm);
            }
            norm(&mut out, &format!("{p}.cross_norm"), dm);
            projections(&mut out, &format!("{p}.cross"), dm);
        }
        norm(&mut out, &format!("{p}.ffn_norm"), dm);
        ffn(&mut out, &format!("{p}.ffn"), dm, cfg.d_ff);
    }
    norm(&mut out, "decoder.final_norm", dm);
    out
}

/// Exact number of scalar parameters for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    param_inventory(cfg)
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Truncated-normal matrices and embeddings with std `std`, unit LayerNorm
    /// gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_inventory(cfg)
            .into_iter()
            .map(|p| {
                let t = match p.init {
                    Init::Normal => Tensor::truncated_normal(p.shape, std, &mut rng),
                    Init::Ones => Tensor::ones(p.shape),
                    Init::Zeros => Tensor::zeros(p.shape),
                };
                (p.name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that the store holds exactly the parameters of `cfg`, with the
    /// right shapes.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let inventory = param_inventory(cfg);
        for p in &inventory {
            let t = self.get(&p.name).ok_or_else(|| Error::MissingParam(p.name.clone()))?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.len() != inventory.len() {
            let extra = self
                .names()
                .find(|n| !inventory.iter().any(|p| p.name == *n))
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!(
                "parameter `{extra}` is not part of this architecture"
            )));
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Registers parameters on a tape the first time they are used.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    vars: HashMap<&'a str, Var>,
}

impl<'a> Binder<'a> {
    /// `trainable` parameters receive gradients; otherwise they are constants.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            vars: HashMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = if self.trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        };
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    /// Parameters used so far.
    pub fn bound(&self) -> impl Iterator<Item = (&'a str, Var)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }
}
