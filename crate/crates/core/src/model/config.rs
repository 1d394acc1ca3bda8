use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionSpec, Variant};
use crate::error::{Error, Result};
use crate::posenc::{PosEncConfig, Scheme};

/// Architecture of an encoder-decoder model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Encoder self-attention; every encoder layer uses it.
    pub attention: AttentionSpec,
    pub posenc: PosEncConfig,
    /// Decoder layers that attend to the encoder.
    pub cross_attn_layers: BTreeSet<usize>,
    /// Adds a cross-attention over the global tokens before each token
    /// cross-attention.
    #[serde(default)]
    pub decoder_global_attn: bool,
    pub max_input_len: usize,
    pub max_output_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    /// First decoder input token.
    #[serde(default = "default_start")]
    pub decoder_start_id: usize,
}

fn default_dropout() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_start() -> usize {
    crate::data::BOS
}

impl ModelConfig {
    /// A config with cross-attention on every decoder layer, no decoder global
    /// attention, dropout 0.1 and tied embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        num_heads: usize,
        d_ff: usize,
        enc_layers: usize,
        dec_layers: usize,
        attention: AttentionSpec,
        posenc: PosEncConfig,
    ) -> Self {
        Self {
            vocab_size,
            d_model,
            num_heads,
            d_ff,
            enc_layers,
            dec_layers,
            attention,
            posenc,
            cross_attn_layers: (0..dec_layers).collect(),
            decoder_global_attn: false,
            max_input_len: 512,
            max_output_len: 64,
            dropout_p: default_dropout(),
            tie_embeddings: true,
            decoder_start_id: default_start(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 {
            return err("vocab_size, d_model and d_ff must be positive".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return err("need at least one encoder and one decoder layer".into());
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        self.attention.validate()?;
        if self.attention.num_heads != self.num_heads || self.attention.head_dim != self.head_dim() {
            return err(format!(
                "attention uses {}x{} heads but the model has {}x{}",
                self.attention.num_heads,
                self.attention.head_dim,
                self.num_heads,
                self.head_dim()
            ));
        }
        self.posenc.validate()?;
        match self.posenc.scheme {
            Scheme::Sinusoidal if self.d_model % 2 != 0 => {
                return err("sinusoidal encoding needs an even d_model".into())
            }
            Scheme::Rope if self.head_dim() % 2 != 0 => return err("RoPE needs an even head_dim".into()),
            _ => {}
        }
        if self.cross_attn_layers.is_empty() {
            return err("cross_attn_layers must not be empty".into());
        }
        if let Some(&bad) = self.cross_attn_layers.iter().find(|&&l| l >= self.dec_layers) {
            return err(format!(
                "cross-attention layer {bad} does not exist in a {}-layer decoder",
                self.dec_layers
            ));
        }
        if self.decoder_global_attn && self.attention.variant != Variant::GlobalLocal {
            return err("decoder_global_attn needs a global_local encoder".into());
        }
        if self.max_input_len == 0 || self.max_output_len == 0 {
            return err("max_input_len and max_output_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.decoder_start_id >= self.vocab_size {
            return err(format!(
                "decoder_start_id {} is outside the vocabulary",
                self.decoder_start_id
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of everything that affects the computation graph. Training-only
    /// knobs (dropout) are excluded.
    pub fn arch_hash(&self) -> String {
        let mut arch = self.clone();
        arch.dropout_p = 0.0;
        let bytes = serde_json::to_vec(&arch).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
