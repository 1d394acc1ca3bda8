//! Encoder-decoder transformer assembled from an [`AttentionSpec`], a
//! position-encoding scheme and layer counts.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names; every forward
//! pass binds the ones it touches onto a fresh [`Tape`].
//!
//! [`AttentionSpec`]: crate::attention::AttentionSpec

mod config;
mod decode;
mod forward;
mod params;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use decode::{beam_decode, greedy_decode};
pub use forward::{decoder_forward, encoder_forward, seq2seq_loss, shift_right, Encoded, Mode, LAYER_NORM_EPS};
pub use params::{count_params, dec_layer, enc_layer, param_inventory, Binder, Init, ParamSpec, ParamStore};

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Default init std for matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Encoder outputs detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub tokens: Tensor,
    pub globals: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init_std(config, seed, INIT_STD)
    }

    pub fn with_init_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, seed, std);
        Ok(Self { config, params })
    }

    /// Pairs a config with existing parameters after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn encode(&self, input_ids: &[usize]) -> Result<EncoderStates> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let enc = encoder_forward(&mut tape, &mut b, &self.config, input_ids, &mut Mode::Eval)?;
        Ok(EncoderStates {
            tokens: tape.value(enc.tokens).clone(),
            globals: enc.globals.map(|g| tape.value(g).clone()),
        })
    }

    /// `[T, V]` logits for decoder inputs `dec_ids` given encoder states.
    pub fn decode_logits(&self, enc: &EncoderStates, dec_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let bound = Encoded {
            tokens: tape.constant(enc.tokens.clone()),
            globals: enc.globals.as_ref().map(|g| tape.constant(g.clone())),
        };
        let logits = decoder_forward(&mut tape, &mut b, &self.config, dec_ids, &bound, &mut Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Teacher-forced logits in evaluation mode.
    pub fn logits(&self, input_ids: &[usize], dec_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let enc = encoder_forward(&mut tape, &mut b, &self.config, input_ids, &mut Mode::Eval)?;
        let logits = decoder_forward(&mut tape, &mut b, &self.config, dec_ids, &enc, &mut Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Evaluation-mode loss.
    pub fn loss(&self, input_ids: &[usize], target_ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let loss = seq2seq_loss(&mut tape, &mut b, &self.config, input_ids, target_ids, &mut Mode::Eval)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and gradients of every parameter the example touches. Dropout is
    /// active when `rng` is given.
    pub fn loss_and_grads(
        &self,
        input_ids: &[usize],
        target_ids: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, true);
        let mut mode = match rng {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let loss = seq2seq_loss(&mut tape, &mut b, &self.config, input_ids, target_ids, &mut mode)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let out = b.bound().map(|(name, v)| (name.to_string(), grads.wrt(v))).collect();
        Ok((value, out))
    }
}
