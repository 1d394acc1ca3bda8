//! Adam training on seq2seq examples and decoding-based evaluation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gsg_mask, Example, Phase, PretrainSchedule, SyntheticDoc, EOS};
use crate::error::{Error, Result};
use crate::model::{beam_decode, greedy_decode, Model, ParamStore};
use crate::tensor::Tensor;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup from zero over this many steps.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, learning_rate: f64) -> Self {
        Self {
            steps,
            batch_size,
            learning_rate,
            warmup_steps: 0,
            grad_clip: default_clip(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::Config("learning_rate must be positive and grad_clip >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Adam moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: BTreeMap<String, i32>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter that has a gradient. Parameters without
    /// one keep their value and their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &TrainConfig) {
        for (name, g) in grads {
            let Some(p) = params.get(name) else { continue };
            let mut p = p.clone();
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - cfg.beta1.powi(*t);
            let c2 = 1.0 - cfg.beta2.powi(*t);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
            params.insert(name.clone(), p);
        }
    }
}

/// Target plus EOS, cut to `max_len`. The flag reports a cut.
pub fn decoder_target(target: &[usize], max_len: usize) -> (Vec<usize>, bool) {
    let mut t: Vec<usize> = target.iter().copied().chain([EOS]).collect();
    let cut = t.len() > max_len;
    t.truncate(max_len);
    (t, cut)
}

/// Mean loss and mean gradients over `batch`.
///
/// Examples are split across up to `workers` threads. Each example draws its
/// dropout mask from its own stream of `dropout_seed`, and gradients are
/// summed in example order, so the result does not depend on `workers`.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Example],
    dropout_seed: Option<u64>,
    workers: usize,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let max_out = model.config.max_output_len;
    let one = |(j, ex): (usize, &&Example)| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (target, _) = decoder_target(&ex.target, max_out);
        match dropout_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                model.loss_and_grads(&ex.input, &target, Some(&mut rng))
            }
            None => model.loss_and_grads(&ex.input, &target, None),
        }
    };
    let results = parallel_map(batch, workers, one)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (l, grads) in results {
        loss += l;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(name, g.into_vec());
                }
            }
        }
    }
    let grads = sum
        .into_iter()
        .map(|(name, g)| {
            let shape = model.params.get(&name).expect("gradient of a known parameter").shape().to_vec();
            let t = Tensor::new(shape, g.into_iter().map(|x| x / n).collect()).expect("gradient shape");
            (name, t)
        })
        .collect();
    Ok((loss / n, grads))
}

/// Applies `f` to every item on up to `workers` scoped threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn((usize, &T)) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || part.iter().enumerate().map(|(i, x)| f((c * chunk + i, x))).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Owns the optimizer state and the batch sampler.
pub struct Trainer {
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
    workers: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64, workers: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            adam: Adam::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            workers,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step on a batch drawn uniformly with replacement.
    pub fn step(&mut self, model: &mut Model, data: &[Example]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        let batch: Vec<&Example> = (0..self.config.batch_size)
            .map(|_| &data[self.rng.gen_range(0..data.len())])
            .collect();
        let dropout_seed = (model.config.dropout_p > 0.0).then(|| self.rng.gen());
        let (loss, mut grads) = batch_gradients(model, &batch, dropout_seed, self.workers)?;
        let grad_norm = clip(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let lr = self.config.lr_at(self.step);
        self.adam.step(&mut model.params, &grads, lr, &self.config);
        let log = StepLog {
            step: self.step,
            loss,
            grad_norm,
            lr,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining configured steps, calling `on_step` after each.
    pub fn run(&mut self, model: &mut Model, data: &[Example], mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            let log = self.step(model, data)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decoding {
    Greedy,
    Beam { size: usize, alpha: f64 },
}

/// Decodes every input; outputs have any trailing EOS removed.
pub fn decode_all(model: &Model, inputs: &[Vec<usize>], decoding: Decoding, max_len: usize, workers: usize) -> Result<Vec<Vec<usize>>> {
    parallel_map(inputs, workers, |(_, input)| {
        let mut out = match decoding {
            Decoding::Greedy => greedy_decode(model, input, max_len, EOS)?,
            Decoding::Beam { size, alpha } => beam_decode(model, input, size, alpha, max_len, EOS)?,
        };
        if out.last() == Some(&EOS) {
            out.pop();
        }
        Ok(out)
    })
}

/// Fraction of predictions equal to their targets.
pub fn exact_match(predictions: &[Vec<usize>], targets: &[Vec<usize>]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / predictions.len() as f64
}

/// Greedy exact-match accuracy on `examples`.
pub fn evaluate_exact_match(model: &Model, examples: &[Example], workers: usize) -> Result<f64> {
    let inputs: Vec<Vec<usize>> = examples.iter().map(|e| e.input.clone()).collect();
    let targets: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    let preds = decode_all(model, &inputs, Decoding::Greedy, model.config.max_output_len, workers)?;
    Ok(exact_match(&preds, &targets))
}

/// Gap-sentence examples for one pretraining phase.
///
/// Each document keeps its leading sentences up to `input_len` tokens (the
/// first sentence is cut if it alone is too long), is masked with the
/// phase's ratio, and has its target cut to `output_len` tokens. Document
/// `i` is masked with a seed drawn from `seed`.
pub fn phase_examples(docs: &[SyntheticDoc], phase: &Phase, seed: u64) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    docs.iter()
        .map(|doc| {
            let mut sentences = Vec::new();
            let mut used = 0;
            for s in &doc.sentences {
                // Sentences after the first are preceded by a separator.
                let need = s.len() + usize::from(!sentences.is_empty());
                if used + need > phase.input_len {
                    if sentences.is_empty() {
                        sentences.push(s[..phase.input_len].to_vec());
                    }
                    break;
                }
                used += need;
                sentences.push(s.clone());
            }
            let cut = SyntheticDoc {
                sentences,
                chars: doc.chars,
                seed: doc.seed,
            };
            let (input, mut target) = gsg_mask(&cut, phase.mask_ratio, rng.gen())?;
            target.truncate(phase.output_len);
            Ok(Example { input, target })
        })
        .collect()
}

/// Runs every phase of `schedule` on gap-sentence examples from `docs`.
///
/// One optimizer carries across phases. `train` supplies the learning rate,
/// warmup and Adam settings; its step count and batch size are replaced by
/// the schedule's. `on_phase` sees the model after each phase.
pub fn pretrain(
    model: &mut Model,
    docs: &[SyntheticDoc],
    schedule: &PretrainSchedule,
    train: &TrainConfig,
    seed: u64,
    workers: usize,
    mut on_step: impl FnMut(usize, &StepLog),
    mut on_phase: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<Vec<StepLog>> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("no pretraining documents".into()));
    }
    let cfg = TrainConfig {
        steps: schedule.total_steps(),
        batch_size: schedule.batch_size,
        ..train.clone()
    };
    let mut trainer = Trainer::new(cfg, seed, workers)?;
    let mut logs = Vec::new();
    for (i, phase) in schedule.phases.iter().enumerate() {
        if phase.input_len > model.config.max_input_len || phase.output_len >= model.config.max_output_len {
            return Err(Error::Config(format!(
                "phase {i} needs inputs of {} and targets of {} plus EOS, the model allows {} and {}",
                phase.input_len, phase.output_len, model.config.max_input_len, model.config.max_output_len
            )));
        }
        let data = phase_examples(docs, phase, seed.wrapping_add(1 + i as u64))?;
        for _ in 0..phase.steps {
            let log = trainer.step(model, &data)?;
            on_step(i, &log);
            logs.push(log);
        }
        on_phase(i, model)?;
    }
    Ok(logs)
}
