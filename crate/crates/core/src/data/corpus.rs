use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, FIRST_CONTENT, FLAG, SEP};
use crate::error::{Error, Result};

/// A document of sentences over the toy vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub sentences: Vec<Vec<usize>>,
    /// Surface length: every word plus one trailing space or full stop.
    pub chars: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticDoc {
    pub fn new(sentences: Vec<Vec<usize>>, vocab: &Vocab, seed: u64) -> Result<Self> {
        if sentences.is_empty() || sentences.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("documents need non-empty sentences".into()));
        }
        let mut chars = 0;
        for &id in sentences.iter().flatten() {
            if id >= vocab.size() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    extent: vocab.size(),
                });
            }
            chars += vocab.surface_len(id) + 1;
        }
        Ok(Self { sentences, chars, seed })
    }

    /// Sentences joined by [`SEP`].
    pub fn flatten(&self) -> Vec<usize> {
        join_sentences(self.sentences.iter().map(Vec::as_slice))
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

pub(crate) fn join_sentences<'a>(sentences: impl IntoIterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, s) in sentences.into_iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(s);
    }
    out
}

/// An input/target pair. Targets carry no EOS; training appends it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    Copy,
    Reverse,
    Needle,
    ExtractiveSumm,
}

/// Inclusive token-length range of generated inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LenDist {
    pub min: usize,
    pub max: usize,
}

impl LenDist {
    pub fn fixed(len: usize) -> Self {
        Self { min: len, max: len }
    }
}

/// Layout of the needle task.
///
/// A query (`FLAG` then a marker) sits in the second half of aligned block
/// `k - 1`; the same marker followed by the answer value sits in the first
/// half of block `k`. The two share a half-block-shifted block but never an
/// aligned one. Distractor pairs carry other markers and other values, sit in
/// the first half of some block other than the query's, and so look exactly
/// like the answer pair from inside any aligned block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleParams {
    pub block_size: usize,
    pub num_values: usize,
    pub num_markers: usize,
    pub num_distractors: usize,
}

impl Default for NeedleParams {
    fn default() -> Self {
        Self {
            block_size: 32,
            num_values: 16,
            num_markers: 2,
            num_distractors: 1,
        }
    }
}

impl NeedleParams {
    pub fn value_ids(&self) -> std::ops::Range<usize> {
        FIRST_CONTENT..FIRST_CONTENT + self.num_values
    }

    pub fn marker_ids(&self) -> std::ops::Range<usize> {
        let start = FIRST_CONTENT + self.num_values;
        start..start + self.num_markers
    }

    fn filler_start(&self) -> usize {
        FIRST_CONTENT + self.num_values + self.num_markers
    }

    /// Accuracy of guessing uniformly among the values present in an input.
    pub fn chance(&self) -> f64 {
        1.0 / (self.num_distractors + 1) as f64
    }

    /// Number of aligned block boundaries `k·b` with room for an item after them.
    fn boundaries(&self, len: usize) -> usize {
        let b = self.block_size;
        len.saturating_sub(b / 2) / b
    }

    fn validate(&self, vocab: &Vocab, len: usize) -> Result<()> {
        let b = self.block_size;
        if b < 4 || b % 2 != 0 {
            return Err(Error::Config(format!("needle block_size must be even and >= 4, got {b}")));
        }
        if self.num_markers <= self.num_distractors || self.num_values <= self.num_distractors {
            return Err(Error::Config(
                "needle needs more marker types and more values than distractors".into(),
            ));
        }
        if self.filler_start() >= vocab.size() {
            return Err(Error::Config(format!(
                "needle needs a vocabulary larger than {} for filler tokens",
                self.filler_start()
            )));
        }
        let k = self.boundaries(len);
        if k == 0 {
            return Err(Error::Config(format!(
                "needle inputs need at least {} tokens for block_size {b}",
                b + b / 2
            )));
        }
        // Each placed item rules out at most three start slots of its half,
        // so this many always fit however earlier ones landed.
        let per_block = (b / 2 + 1) / 3;
        if (k - 1).max(1) * per_block < self.num_distractors + 1 {
            return Err(Error::Config(format!(
                "length {len} has too little room for {} distractors",
                self.num_distractors
            )));
        }
        Ok(())
    }

    /// Start of a two-token item in the first half of aligned block `k`.
    fn item_after(&self, k: usize, rng: &mut ChaCha8Rng) -> usize {
        k * self.block_size + rng.gen_range(0..self.block_size / 2 - 1)
    }
}

/// A generated document and the task example derived from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub doc: SyntheticDoc,
    pub example: Example,
}

fn content_token(vocab: &Vocab, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(FIRST_CONTENT..vocab.size())
}

fn split_sentences(tokens: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut rest = tokens;
    while !rest.is_empty() {
        let n = rng.gen_range(3..=8).min(rest.len());
        out.push(rest[..n].to_vec());
        rest = &rest[n..];
    }
    out
}

fn gen_needle(vocab: &Vocab, len: usize, p: &NeedleParams, rng: &mut ChaCha8Rng) -> Example {
    let b = p.block_size;
    let filler: Vec<usize> = (p.filler_start()..vocab.size()).collect();
    let mut input: Vec<usize> = (0..len).map(|_| *filler.choose(rng).unwrap()).collect();
    let mut used = vec![false; len];
    let boundaries = p.boundaries(len);
    let k = rng.gen_range(1..=boundaries);
    let query = k * b - b / 2 + rng.gen_range(0..b / 2 - 1);
    let pair = p.item_after(k, rng);
    for i in [query, query + 1, pair, pair + 1] {
        used[i] = true;
    }
    let markers = rand::seq::index::sample(rng, p.num_markers, p.num_distractors + 1);
    let values = rand::seq::index::sample(rng, p.num_values, p.num_distractors + 1);
    let marker = |i: usize| p.marker_ids().start + markers.index(i);
    let value = |i: usize| p.value_ids().start + values.index(i);
    input[query] = FLAG;
    input[query + 1] = marker(0);
    input[pair] = marker(0);
    input[pair + 1] = value(0);
    for i in 1..=p.num_distractors {
        // Anywhere after a boundary except in the query's block.
        let d = loop {
            let kd = rng.gen_range(1..=boundaries);
            let d = p.item_after(kd, rng);
            if kd != k - 1 && !used[d] && !used[d + 1] {
                break d;
            }
        };
        used[d] = true;
        used[d + 1] = true;
        input[d] = marker(i);
        input[d + 1] = value(i);
    }
    Example {
        input,
        target: vec![value(0)],
    }
}

fn gen_extractive(vocab: &Vocab, len: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Example) {
    let tokens: Vec<usize> = (0..len.max(3)).map(|_| content_token(vocab, rng)).collect();
    let sentences = split_sentences(&tokens, rng);
    let k = rng.gen_range(1..=sentences.len().min(2));
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, sentences.len(), k).into_vec();
    picked.sort_unstable();
    let mut input = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            input.push(SEP);
        }
        if picked.contains(&i) {
            input.push(FLAG);
        }
        input.extend_from_slice(s);
    }
    let target = join_sentences(picked.iter().map(|&i| sentences[i].as_slice()));
    (sentences, Example { input, target })
}

/// Deterministic synthetic corpus of `n_docs` samples.
pub fn gen_corpus(kind: CorpusKind, n_docs: usize, len: LenDist, vocab_size: usize, seed: u64) -> Result<Vec<Sample>> {
    gen_corpus_with(kind, n_docs, len, vocab_size, seed, &NeedleParams::default())
}

pub fn gen_corpus_with(
    kind: CorpusKind,
    n_docs: usize,
    len: LenDist,
    vocab_size: usize,
    seed: u64,
    needle: &NeedleParams,
) -> Result<Vec<Sample>> {
    let vocab = Vocab::new(vocab_size)?;
    if len.min == 0 || len.min > len.max {
        return Err(Error::Config(format!("bad length range {}..={}", len.min, len.max)));
    }
    if kind == CorpusKind::Needle {
        needle.validate(&vocab, len.min)?;
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let doc_seeds: Vec<u64> = (0..n_docs).map(|_| master.gen()).collect();
    doc_seeds
        .into_iter()
        .map(|doc_seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(doc_seed);
            let l = rng.gen_range(len.min..=len.max);
            let (sentences, example) = match kind {
                CorpusKind::Copy | CorpusKind::Reverse => {
                    let tokens: Vec<usize> = (0..l).map(|_| content_token(&vocab, &mut rng)).collect();
                    let mut target = tokens.clone();
                    if kind == CorpusKind::Reverse {
                        target.reverse();
                    }
                    (split_sentences(&tokens, &mut rng), Example { input: tokens, target })
                }
                CorpusKind::Needle => {
                    let ex = gen_needle(&vocab, l, needle, &mut rng);
                    (vec![ex.input.clone()], ex)
                }
                CorpusKind::ExtractiveSumm => gen_extractive(&vocab, l, &mut rng),
            };
            Ok(Sample {
                doc: SyntheticDoc::new(sentences, &vocab, doc_seed)?,
                example,
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
