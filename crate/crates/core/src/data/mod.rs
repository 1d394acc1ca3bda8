//! Synthetic corpora, the toy tokenizer, gap-sentence masking and
//! pretraining schedules.

mod corpus;
mod mask;
mod schedule;
mod vocab;

pub use corpus::{
    gen_corpus, gen_corpus_with, read_jsonl, write_jsonl, CorpusKind, Example, LenDist, NeedleParams, Sample,
    SyntheticDoc,
};
pub use mask::{filter_long, gsg_mask, num_masked, scale_mask_ratio};
pub use schedule::{build_schedule, Phase, PretrainSchedule, ScheduleParams, ScheduleShape};
pub use vocab::{Vocab, BOS, EOS, FIRST_CONTENT, FLAG, MASK_SENT, PAD, SEP};
