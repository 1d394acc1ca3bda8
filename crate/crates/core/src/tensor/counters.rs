//! Thread-local multiply-accumulate counters.
//!
//! Kernels bump these during forward computation so cost models can be
//! checked against what actually ran. Counts are exact and independent of
//! the machine.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    /// MACs in dense matrix products (projections, FFN, output layer).
    pub dense: u64,
    /// MACs spent forming attention logits (q·k).
    pub score: u64,
    /// MACs spent mixing values with attention weights.
    pub value: u64,
    /// Number of attention logits materialized.
    pub score_elems: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.dense + self.score + self.value
    }
}

impl std::ops::Sub for MacCounts {
    type Output = MacCounts;

    fn sub(self, rhs: Self) -> Self {
        MacCounts {
            dense: self.dense - rhs.dense,
            score: self.score - rhs.score,
            value: self.value - rhs.value,
            score_elems: self.score_elems - rhs.score_elems,
        }
    }
}

thread_local! {
    static COUNTS: Cell<MacCounts> = const { Cell::new(MacCounts { dense: 0, score: 0, value: 0, score_elems: 0 }) };
}

pub fn reset() {
    COUNTS.with(|c| c.set(MacCounts::default()));
}

pub fn snapshot() -> MacCounts {
    COUNTS.with(Cell::get)
}

/// Runs `f` and returns the counts it accumulated alongside its result.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, MacCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}

pub(crate) fn add_dense(macs: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.dense += macs;
        c.set(v);
    });
}

/// Records `n_scores` logits of width `head_dim`, and the matching value mix.
pub(crate) fn add_scores(n_scores: u64, head_dim: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.score += n_scores * head_dim;
        v.value += n_scores * head_dim;
        v.score_elems += n_scores;
        c.set(v);
    });
}
