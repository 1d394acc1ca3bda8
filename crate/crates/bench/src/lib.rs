//! Shared grid for the criterion benches in `benches/`.

use longattn_core::attention::AttentionSpec;
use longattn_core::bench::BenchSpec;

pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = 16;
pub const BLOCK: usize = 64;
pub const GLOBALS: usize = 32;

pub const LENGTHS: [usize; 3] = [256, 512, 1024];

pub fn specs() -> Vec<BenchSpec> {
    vec![
        BenchSpec::new("full", AttentionSpec::full(HEADS, HEAD_DIM)),
        BenchSpec::new("local", AttentionSpec::block_local(BLOCK, false, HEADS, HEAD_DIM)),
        BenchSpec::new("local_staggered", AttentionSpec::block_local(BLOCK, true, HEADS, HEAD_DIM)),
        BenchSpec::new("global_local", AttentionSpec::global_local(BLOCK, GLOBALS, false, HEADS, HEAD_DIM)),
    ]
}

/// Deterministic token ids for an input of length `len`.
pub fn input(len: usize) -> Vec<usize> {
    (0..len).map(|i| (i * 31 + 7) % longattn_core::bench::BENCH_VOCAB).collect()
}
