use super::layout::make_block_layout;
use super::spec::{AttentionSpec, Variant};

/// Closed-form cost of one self-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    /// Multiply-accumulates spent forming attention logits.
    pub flops: u64,
    /// Number of attention logits held at once.
    pub score_mem_elems: u64,
}

/// Cost of the most expensive layer of `spec` at length `seq_len`.
///
/// For staggered layouts that is the shifted layer, whose padded frame holds
/// one extra block.
pub fn attention_cost(spec: &AttentionSpec, seq_len: usize) -> AttentionCost {
    let layer = usize::from(spec.staggered);
    attention_cost_for_layer(spec, seq_len, layer)
}

/// Cost of encoder layer `layer_index`.
///
/// * Full: `h·L²` logits.
/// * BlockLocal: `h·F·b` logits, `F` the padded frame length.
/// * GlobalLocal: adds `h·L·g` token→global and `h·g·(L+g)` global-row logits.
///
/// Each logit costs `head_dim` multiply-accumulates.
pub fn attention_cost_for_layer(spec: &AttentionSpec, seq_len: usize, layer_index: usize) -> AttentionCost {
    let h = spec.num_heads as u64;
    let l = seq_len as u64;
    let elems_per_head = match spec.variant {
        Variant::Full => l * l,
        Variant::BlockLocal | Variant::GlobalLocal => {
            let layout = make_block_layout(seq_len, spec.block_size, layer_index, spec.staggered)
                .expect("attention_cost on an invalid spec");
            let g = spec.globals() as u64;
            let local = (layout.frame_len() * spec.block_size) as u64;
            local + l * g + g * (l + g)
        }
    };
    AttentionCost {
        flops: h * elems_per_head * spec.head_dim as u64,
        score_mem_elems: h * elems_per_head,
    }
}
