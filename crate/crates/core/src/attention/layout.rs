use crate::error::{Error, Result};

/// Assignment of sequence positions to attention blocks for one layer.
///
/// Positions live in a padded frame of `pad_left + seq_len + pad_right`
/// slots, cut into consecutive blocks of `block_size`. Pad slots are masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub seq_len: usize,
    pub block_size: usize,
    /// Shift of the block boundaries: 0, or `block_size / 2` on staggered odd layers.
    pub offset: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    /// Block index of every real position.
    pub block_of: Vec<usize>,
}

/// Layout for encoder layer `layer_index` (0-based).
///
/// Odd layers of a staggered encoder shift block boundaries by half a block,
/// implemented by padding half a block on the left.
pub fn make_block_layout(
    seq_len: usize,
    block_size: usize,
    layer_index: usize,
    staggered: bool,
) -> Result<BlockLayout> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("block layout for an empty sequence".into()));
    }
    if block_size == 0 {
        return Err(Error::InvalidArgument("block_size must be at least 1".into()));
    }
    if staggered && block_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "staggered layout needs an even block size, got {block_size}"
        )));
    }
    let offset = if staggered && layer_index % 2 == 1 {
        block_size / 2
    } else {
        0
    };
    let frame = (seq_len + offset).div_ceil(block_size) * block_size;
    Ok(BlockLayout {
        seq_len,
        block_size,
        offset,
        pad_left: offset,
        pad_right: frame - offset - seq_len,
        block_of: (0..seq_len).map(|i| (i + offset) / block_size).collect(),
    })
}

impl BlockLayout {
    pub fn frame_len(&self) -> usize {
        self.pad_left + self.seq_len + self.pad_right
    }

    pub fn num_blocks(&self) -> usize {
        self.frame_len() / self.block_size
    }

    /// Real position held by frame slot `slot`, or `None` for padding.
    #[inline]
    pub fn real(&self, slot: usize) -> Option<usize> {
        slot.checked_sub(self.pad_left).filter(|&i| i < self.seq_len)
    }

    pub fn is_pad(&self, slot: usize) -> bool {
        self.real(slot).is_none()
    }

    /// Whether real position `i` may attend to real position `j`.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.block_of[i] == self.block_of[j]
    }

    /// Row-major `[L, L]` permission matrix over real positions.
    pub fn mask(&self) -> Vec<bool> {
        let l = self.seq_len;
        let mut m = vec![false; l * l];
        for i in 0..l {
            for j in 0..l {
                m[i * l + j] = self.allowed(i, j);
            }
        }
        m
    }

    /// Real positions grouped by block, skipping blocks made only of padding.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.num_blocks()];
        for (i, &b) in self.block_of.iter().enumerate() {
            groups[b].push(i);
        }
        groups.retain(|g| !g.is_empty());
        groups
    }
}
