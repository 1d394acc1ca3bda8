use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    BlockLocal,
    GlobalLocal,
}

/// Encoder self-attention configuration shared by every encoder layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub variant: Variant,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub num_global: usize,
    #[serde(default)]
    pub staggered: bool,
    pub num_heads: usize,
    pub head_dim: usize,
}

fn default_block_size() -> usize {
    64
}

impl AttentionSpec {
    pub fn full(num_heads: usize, head_dim: usize) -> Self {
        Self {
            variant: Variant::Full,
            block_size: default_block_size(),
            num_global: 0,
            staggered: false,
            num_heads,
            head_dim,
        }
    }

    pub fn block_local(block_size: usize, staggered: bool, num_heads: usize, head_dim: usize) -> Self {
        Self {
            variant: Variant::BlockLocal,
            block_size,
            num_global: 0,
            staggered,
            num_heads,
            head_dim,
        }
    }

    pub fn global_local(
        block_size: usize,
        num_global: usize,
        staggered: bool,
        num_heads: usize,
        head_dim: usize,
    ) -> Self {
        Self {
            variant: Variant::GlobalLocal,
            block_size,
            num_global,
            staggered,
            num_heads,
            head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.head_dim == 0 {
            return err("num_heads and head_dim must be positive".into());
        }
        match self.variant {
            Variant::Full => {
                if self.staggered {
                    return err("staggered blocks need a block-local variant".into());
                }
                if self.num_global != 0 {
                    return err("full attention takes no global tokens".into());
                }
            }
            Variant::BlockLocal | Variant::GlobalLocal => {
                if self.block_size == 0 {
                    return err("block_size must be at least 1".into());
                }
                if self.staggered && self.block_size % 2 != 0 {
                    return err(format!(
                        "staggering shifts by half a block; block_size {} is odd",
                        self.block_size
                    ));
                }
                if self.variant == Variant::GlobalLocal && self.num_global == 0 {
                    return err("global_local needs num_global >= 1 (use block_local)".into());
                }
                if self.variant == Variant::BlockLocal && self.num_global != 0 {
                    return err("block_local takes no global tokens (use global_local)".into());
                }
            }
        }
        Ok(())
    }

    /// Global token count actually used by the variant.
    pub fn globals(&self) -> usize {
        match self.variant {
            Variant::GlobalLocal => self.num_global,
            _ => 0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        assert!(AttentionSpec::full(2, 4).validate().is_ok());
        assert!(AttentionSpec::global_local(8, 0, false, 2, 4).validate().is_err());
        assert!(AttentionSpec::block_local(0, false, 2, 4).validate().is_err());
        assert!(AttentionSpec::block_local(5, true, 2, 4).validate().is_err());
        assert!(AttentionSpec::block_local(5, false, 2, 4).validate().is_ok());
        let mut f = AttentionSpec::full(2, 4);
        f.staggered = true;
        assert!(f.validate().is_err());
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let bad = r#"{"variant":"full","num_heads":2,"head_dim":4,"blocksize":3}"#;
        assert!(serde_json::from_str::<AttentionSpec>(bad).is_err());
        let good = r#"{"variant":"global_local","block_size":4,"num_global":2,"num_heads":2,"head_dim":4}"#;
        let s: AttentionSpec = serde_json::from_str(good).unwrap();
        assert_eq!(s.globals(), 2);
    }
}
