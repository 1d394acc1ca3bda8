//! Long-input transformer building blocks: a small autodiff tensor library,
//! full / block-local / global-local attention, position encodings, an
//! encoder-decoder model, checkpoint surgery for long inputs, data
//! preparation, ROUGE scoring and an attention scaling benchmark.

pub mod adapt;
pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod posenc;
pub mod rouge;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
