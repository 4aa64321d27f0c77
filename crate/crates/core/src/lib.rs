//! Circuit discovery workbench: string-edit datasets, a small
//! encoder-decoder transformer, activation-level circuit discovery through
//! continuous sparsification, circuit evaluation and composition, and
//! compiled reference transformers with known circuits.

pub mod compose;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod masking;
pub mod model;
pub mod raspc;
pub mod tensor;

pub use error::{Error, Result};
