//! Weakly supervised encoder-decoder speech recognition at desk scale.

pub mod checks;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod settings;
pub mod train;

pub use error::{Error, Result};

/// Subword id.
pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
