//! Knowledge-enhanced transformer for adverse drug reaction (ADR) text
//! classification.
//!
//! ```text
//! text ─ preprocess ─ tokens S1 ─┬─ trie match ─ keywords S2
//!                                └─ [CLS] S1 [SEP] S2 [SEP] ─ embed
//!   ─ encoder layers 1..l ─ synonym fusion ─ layers l+1..L ─ [CLS] head
//! ```
//!
//! Training uses focal loss and Adam; every gradient is hand-derived and
//! checked against central finite differences.

pub mod classifier;
pub mod cli;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod lexicon;
pub mod pipeline;
pub mod real;

pub use error::{Error, Result};
pub use real::Real;
