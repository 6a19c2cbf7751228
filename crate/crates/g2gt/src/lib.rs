//! Dependency parsing with a graph-to-graph transformer: CoNLL-U input and
//! output, vocabularies, checkpoints, training, evaluation and parsing on top
//! of `g2gt-core`.

pub mod checkpoint;
pub mod config;
pub mod conllu;
pub mod demo;
mod error;
pub mod eval;
pub mod parser;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use parser::Parser;
