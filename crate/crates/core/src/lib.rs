#![cfg_attr(not(test), no_std)]

//! Graph-to-graph transformer core.
//!
//! Relation-conditioned self-attention that reads a labelled graph over the
//! input tokens, pairwise edge scoring that writes a labelled graph back out,
//! and a recursive refinement loop that feeds each predicted graph into the
//! next encoding pass. Everything here is allocation-only (`alloc`); file
//! formats, training orchestration and the command line live in the `g2gt`
//! crate.

extern crate alloc;

pub mod attention;
pub mod decode;
mod error;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod refine;

pub use error::{Error, Result};
