//! Desk-scale laboratory for training and evaluating small Llama-style causal
//! language models: byte-level BPE, packed-block pretraining, instruction
//! fine-tuning, perplexity and benchmark evaluation over checkpoint sweeps.

// Range checks are written as `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod par;
pub mod report;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, ErrorKind, Result};
