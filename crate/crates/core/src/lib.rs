//! Listwise passage reranking over single-embedding passage compression.
//!
//! An encoder compresses every candidate passage into one `d`-dimensional
//! vector. A causal reranker reads the instruction, the query, the passage
//! vectors and a trailing query anchor, then scores each passage by the
//! cosine between its residual-fused representation and the hidden state at
//! the end-of-sequence position. No tokens are generated.
//!
//! - [`graph`] / [`tensor`]: tape-based reverse-mode autodiff
//! - [`gradcheck`]: central finite-difference verification
//! - [`data`]: tokenizer, corpus/qrels I/O, synthetic data generation
//! - [`encoder`], [`reranker`]: the two transformer models
//! - [`training`]: contrastive and pairwise losses, dual-stage training
//! - [`retrieval`]: BM25, dense search, reciprocal rank fusion, sliding windows
//! - [`eval`]: nDCG@k, efficiency accounting, ordering and ablation harnesses
//! - [`config`]: the TOML experiment file

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod pair;
pub mod reranker;
pub mod retrieval;
pub mod run;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
