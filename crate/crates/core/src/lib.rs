//! Generative list reranking over a fixed global vocabulary of semantic-ID
//! tokens.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical
//! piece of the system:
//!
//! - [`corpus`]: items, interactions, rerank requests and synthetic data.
//! - [`tokenizer`]: residual k-means codebooks, semantic IDs and the token
//!   vocabulary.
//! - [`trie`]: per-request prefix trees with per-hypothesis pruning.
//! - [`model`]: an encoder-decoder transformer with a reverse-mode tape.
//! - [`decode`]: trie-constrained beam search and temperature sampling.
//! - [`training`]: next-token pre-training and GRPO post-training.
//! - [`eval`]: list-wise metrics, rewards, a preference simulator and the
//!   ablation harness.
//! - [`variance`]: Monte-Carlo probes of output-row gradient variance under
//!   local-index and global-identifier labels.
//!
//! File formats, configuration and the command line live in the `sidrank`
//! crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod trie;
pub mod variance;

pub use error::{Error, Result};

/// Item identifier as stored in the corpus.
pub type ItemId = u64;

/// Index into the model's output or input token vocabulary.
pub type TokenId = usize;
