//! Joint multilingual sentence embeddings learned with a multi-encoder /
//! multi-decoder recurrent sequence-to-sequence model, plus the exact
//! similarity-search evaluation used to measure cross-lingual closeness.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: N-way parallel corpora (loading, filtering, synthetic generation, dev splits).
//! - [`bpe`]: byte-pair-encoding merge learning and application.
//! - [`nn`]: tensors, LSTM layers with hand-written backward passes, pooling, loss, SGD.
//! - [`seq2seq`]: the multi-encoder/decoder model, training paths and the training loop.
//! - [`simsearch`]: distance metrics, blocked brute-force search and similarity error matrices.

pub mod bpe;
pub mod corpus;
mod error;
pub mod nn;
pub mod seq2seq;
pub mod simsearch;

pub use error::{Error, Result};

pub use bpe::BpeModel;
pub use corpus::{LanguageId, ParallelCorpus, Sentence};
pub use nn::{Real, Tensor1, Tensor2};
pub use seq2seq::{
    EncoderConfig, EncoderVariant, ModelConfig, ModelParams, PathSchedule, SentenceEmbedding,
    TrainingPath,
};
pub use simsearch::{DistanceMetric, EmbeddingMatrix, ErrorMatrix};
