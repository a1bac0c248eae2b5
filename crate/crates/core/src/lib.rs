//! Sentence encoders trained by projecting dictionary definitions into a frozen
//! space of entry embeddings, with progressive separate training over a sequence
//! of reshaped entry spaces.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense arrays, a reverse-mode tape and the AdamW optimizer.
//! * [`encoder`]: a small bidirectional transformer with a pooler and the
//!   CLS / Mean / Prompt pooling strategies.
//! * [`dictionary`]: ingestion, merging and filtering of (headword, definition) data.
//! * [`entry_embed`]: the frozen entry-embedding matrix built from an encoder.
//! * [`geometry`]: centering, whitening, FastICA, projections and anisotropy metrics.
//! * [`training`]: the entry-classification loss, one-epoch training, grid search
//!   over encoding combinations and the progressive orchestrator.
//! * [`eval`]: Spearman evaluation and the synthetic semantic world.
//! * [`experiment`]: config-driven runs that write reproducible result records.

pub mod checkpoint;
pub mod dictionary;
pub mod encoder;
pub mod entry_embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
