//! Desk-scale laboratory for masked character-prediction pretraining objectives.
//!
//! The crate covers the whole pipeline: byte-level BPE vocabularies, label
//! spaces for MLM / first-or-last-character / n-character objectives, BERT-style
//! masking, a small reverse-mode autodiff core, a post-norm transformer encoder
//! with objective heads, AdamW pretraining, downstream probing with the usual
//! evaluation metrics, an analytic FLOPs model and complexity-vs-score analysis.

pub mod analysis;
pub mod autodiff;
pub mod bpe;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod flops;
pub mod masking;
pub mod metrics;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
