//! Self-supervised pretraining of multichannel time-series encoders.
//!
//! The crate is organised around one shared encoder (convolutional stem plus
//! a sequential backbone) trained with one of five objectives, then adapted
//! to labelled tasks and analysed:
//!
//! - [`data`]: manifests, windowing, folds, subsampling, synthetic corpora
//! - [`nn`] and [`encoder`]: layers, the state-space / attention / conv backbones
//! - [`objectives`]: data2vec, DinoSR, JEPA, CPC and HuBERT++ with their maskers,
//!   EMA teachers, codebooks, Sinkhorn-Knopp and prototype banks
//! - [`train`]: Adam, pretraining, continual pretraining, checkpoints
//! - [`eval`]: finetuning and probing heads, AUROC / standardized MAE, label efficiency
//! - [`analysis`]: CKA, power-law fits, Spearman, bootstrap rankings, reports

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod seed;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
