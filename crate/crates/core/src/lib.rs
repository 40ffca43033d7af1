//! Season-aware multimodal masked image modeling at desk scale.
//!
//! Optical and SAR rasters from several seasons are tokenized, masked
//! consistently within each season, encoded jointly by one transformer, fused
//! across seasons by cross-attention, and reconstructed by per-modality
//! decoders. Everything runs on a small `f64` reverse-mode tape.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder_mim;
pub mod downstream;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod masking;
pub mod numerics;
pub mod pretrain;
pub mod synthdata;
pub mod tm_fusion;

pub use error::{Error, Result};
