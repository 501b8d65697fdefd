//! Cluster-based concept importance (CCI) for CLIP-style image encoders.
//!
//! The pipeline clusters an image's patch embeddings with K-means, removes
//! each cluster from every attention row of the encoder in turn, and scores
//! the cluster by how much the image-text cosine similarity drops. The
//! normalized drops are painted back onto the patch grid as an importance
//! map. Around that core sit a deletion/insertion faithfulness harness, a
//! foreground/background error taxonomy, and geometric image-variant
//! generators.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cci;
pub mod cluster;
pub mod diagnose;
pub mod encoder;
pub mod error;
pub mod faith;
pub mod model_io;
pub mod resample;
pub mod synthetic;
pub mod transforms;

pub use error::{CciError, Result};
