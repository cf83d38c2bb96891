//! Core algorithms for question-driven video segment retrieval.
//!
//! A dual multimodal encoder (one transformer for multimodal questions, one
//! for clip sequences of video segments) is trained with a symmetric in-batch
//! contrastive loss. Segments are indexed as unit vectors and ranked by dot
//! product; rankings are scored with mAP and Recall@K.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command-line
//! tool and thread pools live in the `tqvsr` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod dme;
pub mod exec;
pub mod featurebank;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use corpus::{QueryType, SegmentCorpus, Split};
pub use dme::{DmeConfig, DmeModel, EncoderConfig, FusionMode, MaskSpec, Side};
pub use exec::{Executor, Sequential};
pub use matrix::Matrix;
pub use real::Real;
