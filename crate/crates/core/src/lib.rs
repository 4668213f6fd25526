//! Desk-scale temporal action detection toolkit.
//!
//! Detects and classifies action segments in feature sequences extracted from
//! untrimmed video. The temporal layer fuses two parallel convolutions of
//! different window sizes through a learned sigmoid gate, adds cross-attention
//! between each instant and the boundary frames of its receptive field, and an
//! instant-level branch from temporally pooled features. A feature pyramid
//! stacks these layers with stride-2 downsampling; a shared boundary head
//! estimates start/end distances as expectations over bin distributions.
//! Training, Soft-NMS post-processing, mAP evaluation and a synthetic dataset
//! generator round out the toolkit.

pub mod assign;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod infer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod params;
pub mod postprocess;
pub mod pyramid;
pub mod tag;
pub mod train;

pub use error::{Error, Result};
