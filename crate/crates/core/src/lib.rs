//! Face defrontalization as a training-time augmentation for pose-invariant
//! face recognition.
//!
//! The crate covers the full desk-scale pipeline: landmark alignment
//! ([`geometry`]), dataset ingestion and synthetic faces ([`data`]), the
//! flow-warping defrontalization networks and the embedding backbone
//! ([`nets`]), their objectives ([`losses`]), the threshold-gated
//! augmentation policy ([`augmentation`]), training loops ([`training`]) and
//! the verification/identification/speed protocols ([`evaluation`]).

pub mod error;
pub mod geometry;
pub mod data;
pub mod image;
pub mod nets;
pub mod losses;
pub mod augmentation;
pub mod training;
pub mod evaluation;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
