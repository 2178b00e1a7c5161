//! Beam-space downlink CSI acquisition for FDD massive MIMO, end to end:
//! paired UL/DL channel generation with magnitude reciprocity, learned
//! beam-merging pilot precoding, quantized UE feedback, and DL CSI recovery
//! through closed-form minimum-norm decoding, classical baselines, and small
//! trained networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense f64 tensors with reverse-mode autodiff, the layer set
//!   the networks need, Adam, and gradient checking.
//! - [`channel`]: geometric multipath generator producing UL/DL CSI pairs that
//!   share path geometry (the reciprocity carrier), plus dataset files.
//! - [`beamspace`]: orthogonal beam matrix construction and beam-domain
//!   conversions and selection primitives.
//! - [`airlink`]: CSI-RS placement, pilot transmission under (merged) beam
//!   precoding, LS estimation at the UE, and quantized feedback.
//! - [`recovery`]: selected-beam reconstruction, minimum-norm decoding, ISTA,
//!   and the NMSE metric.
//! - [`models`]: the four learned pipelines and their two-stage trainer.
//! - [`methods`]: every recovery approach behind one trait, registered by
//!   name and selected at runtime.

pub mod airlink;
pub mod beamspace;
pub mod channel;
pub mod cmatrix;
pub mod error;
pub mod methods;
pub mod models;
pub mod numerics;
pub mod recovery;

pub use error::{Error, Result};
