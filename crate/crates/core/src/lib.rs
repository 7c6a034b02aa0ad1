//! Co-occurrence texture statistics and a dual-branch gated encoder/decoder
//! for separating fog from cloud in visible imagery.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndtensor`]: dense `f64` tensors and the handful of differentiable
//!   layers the network needs, each with an explicit backward pass.
//! * [`kem`]: per-pixel gray-level co-occurrence statistics (the 8-channel
//!   statistical feature stack).
//! * [`dbsfnet`]: the dual-branch network, feature-selection gating and
//!   mask generation.
//! * [`trainer`]: loss, Adam, warmup + cosine schedule, augmentation and the
//!   training loop.
//! * [`metrics`]: confusion counts, segmentation scores, PR/ROC sweeps.
//! * [`dataio`]: PPM/PGM I/O, manifests, event-grouped splits and the
//!   synthetic scene generator.
//! * [`experiments`]: ablation variants built from model toggles.
//! * [`selfcheck`]: the oracle suites, runnable from the CLI.

pub mod dataio;
pub mod dbsfnet;
pub mod error;
pub mod experiments;
pub mod kem;
pub mod metrics;
pub mod ndtensor;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
