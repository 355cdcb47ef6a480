//! Contextual planning networks.
//!
//! A small, CPU-only library for goal-image conditioned planning by gradient
//! descent through a learned latent dynamics model, with the surrounding
//! experimental machinery:
//!
//! - [`diffcore`]: define-by-run reverse-mode autodiff with support for
//!   differentiating through a gradient step.
//! - [`netblocks`]: linear, convolutional and neuromodulated layers plus the
//!   `CPNP` parameter file format.
//! - [`models`]: the BC, TE-BC, UPN and CPN method variants.
//! - [`planner`]: inner-loop plan refinement and model-predictive control.
//! - [`imitation`]: outer-loop behavior-cloning training with Adam.
//! - [`worlds`]: a deterministic kinematic manipulation suite with an 84x84
//!   rasterizer and heuristic demonstrators.
//! - [`datastore`]: the `CPNT` trajectory format, manifests and
//!   leave-one-task-out splits.
//! - [`harness`]: zero-shot evaluation, the method x task matrix, the
//!   vector-goal extrapolation study and report emission.

pub mod datastore;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod imitation;
pub mod kv;
pub mod models;
pub mod netblocks;
pub mod par;
pub mod planner;
pub mod worlds;

pub use error::{Error, Result};
