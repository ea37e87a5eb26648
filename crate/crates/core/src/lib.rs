//! Multi-person, camera-space fitting of a semantic parametric body model.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: a
//! simplified all-age body model, pinhole projection, the robust fitting
//! objective with hand-derived gradients, a staged adaptive-moment optimizer,
//! a Kabsch/least-squares mesh refitter, a synthetic cue generator and the
//! evaluation metrics. File formats and the command line live in the
//! companion `scenefit` crate.
#![no_std]
// with std linked in unit tests the inherent float methods win over `Float`

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod body_model;
pub mod camera;
pub mod cues;
pub mod diff;
mod error;
pub mod fit;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod refit;
pub mod semantic;
pub mod synth;

pub use body_model::{BodyConfig, BodyModel, BodyModelData, KeypointSet, Mesh, PersonState};
pub use camera::Intrinsics;
pub use cues::{DepthCue, Detection, ExpertCues, Observed2D, PersonCues};
pub use error::{Error, Result};
pub use fit::{default_config, fit_scene, FitConfig, Profile, SceneResult, StageConfig};
pub use losses::{DepthVariant, LossBreakdown, LossWeights};
pub use semantic::{AttributeCatalog, ShapeEstimate};
