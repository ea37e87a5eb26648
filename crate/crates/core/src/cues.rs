//! Per-person observations consumed by the fitting objective.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::semantic::ShapeEstimate;
use crate::{Error, Result};

/// 2D points in pixels with a confidence in `[0,1]` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observed2D {
    pub points: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
}

impl Observed2D {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.confidences.len() {
            return Err(Error::Dimension {
                what: "observation confidences",
                expected: self.points.len(),
                got: self.confidences.len(),
            });
        }
        if self.confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("confidences must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Pseudo ground-truth median depth of one person, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthCue {
    pub depth: f64,
    pub valid: bool,
}

/// Axis-aligned box `[x0, y0, x1, y1]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonCues {
    /// Sparse keypoints `J`.
    pub keypoints: Observed2D,
    /// Dense points `K`.
    pub dense: Observed2D,
    /// Attribute-derived shape estimate `F`.
    pub shape: ShapeEstimate,
    pub depth: DepthCue,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCues {
    pub persons: Vec<PersonCues>,
}
