//! Pinhole projection without distortion.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::{Error, Result};

/// Points must lie strictly beyond this depth (meters) to be projected.
pub const Z_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for Intrinsics {
    /// 640x480, 500 px focal length, centred principal point.
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Config(
                "focal lengths and image size must be positive".into(),
            ));
        }
        if ![self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "principal point".into(),
            });
        }
        Ok(())
    }

    pub fn project_point(&self, p: &Vec3, index: usize) -> Result<[f64; 2]> {
        if !(p.z > Z_MIN) {
            return Err(Error::Projection {
                index,
                z: p.z,
                z_min: Z_MIN,
            });
        }
        Ok([self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }

    pub fn project(&self, points: &[Vec3]) -> Result<Vec<[f64; 2]>> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| self.project_point(p, i))
            .collect()
    }

    /// Pulls a pixel-space gradient back to the 3D point.
    pub fn project_vjp(&self, p: &Vec3, g: [f64; 2]) -> Vec3 {
        let iz = 1.0 / p.z;
        let gu = g[0] * self.fx * iz;
        let gv = g[1] * self.fy * iz;
        Vec3::new(gu, gv, -(gu * p.x + gv * p.y) * iz)
    }

    pub fn contains(&self, uv: [f64; 2], margin: f64) -> bool {
        uv[0] >= margin
            && uv[1] >= margin
            && uv[0] <= self.width - margin
            && uv[1] <= self.height - margin
    }
}
