//! Simplified all-age parametric body: shape blendshapes scaled by an
//! age-driven stature curve, articulated by forward kinematics and linear
//! blend skinning, then placed in the camera frame by a root rotation and
//! translation.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // inherent float methods exist only with std
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::math::{exp_so3_with_jacobian, frob, Mat3, Vec3};
use crate::{Error, Result};

/// Sizes of a body model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyConfig {
    pub vertex_count: usize,
    pub joint_count: usize,
    pub shape_dim: usize,
    pub sparse_kp_count: usize,
    pub dense_kp_count: usize,
}

/// Per-person parameters: shape `beta` in `[0,1]^S`, root orientation `phi`
/// (axis-angle), root translation `tau` in meters (camera frame, +z into the
/// scene) and one axis-angle rotation per non-root joint in `theta`.
///
/// The same layout doubles as the container for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonState {
    pub beta: Vec<f64>,
    pub phi: [f64; 3],
    pub tau: [f64; 3],
    pub theta: Vec<[f64; 3]>,
}

/// Parameter blocks of a [`PersonState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamBlock {
    Tau,
    Phi,
    Beta,
    Theta,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 4] = [
        ParamBlock::Tau,
        ParamBlock::Phi,
        ParamBlock::Beta,
        ParamBlock::Theta,
    ];
}

/// A single scalar coordinate of a scene's parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    pub person: usize,
    pub block: ParamBlock,
    pub index: usize,
}

impl PersonState {
    /// Mean shape, identity pose, at the origin.
    pub fn neutral(config: &BodyConfig) -> Self {
        Self {
            beta: vec![0.5; config.shape_dim],
            phi: [0.0; 3],
            tau: [0.0; 3],
            theta: vec![[0.0; 3]; config.joint_count - 1],
        }
    }

    /// All-zero state, used as a gradient accumulator.
    pub fn zeros(config: &BodyConfig) -> Self {
        Self {
            beta: vec![0.0; config.shape_dim],
            phi: [0.0; 3],
            tau: [0.0; 3],
            theta: vec![[0.0; 3]; config.joint_count - 1],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            beta: vec![0.0; self.beta.len()],
            phi: [0.0; 3],
            tau: [0.0; 3],
            theta: vec![[0.0; 3]; self.theta.len()],
        }
    }

    pub fn validate(&self, config: &BodyConfig) -> Result<()> {
        if self.beta.len() != config.shape_dim {
            return Err(Error::Dimension {
                what: "beta",
                expected: config.shape_dim,
                got: self.beta.len(),
            });
        }
        if self.theta.len() + 1 != config.joint_count {
            return Err(Error::Dimension {
                what: "theta",
                expected: config.joint_count - 1,
                got: self.theta.len(),
            });
        }
        if !self.coords().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                what: "person state".to_string(),
            });
        }
        Ok(())
    }

    pub fn block_len(&self, block: ParamBlock) -> usize {
        match block {
            ParamBlock::Tau | ParamBlock::Phi => 3,
            ParamBlock::Beta => self.beta.len(),
            ParamBlock::Theta => 3 * self.theta.len(),
        }
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::Tau => &self.tau,
            ParamBlock::Phi => &self.phi,
            ParamBlock::Beta => &self.beta,
            ParamBlock::Theta => self.theta.as_flattened(),
        }
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        match block {
            ParamBlock::Tau => &mut self.tau,
            ParamBlock::Phi => &mut self.phi,
            ParamBlock::Beta => &mut self.beta,
            ParamBlock::Theta => self.theta.as_flattened_mut(),
        }
    }

    /// Coordinates in block order tau, phi, beta, theta.
    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        ParamBlock::ALL
            .into_iter()
            .flat_map(move |b| self.block(b).iter().copied())
    }

    pub fn get(&self, block: ParamBlock, index: usize) -> f64 {
        self.block(block)[index]
    }

    pub fn set(&mut self, block: ParamBlock, index: usize, value: f64) {
        self.block_mut(block)[index] = value;
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &PersonState, scale: f64) {
        for b in ParamBlock::ALL {
            for (a, o) in self.block_mut(b).iter_mut().zip(other.block(b)) {
                *a += scale * o;
            }
        }
    }

    pub fn clamp_beta(&mut self) {
        for b in &mut self.beta {
            *b = b.clamp(0.0, 1.0);
        }
    }
}

/// Piecewise-linear map from the age coordinate to stature in meters,
/// constant beyond the first and last knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatureCurve {
    /// `(age coordinate, stature)` pairs, strictly increasing in age.
    pub knots: Vec<[f64; 2]>,
}

impl StatureCurve {
    /// Stature and its derivative w.r.t. age.
    pub fn eval(&self, age: f64) -> (f64, f64) {
        let k = &self.knots;
        if age <= k[0][0] {
            return (k[0][1], 0.0);
        }
        for w in k.windows(2) {
            let ([x0, y0], [x1, y1]) = (w[0], w[1]);
            if age < x1 {
                let slope = (y1 - y0) / (x1 - x0);
                return (y0 + slope * (age - x0), slope);
            }
        }
        (k[k.len() - 1][1], 0.0)
    }

    pub fn value(&self, age: f64) -> f64 {
        self.eval(age).0
    }

    /// Smallest age in `[lo, hi]` reaching `stature`, searching the
    /// increasing branch between the two knots.
    pub fn inverse(&self, stature: f64, lo: f64, hi: f64) -> Option<f64> {
        let (slo, shi) = (self.value(lo), self.value(hi));
        if stature < slo || stature > shi {
            return None;
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if self.value(m) < stature {
                a = m;
            } else {
                b = m;
            }
        }
        Some(0.5 * (a + b))
    }
}

/// Serializable body model contents; regressors and skinning weights are
/// dense row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModelData {
    /// Canonical rest pose at unit stature, meters.
    pub template_vertices: Vec<[f64; 3]>,
    /// One `V x 3` offset field per shape dimension, applied as `(beta_k - 0.5) * B_k`.
    pub shape_blendshapes: Vec<Vec<[f64; 3]>>,
    pub stature_curve: StatureCurve,
    pub age_dim: usize,
    pub height_dim: usize,
    /// Stature multiplier is `1 + height_gain * (beta_height - 0.5)`.
    pub height_gain: f64,
    /// `J x V`.
    pub joint_regressor: Vec<Vec<f64>>,
    /// `V x J`.
    pub skinning_weights: Vec<Vec<f64>>,
    pub kinematic_parents: Vec<Option<usize>>,
    pub sparse_kp_regressor: Vec<Vec<f64>>,
    pub dense_kp_regressor: Vec<Vec<f64>>,
    #[serde(default)]
    pub joint_names: Vec<String>,
}

/// Row-sparse nonnegative matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn from_dense(what: &'static str, dense: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(dense.len());
        for (r, row) in dense.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Dimension {
                    what,
                    expected: cols,
                    got: row.len(),
                });
            }
            let mut sum = 0.0;
            let mut entries = Vec::new();
            for (c, &w) in row.iter().enumerate() {
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::Config(alloc::format!(
                        "{what} row {r} has invalid weight {w}"
                    )));
                }
                if w > 0.0 {
                    entries.push((c, w));
                    sum += w;
                }
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(alloc::format!(
                    "{what} row {r} sums to {sum}, expected 1"
                )));
            }
            rows.push(entries);
        }
        Ok(Self { rows })
    }

    pub fn apply(&self, points: &[Vec3]) -> Vec<Vec3> {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .fold(Vec3::zeros(), |acc, &(c, w)| acc + points[c] * w)
            })
            .collect()
    }

    /// `out += M^T * grads`.
    pub fn transpose_accumulate(&self, grads: &[Vec3], out: &mut [Vec3]) {
        for (row, g) in self.rows.iter().zip(grads) {
            for &(c, w) in row {
                out[c] += g * w;
            }
        }
    }
}

/// Posed vertices in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointSet {
    Sparse,
    Dense,
}

/// Sparse keypoint indices of the default model.
pub mod keypoints {
    pub const NOSE: usize = 0;
    pub const HEAD_TOP: usize = 1;
    pub const NECK: usize = 2;
    pub const NAMES: [&str; 17] = [
        "nose",
        "head_top",
        "neck",
        "l_shoulder",
        "r_shoulder",
        "l_elbow",
        "r_elbow",
        "l_wrist",
        "r_wrist",
        "l_hip",
        "r_hip",
        "l_knee",
        "r_knee",
        "l_ankle",
        "r_ankle",
        "l_toe",
        "r_toe",
    ];
}

/// Intermediate quantities of one forward evaluation, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Posed {
    pub scale: f64,
    dscale_dage: f64,
    dscale_dheight: f64,
    unscaled: Vec<Vec3>,
    pub(crate) rest: Vec<Vec3>,
    rest_joints: Vec<Vec3>,
    local_jac: Vec<[Mat3; 3]>,
    local_rot: Vec<Mat3>,
    /// Rotation of each joint frame relative to the body root.
    pub world_rot: Vec<Mat3>,
    pub(crate) world_trans: Vec<Vec3>,
    body: Vec<Vec3>,
    pub global_rot: Mat3,
    global_jac: [Mat3; 3],
    pub vertices: Vec<Vec3>,
}

impl Posed {
    /// Rest-pose joint locations after shaping (body frame).
    pub fn rest_joints(&self) -> &[Vec3] {
        &self.rest_joints
    }

    /// Posed joint centres in the camera frame.
    pub fn joint_centres(&self, tau: &[f64; 3]) -> Vec<Vec3> {
        let t = crate::math::vec3(*tau);
        self.world_trans
            .iter()
            .map(|p| t + self.global_rot * p)
            .collect()
    }
}

/// Immutable body model; see [`BodyModelData`] for the parameterization.
#[derive(Debug, Clone)]
pub struct BodyModel {
    data: BodyModelData,
    config: BodyConfig,
    template: Vec<Vec3>,
    blendshapes: Vec<Vec<Vec3>>,
    joint_regressor: SparseRows,
    skinning: SparseRows,
    sparse_kp: SparseRows,
    dense_kp: SparseRows,
    /// Skinning columns: vertices influenced by each joint.
    joint_support: Vec<Vec<(usize, f64)>>,
    /// Parents before children.
    order: Vec<usize>,
}

impl BodyModel {
    pub fn new(data: BodyModelData) -> Result<Self> {
        let v = data.template_vertices.len();
        let j = data.kinematic_parents.len();
        let s = data.shape_blendshapes.len();
        if v == 0 || j == 0 || s == 0 {
            return Err(Error::Config(
                "vertex, joint and shape counts must be positive".to_string(),
            ));
        }
        let finite = data
            .template_vertices
            .iter()
            .flatten()
            .all(|x| x.is_finite())
            && data
                .shape_blendshapes
                .iter()
                .flatten()
                .flatten()
                .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                what: "body model geometry".to_string(),
            });
        }
        for b in &data.shape_blendshapes {
            if b.len() != v {
                return Err(Error::Dimension {
                    what: "shape blendshape",
                    expected: v,
                    got: b.len(),
                });
            }
        }
        if data.age_dim >= s || data.height_dim >= s {
            return Err(Error::Config(
                "age/height dimension out of range".to_string(),
            ));
        }
        let knots = &data.stature_curve.knots;
        if knots.is_empty()
            || knots.iter().any(|k| !(k[1] > 0.0))
            || knots.windows(2).any(|w| !(w[1][0] > w[0][0]))
        {
            return Err(Error::Config(
                "stature curve must be positive with increasing knots".to_string(),
            ));
        }
        if data.joint_regressor.len() != j {
            return Err(Error::Dimension {
                what: "joint regressor rows",
                expected: j,
                got: data.joint_regressor.len(),
            });
        }
        if data.skinning_weights.len() != v {
            return Err(Error::Dimension {
                what: "skinning rows",
                expected: v,
                got: data.skinning_weights.len(),
            });
        }
        let joint_regressor = SparseRows::from_dense("joint regressor", &data.joint_regressor, v)?;
        let skinning = SparseRows::from_dense("skinning weights", &data.skinning_weights, j)?;
        let sparse_kp =
            SparseRows::from_dense("sparse keypoint regressor", &data.sparse_kp_regressor, v)?;
        let dense_kp =
            SparseRows::from_dense("dense keypoint regressor", &data.dense_kp_regressor, v)?;
        if sparse_kp.rows.is_empty() || dense_kp.rows.is_empty() {
            return Err(Error::Config(
                "keypoint regressors must have at least one row".to_string(),
            ));
        }
        let order = topological_order(&data.kinematic_parents)?;
        let mut joint_support = vec![Vec::new(); j];
        for (vi, row) in skinning.rows.iter().enumerate() {
            for &(ji, w) in row {
                joint_support[ji].push((vi, w));
            }
        }
        let config = BodyConfig {
            vertex_count: v,
            joint_count: j,
            shape_dim: s,
            sparse_kp_count: sparse_kp.rows.len(),
            dense_kp_count: dense_kp.rows.len(),
        };
        let template = data
            .template_vertices
            .iter()
            .map(|p| crate::math::vec3(*p))
            .collect();
        let blendshapes = data
            .shape_blendshapes
            .iter()
            .map(|b| b.iter().map(|p| crate::math::vec3(*p)).collect())
            .collect();
        Ok(Self {
            data,
            config,
            template,
            blendshapes,
            joint_regressor,
            skinning,
            sparse_kp,
            dense_kp,
            joint_support,
            order,
        })
    }

    /// The built-in coarse humanoid (22 joints, 10 semantic shape dimensions).
    pub fn default_humanoid() -> Self {
        Self::new(humanoid::build()).expect("built-in model is valid")
    }

    pub fn config(&self) -> &BodyConfig {
        &self.config
    }

    pub fn data(&self) -> &BodyModelData {
        &self.data
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.data.kinematic_parents
    }

    /// Joints ordered parents first.
    pub fn kinematic_order(&self) -> &[usize] {
        &self.order
    }

    pub fn joint_support(&self, joint: usize) -> &[(usize, f64)] {
        &self.joint_support[joint]
    }

    pub fn stature(&self) -> &StatureCurve {
        &self.data.stature_curve
    }

    pub fn skinning(&self) -> &SparseRows {
        &self.skinning
    }

    pub fn blendshapes(&self) -> &[Vec<Vec3>] {
        &self.blendshapes
    }

    /// Overall body scale `stature(age) * height multiplier` with its
    /// derivatives w.r.t. the age and height coordinates.
    pub fn scale(&self, beta: &[f64]) -> (f64, f64, f64) {
        let (st, dst) = self.data.stature_curve.eval(beta[self.data.age_dim]);
        let gain = self.data.height_gain;
        let mult = 1.0 + gain * (beta[self.data.height_dim] - 0.5);
        (st * mult, dst * mult, st * gain)
    }

    pub fn regressor(&self, which: KeypointSet) -> &SparseRows {
        match which {
            KeypointSet::Sparse => &self.sparse_kp,
            KeypointSet::Dense => &self.dense_kp,
        }
    }

    pub fn joint_regressor(&self) -> &SparseRows {
        &self.joint_regressor
    }

    /// Forward map keeping every intermediate needed by [`BodyModel::backward`].
    pub fn pose(&self, state: &PersonState) -> Result<Posed> {
        state.validate(&self.config)?;
        let (scale, dscale_dage, dscale_dheight) = self.scale(&state.beta);
        let mut unscaled = self.template.clone();
        for (k, b) in self.blendshapes.iter().enumerate() {
            let c = state.beta[k] - 0.5;
            if c != 0.0 {
                for (u, d) in unscaled.iter_mut().zip(b) {
                    *u += d * c;
                }
            }
        }
        let rest: Vec<Vec3> = unscaled.iter().map(|u| u * scale).collect();
        let rest_joints = self.joint_regressor.apply(&rest);

        let nj = self.config.joint_count;
        let mut local_rot = vec![Mat3::identity(); nj];
        let mut local_jac = vec![[Mat3::zeros(); 3]; nj];
        for j in 1..nj {
            let (r, jac) = exp_so3_with_jacobian(&crate::math::vec3(state.theta[j - 1]));
            local_rot[j] = r;
            local_jac[j] = jac;
        }
        let mut world_rot = vec![Mat3::identity(); nj];
        let mut world_trans = vec![Vec3::zeros(); nj];
        for &j in &self.order {
            match self.data.kinematic_parents[j] {
                None => {
                    world_rot[j] = local_rot[j];
                    world_trans[j] = rest_joints[j];
                }
                Some(p) => {
                    world_rot[j] = world_rot[p] * local_rot[j];
                    world_trans[j] =
                        world_rot[p] * (rest_joints[j] - rest_joints[p]) + world_trans[p];
                }
            }
        }
        let offsets: Vec<Vec3> = (0..nj)
            .map(|j| world_trans[j] - world_rot[j] * rest_joints[j])
            .collect();
        let body: Vec<Vec3> = self
            .skinning
            .rows
            .iter()
            .zip(&rest)
            .map(|(row, x)| {
                row.iter().fold(Vec3::zeros(), |acc, &(j, w)| {
                    acc + (world_rot[j] * x + offsets[j]) * w
                })
            })
            .collect();
        let (global_rot, global_jac) = exp_so3_with_jacobian(&crate::math::vec3(state.phi));
        let tau = crate::math::vec3(state.tau);
        let vertices = body.iter().map(|p| tau + global_rot * p).collect();
        Ok(Posed {
            scale,
            dscale_dage,
            dscale_dheight,
            unscaled,
            rest,
            rest_joints,
            local_jac,
            local_rot,
            world_rot,
            world_trans,
            body,
            global_rot,
            global_jac,
            vertices,
        })
    }

    /// Reverse pass: accumulates into `grad` the gradient of a scalar whose
    /// gradient w.r.t. the posed vertices is `dvertices`.
    pub fn backward(&self, posed: &Posed, dvertices: &[Vec3], grad: &mut PersonState) {
        let nj = self.config.joint_count;
        let rt = posed.global_rot.transpose();
        let mut d_global = Mat3::zeros();
        let mut d_tau = Vec3::zeros();
        let mut d_body = Vec::with_capacity(dvertices.len());
        for (dy, p) in dvertices.iter().zip(&posed.body) {
            d_tau += dy;
            d_global += dy * p.transpose();
            d_body.push(rt * dy);
        }
        for k in 0..3 {
            grad.tau[k] += d_tau[k];
            grad.phi[k] += frob(&d_global, &posed.global_jac[k]);
        }

        // skinning: body_v = sum_j w (R_j x_v + o_j), o_j = t_j - R_j J_j
        let mut d_rot = vec![Mat3::zeros(); nj];
        let mut d_off = vec![Vec3::zeros(); nj];
        let mut d_rest = vec![Vec3::zeros(); posed.rest.len()];
        for (v, row) in self.skinning.rows.iter().enumerate() {
            let g = d_body[v];
            let x = posed.rest[v];
            let mut blended = Mat3::zeros();
            for &(j, w) in row {
                let wg = g * w;
                d_rot[j] += wg * x.transpose();
                d_off[j] += wg;
                blended += posed.world_rot[j] * w;
            }
            d_rest[v] += blended.transpose() * g;
        }
        let mut d_trans = d_off.clone();
        let mut d_joints = vec![Vec3::zeros(); nj];
        for j in 0..nj {
            d_rot[j] -= d_off[j] * posed.rest_joints[j].transpose();
            d_joints[j] -= posed.world_rot[j].transpose() * d_off[j];
        }

        // kinematic chain, children before parents
        let mut d_local = vec![Mat3::zeros(); nj];
        for &j in self.order.iter().rev() {
            match self.data.kinematic_parents[j] {
                None => {
                    d_local[j] += d_rot[j];
                    d_joints[j] += d_trans[j];
                }
                Some(p) => {
                    let rp = posed.world_rot[p];
                    let dr = d_rot[j];
                    let dt = d_trans[j];
                    d_local[j] += rp.transpose() * dr;
                    d_rot[p] += dr * posed.local_rot[j].transpose();
                    d_rot[p] += dt * (posed.rest_joints[j] - posed.rest_joints[p]).transpose();
                    let back = rp.transpose() * dt;
                    d_joints[j] += back;
                    d_joints[p] -= back;
                    d_trans[p] += dt;
                }
            }
        }
        for j in 1..nj {
            for k in 0..3 {
                grad.theta[j - 1][k] += frob(&d_local[j], &posed.local_jac[j][k]);
            }
        }

        self.joint_regressor
            .transpose_accumulate(&d_joints, &mut d_rest);

        let mut d_scale = 0.0;
        for (g, u) in d_rest.iter().zip(&posed.unscaled) {
            d_scale += g.dot(u);
        }
        for (k, b) in self.blendshapes.iter().enumerate() {
            let mut acc = 0.0;
            for (g, d) in d_rest.iter().zip(b) {
                acc += g.dot(d);
            }
            grad.beta[k] += acc * posed.scale;
        }
        grad.beta[self.data.age_dim] += d_scale * posed.dscale_dage;
        grad.beta[self.data.height_dim] += d_scale * posed.dscale_dheight;
    }

    /// Posed vertices of one person in the camera frame.
    pub fn synthesize(&self, state: &PersonState) -> Result<Mesh> {
        Ok(Mesh {
            vertices: self.pose(state)?.vertices,
        })
    }

    /// `J x 3` joints regressed from a mesh.
    pub fn regress_joints(&self, mesh: &Mesh) -> Result<Vec<Vec3>> {
        self.check_mesh(mesh)?;
        Ok(self.joint_regressor.apply(&mesh.vertices))
    }

    pub fn regress_keypoints(&self, mesh: &Mesh, which: KeypointSet) -> Result<Vec<Vec3>> {
        self.check_mesh(mesh)?;
        Ok(self.regressor(which).apply(&mesh.vertices))
    }

    fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        if mesh.vertices.len() != self.config.vertex_count {
            return Err(Error::Dimension {
                what: "mesh vertices",
                expected: self.config.vertex_count,
                got: mesh.vertices.len(),
            });
        }
        Ok(())
    }

    /// Derivatives of every posed vertex w.r.t. each shape coordinate
    /// (forward-mode tangents), pose held fixed.
    pub fn shape_jacobian(&self, state: &PersonState, posed: &Posed) -> Vec<Vec<Vec3>> {
        let s = self.config.shape_dim;
        let nj = self.config.joint_count;
        let mut out = Vec::with_capacity(s);
        for k in 0..s {
            let mut ds = 0.0;
            if k == self.data.age_dim {
                ds += posed.dscale_dage;
            }
            if k == self.data.height_dim {
                ds += posed.dscale_dheight;
            }
            let d_rest: Vec<Vec3> = posed
                .unscaled
                .iter()
                .zip(&self.blendshapes[k])
                .map(|(u, b)| u * ds + b * posed.scale)
                .collect();
            let d_joints = self.joint_regressor.apply(&d_rest);
            let mut d_trans = vec![Vec3::zeros(); nj];
            for &j in &self.order {
                if let Some(p) = self.data.kinematic_parents[j] {
                    d_trans[j] = posed.world_rot[p] * (d_joints[j] - d_joints[p]) + d_trans[p];
                } else {
                    d_trans[j] = d_joints[j];
                }
            }
            let col = self
                .skinning
                .rows
                .iter()
                .zip(&d_rest)
                .map(|(row, dx)| {
                    let db = row.iter().fold(Vec3::zeros(), |acc, &(j, w)| {
                        acc + (posed.world_rot[j] * (dx - d_joints[j]) + d_trans[j]) * w
                    });
                    posed.global_rot * db
                })
                .collect();
            out.push(col);
        }
        let _ = state;
        out
    }
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let roots = parents.iter().filter(|p| p.is_none()).count();
    if roots != 1 {
        return Err(Error::Config(alloc::format!(
            "kinematic tree needs exactly one root, found {roots}"
        )));
    }
    if parents.iter().flatten().any(|&p| p >= n) {
        return Err(Error::Config(
            "kinematic parent index out of range".to_string(),
        ));
    }
    let mut children = vec![Vec::new(); n];
    let mut root = 0;
    for (j, p) in parents.iter().enumerate() {
        match p {
            Some(p) => children[*p].push(j),
            None => root = j,
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![root];
    while let Some(j) = stack.pop() {
        order.push(j);
        for &c in children[j].iter().rev() {
            stack.push(c);
        }
    }
    if order.len() != n {
        return Err(Error::Config("kinematic tree contains a cycle".to_string()));
    }
    Ok(order)
}

mod humanoid {
    //! Procedural coarse humanoid: a hexagonal ring around every joint, a ring
    //! halfway along every bone, and tip vertices at the head, hands and toes.

    use super::*;
    use crate::semantic::dims;

    const RING: usize = 6;

    const NAMES: [&str; 22] = [
        "pelvis",
        "l_hip",
        "r_hip",
        "spine1",
        "l_knee",
        "r_knee",
        "spine2",
        "l_ankle",
        "r_ankle",
        "spine3",
        "l_foot",
        "r_foot",
        "neck",
        "l_collar",
        "r_collar",
        "head",
        "l_shoulder",
        "r_shoulder",
        "l_elbow",
        "r_elbow",
        "l_wrist",
        "r_wrist",
    ];
    const PARENTS: [i32; 22] = [
        -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
    ];
    // y up, +z facing forward, +x to the body's left
    const JOINTS: [[f64; 3]; 22] = [
        [0.0, 0.0, 0.0],
        [0.055, -0.05, 0.0],
        [-0.055, -0.05, 0.0],
        [0.0, 0.07, -0.01],
        [0.06, -0.28, 0.01],
        [-0.06, -0.28, 0.01],
        [0.0, 0.15, -0.01],
        [0.06, -0.49, -0.01],
        [-0.06, -0.49, -0.01],
        [0.0, 0.22, -0.005],
        [0.06, -0.52, 0.05],
        [-0.06, -0.52, 0.05],
        [0.0, 0.32, -0.01],
        [0.04, 0.28, -0.01],
        [-0.04, 0.28, -0.01],
        [0.0, 0.37, 0.0],
        [0.10, 0.29, -0.01],
        [-0.10, 0.29, -0.01],
        [0.19, 0.17, -0.01],
        [-0.19, 0.17, -0.01],
        [0.26, 0.05, 0.0],
        [-0.26, 0.05, 0.0],
    ];
    const JOINT_RADIUS: [f64; 22] = [
        0.09, 0.055, 0.055, 0.085, 0.04, 0.04, 0.085, 0.03, 0.03, 0.09, 0.025, 0.025, 0.04, 0.05,
        0.05, 0.055, 0.045, 0.045, 0.035, 0.035, 0.025, 0.025,
    ];
    // leaf extensions: (joint, end point, radius)
    const TIPS: [(usize, [f64; 3], f64); 5] = [
        (15, [0.0, 0.48, 0.0], 0.065),
        (20, [0.31, -0.03, 0.01], 0.025),
        (21, [-0.31, -0.03, 0.01], 0.025),
        (10, [0.06, -0.52, 0.13], 0.025),
        (11, [-0.06, -0.52, 0.13], 0.025),
    ];

    #[derive(Clone, Copy, PartialEq, Eq)]
    enum Region {
        Torso,
        Head,
        Arm,
        Leg,
    }

    fn region(joint: usize) -> Region {
        match joint {
            0 | 3 | 6 | 9 | 12 => Region::Torso,
            15 => Region::Head,
            13 | 14 | 16..=21 => Region::Arm,
            _ => Region::Leg,
        }
    }

    struct Vertex {
        pos: Vec3,
        centre: Vec3,
        owner: usize,
        weights: Vec<(usize, f64)>,
    }

    fn ring(centre: Vec3, axis: Vec3, radius: f64) -> Vec<Vec3> {
        let axis = axis.normalize();
        let helper = if axis.y.abs() < 0.9 {
            Vec3::y()
        } else {
            Vec3::z()
        };
        let u = helper.cross(&axis).normalize();
        let v = axis.cross(&u);
        (0..RING)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / RING as f64;
                centre + (u * a.cos() + v * a.sin()) * radius
            })
            .collect()
    }

    pub(super) fn build() -> BodyModelData {
        let joints: Vec<Vec3> = JOINTS.iter().map(|p| crate::math::vec3(*p)).collect();
        let parents: Vec<Option<usize>> = PARENTS
            .iter()
            .map(|&p| (p >= 0).then_some(p as usize))
            .collect();
        let nj = joints.len();
        let mut verts: Vec<Vertex> = Vec::new();
        let mut joint_ring_start = vec![0; nj];

        for j in 0..nj {
            let axis = match parents[j] {
                Some(p) => joints[j] - joints[p],
                None => Vec3::y(),
            };
            let weights = match parents[j] {
                Some(p) => vec![(p, 0.5), (j, 0.5)],
                None => vec![(j, 1.0)],
            };
            joint_ring_start[j] = verts.len();
            for pos in ring(joints[j], axis, JOINT_RADIUS[j]) {
                verts.push(Vertex {
                    pos,
                    centre: joints[j],
                    owner: j,
                    weights: weights.clone(),
                });
            }
        }
        // mid-bone rings, skinned to the bone's start joint
        for j in 0..nj {
            if let Some(p) = parents[j] {
                let mid = (joints[j] + joints[p]) * 0.5;
                let r = 0.5 * (JOINT_RADIUS[j] + JOINT_RADIUS[p]);
                for pos in ring(mid, joints[j] - joints[p], r) {
                    verts.push(Vertex {
                        pos,
                        centre: mid,
                        owner: p,
                        weights: vec![(p, 1.0)],
                    });
                }
            }
        }
        let mut tip_index = Vec::new();
        for &(j, end, r) in &TIPS {
            let end = crate::math::vec3(end);
            let mid = (joints[j] + end) * 0.5;
            for pos in ring(mid, end - joints[j], r) {
                verts.push(Vertex {
                    pos,
                    centre: mid,
                    owner: j,
                    weights: vec![(j, 1.0)],
                });
            }
            tip_index.push(verts.len());
            verts.push(Vertex {
                pos: end,
                centre: end,
                owner: j,
                weights: vec![(j, 1.0)],
            });
        }
        let nose = verts.len();
        let head = joints[15];
        verts.push(Vertex {
            pos: head + Vec3::new(0.0, 0.025, 0.065),
            centre: head,
            owner: 15,
            weights: vec![(15, 1.0)],
        });

        // unit stature, pelvis at the origin
        let (lo, hi) = verts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.pos.y), hi.max(v.pos.y))
            });
        let unit = 1.0 / (hi - lo);
        for v in &mut verts {
            v.pos *= unit;
            v.centre *= unit;
        }
        let joints: Vec<Vec3> = joints.iter().map(|p| p * unit).collect();
        let nv = verts.len();

        let mut blend = vec![vec![[0.0; 3]; nv]; 10];
        let hip_y = joints[1].y;
        let foot_y = lo * unit;
        let neck_y = joints[12].y;
        for (i, v) in verts.iter().enumerate() {
            let reg = region(v.owner);
            let radial = v.pos - v.centre;
            let side = if v.pos.x >= 0.0 { 1.0 } else { -1.0 };
            let leg_frac = if reg == Region::Leg {
                ((hip_y - v.pos.y) / (hip_y - foot_y)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let head_rel = v.pos - joints[15];
            let mut set = |dim: usize, d: Vec3| blend[dim][i] = [d.x, d.y, d.z];
            // age: longer legs, relatively narrower head
            let mut age = Vec3::new(0.0, -0.02 * leg_frac, 0.0);
            if reg == Region::Head {
                age += Vec3::new(-0.03 * head_rel.x, 0.0, -0.03 * head_rel.z);
            }
            set(dims::AGE, age);
            // gender: narrower shoulders, wider hips
            let gender = match reg {
                Region::Arm => Vec3::new(-0.03 * side, 0.0, 0.0),
                Region::Leg => Vec3::new(0.02 * side, 0.0, 0.0),
                _ => Vec3::zeros(),
            };
            set(dims::GENDER, gender);
            let girth = match reg {
                Region::Torso => 1.0,
                Region::Head => 0.2,
                _ => 0.6,
            };
            set(dims::WEIGHT, radial * (0.4 * girth));
            set(
                dims::MUSCLE,
                if matches!(reg, Region::Arm | Region::Leg) {
                    radial * 0.4
                } else {
                    Vec3::zeros()
                },
            );
            // remaining dimensions: proportions
            let arm_stretch = if reg == Region::Arm && matches!(v.owner, 16..=21) {
                (v.pos - joints[if side > 0.0 { 16 } else { 17 }]) * 0.1
            } else {
                Vec3::zeros()
            };
            set(5, arm_stretch);
            set(6, Vec3::new(0.0, -0.04 * leg_frac, 0.0));
            let torso = if matches!(reg, Region::Torso | Region::Head | Region::Arm) {
                Vec3::new(0.0, 0.04 * (v.pos.y / neck_y).clamp(0.0, 1.0), 0.0)
            } else {
                Vec3::zeros()
            };
            set(7, torso);
            set(
                8,
                if reg == Region::Head {
                    head_rel * 0.15
                } else {
                    Vec3::zeros()
                },
            );
            set(
                9,
                if reg == Region::Arm {
                    Vec3::new(0.03 * side, 0.0, 0.0)
                } else {
                    Vec3::zeros()
                },
            );
        }

        let mut joint_regressor = vec![vec![0.0; nv]; nj];
        for (j, row) in joint_regressor.iter_mut().enumerate() {
            for k in 0..RING {
                row[joint_ring_start[j] + k] = 1.0 / RING as f64;
            }
        }
        let mut skinning_weights = vec![vec![0.0; nj]; nv];
        for (row, v) in skinning_weights.iter_mut().zip(&verts) {
            for &(j, w) in &v.weights {
                row[j] += w;
            }
        }
        let one_hot = |i: usize| {
            let mut r = vec![0.0; nv];
            r[i] = 1.0;
            r
        };
        let at_joint = |j: usize| joint_regressor[j].clone();
        let sparse_kp_regressor = vec![
            one_hot(nose),
            one_hot(tip_index[0]),
            at_joint(12),
            at_joint(16),
            at_joint(17),
            at_joint(18),
            at_joint(19),
            at_joint(20),
            at_joint(21),
            at_joint(1),
            at_joint(2),
            at_joint(4),
            at_joint(5),
            at_joint(7),
            at_joint(8),
            one_hot(tip_index[3]),
            one_hot(tip_index[4]),
        ];
        let dense_kp_regressor = (0..64).map(|i| one_hot((i * (nv - 1) + 31) / 63)).collect();

        BodyModelData {
            template_vertices: verts.iter().map(|v| [v.pos.x, v.pos.y, v.pos.z]).collect(),
            shape_blendshapes: blend,
            stature_curve: StatureCurve {
                knots: vec![
                    [0.02, 0.70],
                    [0.06, 0.90],
                    [0.14, 1.20],
                    [0.35, 1.55],
                    [0.66, 1.75],
                    [0.92, 1.70],
                ],
            },
            age_dim: dims::AGE,
            height_dim: dims::HEIGHT,
            height_gain: 0.3,
            joint_regressor,
            skinning_weights,
            kinematic_parents: parents,
            sparse_kp_regressor,
            dense_kp_regressor,
            joint_names: NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}
