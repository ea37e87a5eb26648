//! Conversion of a target mesh into model parameters by alternating per-part
//! weighted Procrustes rotations with a linear least-squares shape solve.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // inherent float methods exist only with std
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PersonState};
use crate::math::{arr3, exp_so3, log_so3, vec3, weighted_kabsch, Mat3, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitConfig {
    pub iterations: usize,
    pub final_kinematic_pass: bool,
    /// Dense `V_model x V_source` row-stochastic map; `None` is the identity.
    #[serde(default)]
    pub vertex_map: Option<Vec<Vec<f64>>>,
}

impl Default for RefitConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            final_kinematic_pass: true,
            vertex_map: None,
        }
    }
}

impl RefitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("refit needs at least one iteration".into()));
        }
        if let Some(map) = &self.vertex_map {
            for (r, row) in map.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Config(alloc::format!(
                        "vertex map row {r} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of [`fit_part_rotations`].
#[derive(Debug, Clone, PartialEq)]
pub struct RotationFit {
    pub state: PersonState,
    /// Joints whose weighted support was degenerate; their local rotation
    /// was kept.
    pub skipped: Vec<usize>,
}

/// Outcome of [`fit_shape_lls`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFit {
    pub state: PersonState,
    /// Shape before clamping to `[0,1]`.
    pub unclamped_beta: Vec<f64>,
    pub rank_deficient: bool,
    pub clamped: bool,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitReport {
    pub state: PersonState,
    /// Per-vertex RMSE of the final state, meters.
    pub rmse: f64,
    /// RMSE after initialisation, after each alternation and after the
    /// kinematic pass (when enabled).
    pub rmse_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn vertex_rmse(a: &[Vec3], b: &[Vec3]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    (sum / a.len().max(1) as f64).sqrt()
}

fn check_target(model: &BodyModel, target: &[Vec3]) -> Result<()> {
    let v = model.config().vertex_count;
    if target.len() != v {
        return Err(Error::Dimension {
            what: "target vertices",
            expected: v,
            got: target.len(),
        });
    }
    Ok(())
}

/// Writes camera-frame part orientations back into `phi` and `theta`.
fn set_global_orientations(model: &BodyModel, state: &mut PersonState, global: &[Mat3]) {
    for &j in model.kinematic_order() {
        match model.parents()[j] {
            None => state.phi = arr3(&log_so3(&global[j])),
            Some(p) => state.theta[j - 1] = arr3(&log_so3(&(global[p].transpose() * global[j]))),
        }
    }
}

/// One weighted Kabsch update of every part orientation against the target,
/// each joint solved independently.
pub fn fit_part_rotations(
    model: &BodyModel,
    target: &[Vec3],
    state: &PersonState,
) -> Result<RotationFit> {
    check_target(model, target)?;
    let posed = model.pose(state)?;
    let nj = model.config().joint_count;
    let current: Vec<Mat3> = (0..nj)
        .map(|j| posed.global_rot * posed.world_rot[j])
        .collect();
    let mut delta = vec![None; nj];
    let mut skipped = Vec::new();
    for (j, d) in delta.iter_mut().enumerate() {
        let support = model.joint_support(j);
        let src: Vec<Vec3> = support.iter().map(|&(v, _)| posed.vertices[v]).collect();
        let dst: Vec<Vec3> = support.iter().map(|&(v, _)| target[v]).collect();
        let w: Vec<f64> = support.iter().map(|&(_, w)| w).collect();
        *d = weighted_kabsch(&src, &dst, &w, None);
        if d.is_none() {
            log::warn!("joint {j} has no skinning support; rotation kept");
            skipped.push(j);
        }
    }
    let mut global = current.clone();
    for &j in model.kinematic_order() {
        global[j] = match (delta[j], model.parents()[j]) {
            (Some(d), _) => d * current[j],
            // keep the local rotation under the updated parent
            (None, Some(p)) => global[p] * posed.world_rot[p].transpose() * posed.world_rot[j],
            (None, None) => current[j],
        };
    }
    let mut out = state.clone();
    set_global_orientations(model, &mut out, &global);
    Ok(RotationFit {
        state: out,
        skipped,
    })
}

fn solve_min_norm(a: &DMatrix<f64>, r: &DVector<f64>) -> (DVector<f64>, bool) {
    let ata = a.transpose() * a;
    let atr = a.transpose() * r;
    let n = ata.nrows();
    let svd = ata.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * 1e-12 * n as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let x = if smax > 0.0 {
        svd.solve(&atr, cutoff)
            .unwrap_or_else(|_| DVector::zeros(n))
    } else {
        DVector::zeros(n)
    };
    (x, rank < n)
}

/// Gauss-Newton solve of `min |A d - r|^2` for shape and root translation
/// with the pose held fixed; `A` stacks the posed blendshape directions.
pub fn fit_shape_lls(model: &BodyModel, target: &[Vec3], state: &PersonState) -> Result<ShapeFit> {
    check_target(model, target)?;
    let s = model.config().shape_dim;
    let nv = target.len();
    let mut cur = state.clone();
    let mut posed = model.pose(&cur)?;
    let mut rmse = vertex_rmse(&posed.vertices, target);
    let mut rank_deficient = false;
    for _ in 0..10 {
        let jac = model.shape_jacobian(&cur, &posed);
        let mut a = DMatrix::zeros(3 * nv, s + 3);
        let mut r = DVector::zeros(3 * nv);
        for v in 0..nv {
            let res = target[v] - posed.vertices[v];
            for k in 0..3 {
                let row = 3 * v + k;
                r[row] = res[k];
                for (c, col) in jac.iter().enumerate() {
                    a[(row, c)] = col[v][k];
                }
                a[(row, s + k)] = 1.0;
            }
        }
        let (delta, deficient) = solve_min_norm(&a, &r);
        rank_deficient |= deficient;
        // backtrack so the residual never increases
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let mut trial = cur.clone();
            for k in 0..s {
                trial.beta[k] += step * delta[k];
            }
            for k in 0..3 {
                trial.tau[k] += step * delta[s + k];
            }
            let p = model.pose(&trial)?;
            let e = vertex_rmse(&p.vertices, target);
            if e <= rmse {
                accepted = Some((trial, p, e));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, p, e)) = accepted else { break };
        let moved = delta.norm() * step;
        cur = trial;
        posed = p;
        rmse = e;
        if moved < 1e-13 {
            break;
        }
    }
    if rank_deficient {
        log::warn!("shape least squares is rank deficient; minimum-norm solution used");
    }
    let unclamped_beta = cur.beta.clone();
    let clamped = cur.beta.iter().any(|b| !(0.0..=1.0).contains(b));
    if clamped {
        cur.clamp_beta();
        rmse = vertex_rmse(&model.pose(&cur)?.vertices, target);
    }
    Ok(ShapeFit {
        state: cur,
        unclamped_beta,
        rank_deficient,
        clamped,
        rmse,
    })
}

/// Columns of the linearised residual for a camera-frame rotation increment
/// of every part about its posed joint centre; `out[v][j]` is the lever arm
/// `a` with `dY_v = w_j x a`.
fn rotation_levers(
    model: &BodyModel,
    state: &PersonState,
    posed: &crate::body_model::Posed,
) -> Vec<Vec<Vec3>> {
    let nj = model.config().joint_count;
    let tau = vec3(state.tau);
    let pivots = posed.joint_centres(&state.tau);
    let offsets: Vec<Vec3> = (0..nj)
        .map(|k| posed.world_trans[k] - posed.world_rot[k] * posed.rest_joints()[k])
        .collect();
    let mut out = vec![vec![Vec3::zeros(); nj]; posed.rest.len()];
    for (v, row) in model.skinning().rows.iter().enumerate() {
        for &(k, w) in row {
            let y = tau + posed.global_rot * (posed.world_rot[k] * posed.rest[v] + offsets[k]);
            let mut j = Some(k);
            while let Some(a) = j {
                out[v][a] += (y - pivots[a]) * w;
                j = model.parents()[a];
            }
        }
    }
    out
}

fn apply_increment(
    model: &BodyModel,
    state: &PersonState,
    posed: &crate::body_model::Posed,
    x: &DVector<f64>,
) -> PersonState {
    let s = model.config().shape_dim;
    let nj = model.config().joint_count;
    let current: Vec<Mat3> = (0..nj)
        .map(|j| posed.global_rot * posed.world_rot[j])
        .collect();
    let mut global = current.clone();
    for &j in model.kinematic_order() {
        let w = Vec3::new(x[s + 3 + 3 * j], x[s + 4 + 3 * j], x[s + 5 + 3 * j]);
        let base = match model.parents()[j] {
            None => current[j],
            Some(p) => global[p] * current[p].transpose() * current[j],
        };
        global[j] = exp_so3(&w) * base;
    }
    let mut out = state.clone();
    for k in 0..s {
        out.beta[k] += x[k];
    }
    out.clamp_beta();
    // the root turns about its joint centre
    let root = model.kinematic_order()[0];
    let pivot = posed.joint_centres(&state.tau)[root];
    let dr = global[root] * current[root].transpose();
    let t = pivot + dr * (vec3(state.tau) - pivot) + Vec3::new(x[s], x[s + 1], x[s + 2]);
    out.tau = arr3(&t);
    set_global_orientations(model, &mut out, &global);
    out
}

/// Damped Gauss-Newton over shape, translation and part rotations together;
/// at most `steps` accepted linearised solves.
pub fn fit_joint_lls(
    model: &BodyModel,
    target: &[Vec3],
    state: &PersonState,
    steps: usize,
) -> Result<(PersonState, f64)> {
    let s = model.config().shape_dim;
    let nj = model.config().joint_count;
    let nv = target.len();
    let n = s + 3 + 3 * nj;
    let mut cur = state.clone();
    let mut posed = model.pose(&cur)?;
    let mut rmse = vertex_rmse(&posed.vertices, target);
    let mut mu = 1e-6;
    for _ in 0..steps {
        let jac = model.shape_jacobian(&cur, &posed);
        let levers = rotation_levers(model, &cur, &posed);
        let mut ata = vec![0.0f64; n * n];
        let mut atr = DVector::<f64>::zeros(n);
        let mut rows = vec![[0.0f64; 3]; n];
        let mut nz = Vec::with_capacity(n);
        for v in 0..nv {
            let res = target[v] - posed.vertices[v];
            nz.clear();
            for (c, col) in jac.iter().enumerate() {
                rows[c] = [col[v].x, col[v].y, col[v].z];
                nz.push(c);
            }
            for k in 0..3 {
                let mut e = [0.0; 3];
                e[k] = 1.0;
                rows[s + k] = e;
                nz.push(s + k);
            }
            for (j, a) in levers[v].iter().enumerate() {
                if a.norm_squared() == 0.0 {
                    continue;
                }
                // d(w x a)/dw_k = e_k x a
                for k in 0..3 {
                    let mut e = Vec3::zeros();
                    e[k] = 1.0;
                    let d = e.cross(a);
                    rows[s + 3 + 3 * j + k] = [d.x, d.y, d.z];
                    nz.push(s + 3 + 3 * j + k);
                }
            }
            for (ia, &a) in nz.iter().enumerate() {
                let ra = rows[a];
                atr[a] += ra[0] * res.x + ra[1] * res.y + ra[2] * res.z;
                let out = &mut ata[a * n..(a + 1) * n];
                for &b in &nz[ia..] {
                    let rb = rows[b];
                    out[b] += ra[0] * rb[0] + ra[1] * rb[1] + ra[2] * rb[2];
                }
            }
        }
        // nz is ascending, so only the upper triangle was filled
        let ata = DMatrix::from_fn(n, n, |a, b| {
            if a <= b {
                ata[a * n + b]
            } else {
                ata[b * n + a]
            }
        });
        let scale = (0..n).map(|i| ata[(i, i)]).fold(0.0, f64::max).max(1e-30);
        let mut accepted = false;
        for _ in 0..8 {
            let mut damped = ata.clone();
            for i in 0..n {
                damped[(i, i)] += mu * scale;
            }
            let Some(chol) = damped.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let x = chol.solve(&atr);
            let trial = apply_increment(model, &cur, &posed, &x);
            let p = model.pose(&trial)?;
            let e = vertex_rmse(&p.vertices, target);
            if e <= rmse {
                let gain = rmse - e;
                cur = trial;
                posed = p;
                rmse = e;
                mu = (mu * 0.1).max(1e-12);
                accepted = gain > 0.0;
                break;
            }
            mu *= 10.0;
        }
        if !accepted || rmse < 1e-12 {
            break;
        }
    }
    Ok((cur, rmse))
}

/// One pass along the kinematic tree, parents first, rotating each part about
/// its posed joint centre.
fn kinematic_pass(model: &BodyModel, target: &[Vec3], state: &PersonState) -> Result<PersonState> {
    let mut cur = state.clone();
    for &j in model.kinematic_order() {
        let posed = model.pose(&cur)?;
        let pivot = posed.joint_centres(&cur.tau)[j];
        let support = model.joint_support(j);
        let src: Vec<Vec3> = support.iter().map(|&(v, _)| posed.vertices[v]).collect();
        let dst: Vec<Vec3> = support.iter().map(|&(v, _)| target[v]).collect();
        let w: Vec<f64> = support.iter().map(|&(_, w)| w).collect();
        let Some(d) = weighted_kabsch(&src, &dst, &w, Some((pivot, pivot))) else {
            continue;
        };
        let global_j = d * posed.global_rot * posed.world_rot[j];
        match model.parents()[j] {
            None => {
                // rotate about the root joint: adjust translation so the pivot stays fixed
                let t = vec3(cur.tau);
                let new_t = pivot + d * (t - pivot);
                cur.tau = arr3(&new_t);
                cur.phi = arr3(&log_so3(&global_j));
            }
            Some(p) => {
                let global_p = posed.global_rot * posed.world_rot[p];
                cur.theta[j - 1] = arr3(&log_so3(&(global_p.transpose() * global_j)));
            }
        }
    }
    Ok(cur)
}

fn map_source(config: &RefitConfig, source: &[Vec3]) -> Result<Vec<Vec3>> {
    match &config.vertex_map {
        None => Ok(source.to_vec()),
        Some(map) => {
            let mut out = Vec::with_capacity(map.len());
            for row in map {
                if row.len() != source.len() {
                    return Err(Error::Dimension {
                        what: "vertex map columns",
                        expected: row.len(),
                        got: source.len(),
                    });
                }
                out.push(
                    row.iter()
                        .zip(source)
                        .fold(Vec3::zeros(), |acc, (w, p)| acc + p * *w),
                );
            }
            Ok(out)
        }
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len().max(1) as f64
}

/// Full refit: map to model topology, initialise translation from centroids,
/// alternate rotations and shape (the shape solve is followed by two joint
/// linearised solves), then one kinematic pass. Every step is
/// accepted only if it does not increase the vertex RMSE.
pub fn refit(model: &BodyModel, source: &[Vec3], config: &RefitConfig) -> Result<RefitReport> {
    config.validate()?;
    let target = map_source(config, source)?;
    check_target(model, &target)?;
    let mut warnings = Vec::new();
    let mut state = PersonState::neutral(model.config());
    let rest = model.synthesize(&state)?.vertices;
    state.tau = arr3(&(centroid(&target) - centroid(&rest)));
    let mut rmse = vertex_rmse(&model.synthesize(&state)?.vertices, &target);
    let mut trace = vec![rmse];
    for _ in 0..config.iterations {
        let rot = fit_part_rotations(model, &target, &state)?;
        for j in &rot.skipped {
            let msg = alloc::format!("joint {j} skipped: degenerate skinning support");
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
        }
        let e = vertex_rmse(&model.synthesize(&rot.state)?.vertices, &target);
        if e <= rmse {
            state = rot.state;
            rmse = e;
        }
        let shape = fit_shape_lls(model, &target, &state)?;
        if shape.rank_deficient && !warnings.iter().any(|w| w.starts_with("rank")) {
            warnings.push("rank-deficient shape solve".into());
        }
        if shape.rmse <= rmse {
            state = shape.state;
            rmse = shape.rmse;
        }
        let (joint, e) = fit_joint_lls(model, &target, &state, 2)?;
        if e <= rmse {
            state = joint;
            rmse = e;
        }
        trace.push(rmse);
    }
    if config.final_kinematic_pass {
        let refined = kinematic_pass(model, &target, &state)?;
        let e = vertex_rmse(&model.synthesize(&refined)?.vertices, &target);
        if e <= rmse {
            state = refined;
            rmse = e;
        }
        trace.push(rmse);
    }
    Ok(RefitReport {
        state,
        rmse,
        rmse_trace: trace,
        warnings,
    })
}

/// Refits each mesh independently.
pub fn refit_batch(
    model: &BodyModel,
    sources: &[Vec<Vec3>],
    config: &RefitConfig,
) -> Vec<Result<RefitReport>> {
    sources.iter().map(|s| refit(model, s, config)).collect()
}
