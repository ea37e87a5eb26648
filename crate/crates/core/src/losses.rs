//! Terms of the scene objective
//! `L = l2d L_2D + ldense L_dense + lshape L_shape + L_init + ldepth L_depth`
//! and their gradients.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods exist only with std
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, KeypointSet, PersonState, Posed};
use crate::camera::Intrinsics;
use crate::cues::{DepthCue, Observed2D, PersonCues};
use crate::math::{geodesic_sq_with_grad, vec3, Vec3};
use crate::semantic::ShapeEstimate;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthVariant {
    /// Pairwise ordering hinge with a relative same-plane margin (D).
    Ordering,
    /// Robust residual to a per-evaluation affine fit of the cue depths (RD).
    AffineRd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_2d: f64,
    pub lambda_dense: f64,
    pub lambda_shape: f64,
    pub lambda_depth: f64,
    pub lambda_init_beta: f64,
    pub lambda_init_phi: f64,
    pub lambda_init_verts: f64,
    /// Squared deviation of the x/y root translation from the previous state.
    pub lambda_init_tau_xy: f64,
    /// Robustifier scale for the pixel losses.
    pub sigma: f64,
    pub depth_variant: DepthVariant,
    /// Relative same-plane margin of the ordering loss.
    pub depth_eps_rel: f64,
    /// Robustifier scale (meters) of the affine depth loss.
    pub sigma_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_2d: 0.01,
            lambda_dense: 0.001,
            lambda_shape: 10.0,
            lambda_depth: 0.0,
            lambda_init_beta: 0.0,
            lambda_init_phi: 0.0,
            lambda_init_verts: 0.0,
            lambda_init_tau_xy: 0.0,
            sigma: 100.0,
            depth_variant: DepthVariant::Ordering,
            depth_eps_rel: 0.2,
            sigma_d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_2d,
            self.lambda_dense,
            self.lambda_shape,
            self.lambda_depth,
            self.lambda_init_beta,
            self.lambda_init_phi,
            self.lambda_init_verts,
            self.lambda_init_tau_xy,
            self.depth_eps_rel,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma_d > 0.0) {
            return Err(Error::Config("robustifier scales must be positive".into()));
        }
        Ok(())
    }
}

/// A loss value, its gradient, and whether the input was degenerate (empty
/// observations, no valid depth cue) so the value defaulted to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval<G> {
    pub value: f64,
    pub grad: G,
    pub flagged: bool,
}

/// Geman-McClure `sigma^2 x^2 / (sigma^2 + x^2)`.
pub fn geman_mcclure(x: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let x2 = x * x;
    s2 * x2 / (s2 + x2)
}

pub fn geman_mcclure_derivative(x: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let den = s2 + x * x;
    2.0 * s2 * s2 * x / (den * den)
}

/// Mean over points of `rho(c_j |pred_j - obs_j|, sigma)`, with its gradient
/// w.r.t. the predicted pixels.
pub fn reprojection_loss(
    pred: &[[f64; 2]],
    obs: &Observed2D,
    sigma: f64,
) -> Result<LossEval<Vec<[f64; 2]>>> {
    if pred.len() != obs.points.len() || obs.confidences.len() != obs.points.len() {
        return Err(Error::Dimension {
            what: "reprojection points",
            expected: obs.points.len(),
            got: pred.len(),
        });
    }
    let n = pred.len();
    if n == 0 {
        return Ok(LossEval {
            value: 0.0,
            grad: Vec::new(),
            flagged: true,
        });
    }
    let s4 = sigma.powi(4);
    let s2 = sigma * sigma;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for ((p, o), &c) in pred.iter().zip(&obs.points).zip(&obs.confidences) {
        let d = [p[0] - o[0], p[1] - o[1]];
        let x2 = c * c * (d[0] * d[0] + d[1] * d[1]);
        let den = s2 + x2;
        value += s2 * x2 / den;
        let k = 2.0 * s4 * c * c / (den * den) * inv_n;
        grad.push([k * d[0], k * d[1]]);
    }
    Ok(LossEval {
        value: value * inv_n,
        grad,
        flagged: false,
    })
}

/// Mean squared error between `beta` and the estimate over every dimension.
pub fn shape_loss(beta: &[f64], estimate: &ShapeEstimate) -> Result<LossEval<Vec<f64>>> {
    if beta.len() != estimate.values.len() {
        return Err(Error::Dimension {
            what: "shape estimate",
            expected: beta.len(),
            got: estimate.values.len(),
        });
    }
    let s = beta.len() as f64;
    let mut value = 0.0;
    let grad = beta
        .iter()
        .zip(&estimate.values)
        .map(|(b, f)| {
            value += (b - f) * (b - f);
            2.0 * (b - f) / s
        })
        .collect();
    Ok(LossEval {
        value: value / s,
        grad,
        flagged: false,
    })
}

/// Pairwise depth-ordering hinge over valid persons. Pairs whose cue depths
/// differ by at most `eps_rel * max(d_i, d_j)` are pulled within that margin
/// of each other; otherwise the nearer person must stay at least the margin
/// in front of the farther one.
pub fn depth_ordering_loss(
    root_z: &[f64],
    cues: &[DepthCue],
    eps_rel: f64,
) -> Result<LossEval<Vec<f64>>> {
    if root_z.len() != cues.len() {
        return Err(Error::Dimension {
            what: "depth cues",
            expected: root_z.len(),
            got: cues.len(),
        });
    }
    let n = root_z.len();
    let mut grad = vec![0.0; n];
    let valid: Vec<usize> = (0..n).filter(|&i| cues[i].valid).collect();
    if valid.is_empty() {
        return Ok(LossEval {
            value: 0.0,
            grad,
            flagged: true,
        });
    }
    let mut value = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in valid.iter().enumerate() {
        for &j in &valid[a + 1..] {
            pairs += 1;
            let (di, dj) = (cues[i].depth, cues[j].depth);
            let m = eps_rel * di.max(dj);
            if (di - dj).abs() <= m {
                let dz = root_z[i] - root_z[j];
                let h = dz.abs() - m;
                if h > 0.0 {
                    value += h * h;
                    let g = 2.0 * h * dz.signum();
                    grad[i] += g;
                    grad[j] -= g;
                }
            } else {
                let (near, far) = if di < dj { (i, j) } else { (j, i) };
                let h = root_z[near] - root_z[far] + m;
                if h > 0.0 {
                    value += h * h;
                    grad[near] += 2.0 * h;
                    grad[far] -= 2.0 * h;
                }
            }
        }
    }
    if pairs == 0 {
        return Ok(LossEval {
            value: 0.0,
            grad,
            flagged: false,
        });
    }
    let inv = 1.0 / pairs as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossEval {
        value: value * inv,
        grad,
        flagged: false,
    })
}

/// Closed-form least-squares fit `z ~ a d + b` with `a >= 1e-3`; equal cue
/// depths fall back to `a = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    /// Whether `a` depends on `z` (false when clamped or degenerate).
    slope_active: bool,
}

pub const MIN_AFFINE_SLOPE: f64 = 1e-3;

pub fn fit_affine(depths: &[f64], root_z: &[f64]) -> AffineFit {
    let n = depths.len() as f64;
    let dm = depths.iter().sum::<f64>() / n;
    let zm = root_z.iter().sum::<f64>() / n;
    let sdd: f64 = depths.iter().map(|d| (d - dm) * (d - dm)).sum();
    if sdd <= 1e-12 * (1.0 + dm * dm) {
        return AffineFit {
            a: 1.0,
            b: zm - dm,
            slope_active: false,
        };
    }
    let sdz: f64 = depths
        .iter()
        .zip(root_z)
        .map(|(d, z)| (d - dm) * (z - zm))
        .sum();
    let a = sdz / sdd;
    if a < MIN_AFFINE_SLOPE {
        AffineFit {
            a: MIN_AFFINE_SLOPE,
            b: zm - MIN_AFFINE_SLOPE * dm,
            slope_active: false,
        }
    } else {
        AffineFit {
            a,
            b: zm - a * dm,
            slope_active: true,
        }
    }
}

/// Mean of `rho(|a d_i + b - z_i|, sigma_d)` over valid persons, refitting
/// `(a, b)` on every call and differentiating through the fit.
pub fn affine_root_depth_loss(
    root_z: &[f64],
    cues: &[DepthCue],
    sigma_d: f64,
) -> Result<(LossEval<Vec<f64>>, Option<AffineFit>)> {
    if root_z.len() != cues.len() {
        return Err(Error::Dimension {
            what: "depth cues",
            expected: root_z.len(),
            got: cues.len(),
        });
    }
    let mut grad = vec![0.0; root_z.len()];
    let valid: Vec<usize> = (0..root_z.len()).filter(|&i| cues[i].valid).collect();
    if valid.len() < 2 {
        return Ok((
            LossEval {
                value: 0.0,
                grad,
                flagged: true,
            },
            None,
        ));
    }
    let d: Vec<f64> = valid.iter().map(|&i| cues[i].depth).collect();
    let z: Vec<f64> = valid.iter().map(|&i| root_z[i]).collect();
    let fit = fit_affine(&d, &z);
    let n = d.len() as f64;
    let dm = d.iter().sum::<f64>() / n;
    let sdd: f64 = d.iter().map(|x| (x - dm) * (x - dm)).sum();
    let mut value = 0.0;
    let mut g = Vec::with_capacity(d.len());
    for (di, zi) in d.iter().zip(&z) {
        let r = fit.a * di + fit.b - zi;
        value += geman_mcclure(r, sigma_d);
        g.push(geman_mcclure_derivative(r, sigma_d) / n);
    }
    let g_sum: f64 = g.iter().sum();
    let g_slope: f64 = if fit.slope_active {
        g.iter().zip(&d).map(|(gi, di)| gi * (di - dm)).sum()
    } else {
        0.0
    };
    for (k, &i) in valid.iter().enumerate() {
        let da = if fit.slope_active {
            (d[k] - dm) / sdd
        } else {
            0.0
        };
        grad[i] = g_slope * da + g_sum / n - g[k];
    }
    Ok((
        LossEval {
            value: value / n,
            grad,
            flagged: false,
        },
        Some(fit),
    ))
}

fn init_reg_accumulate(
    state: &PersonState,
    prev: &PersonState,
    vertices: &[Vec3],
    prev_vertices: Option<&[Vec3]>,
    w: &LossWeights,
    scale: f64,
    grad: &mut PersonState,
    dverts: &mut [Vec3],
) -> f64 {
    let mut value = 0.0;
    if w.lambda_init_beta > 0.0 {
        let s = state.beta.len() as f64;
        let mut mse = 0.0;
        for (k, (b, p)) in state.beta.iter().zip(&prev.beta).enumerate() {
            mse += (b - p) * (b - p);
            grad.beta[k] += scale * w.lambda_init_beta * 2.0 * (b - p) / s;
        }
        value += w.lambda_init_beta * mse / s;
    }
    if w.lambda_init_phi > 0.0 {
        let (g2, g) = geodesic_sq_with_grad(&vec3(state.phi), &vec3(prev.phi));
        value += w.lambda_init_phi * g2;
        for k in 0..3 {
            grad.phi[k] += scale * w.lambda_init_phi * g[k];
        }
    }
    if w.lambda_init_verts > 0.0 {
        if let Some(pv) = prev_vertices {
            let denom = 3.0 * vertices.len() as f64;
            let mut mse = 0.0;
            for ((v, p), dv) in vertices.iter().zip(pv).zip(dverts.iter_mut()) {
                let d = v - p;
                mse += d.norm_squared();
                *dv += d * (scale * w.lambda_init_verts * 2.0 / denom);
            }
            value += w.lambda_init_verts * mse / denom;
        }
    }
    if w.lambda_init_tau_xy > 0.0 {
        for k in 0..2 {
            let d = state.tau[k] - prev.tau[k];
            value += w.lambda_init_tau_xy * d * d;
            grad.tau[k] += scale * w.lambda_init_tau_xy * 2.0 * d;
        }
    }
    value
}

/// Regularizer toward the previous optimization state:
/// `lb MSE(beta) + lphi angle(phi)^2 + lv MSE(vertices) + lxy |tau_xy|^2`.
pub fn init_reg_loss(
    model: &BodyModel,
    state: &PersonState,
    prev: &PersonState,
    weights: &LossWeights,
) -> Result<LossEval<PersonState>> {
    let posed = model.pose(state)?;
    let prev_vertices = model.pose(prev)?.vertices;
    let mut grad = state.zeros_like();
    let mut dverts = vec![Vec3::zeros(); posed.vertices.len()];
    let value = init_reg_accumulate(
        state,
        prev,
        &posed.vertices,
        Some(&prev_vertices),
        weights,
        1.0,
        &mut grad,
        &mut dverts,
    );
    model.backward(&posed, &dverts, &mut grad);
    Ok(LossEval {
        value,
        grad,
        flagged: false,
    })
}

/// Raw term values (each averaged over persons where per-person) and the
/// weighted total. `init` already carries its internal weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reproj_2d: f64,
    pub dense: f64,
    pub shape: f64,
    pub init: f64,
    pub depth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 6] = ["2d", "dense", "shape", "init", "depth", "total"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.reproj_2d,
            self.dense,
            self.shape,
            self.init,
            self.depth,
            self.total,
        ]
    }
}

/// The full scene objective for fixed cues, previous states and weights.
#[derive(Debug, Clone)]
pub struct SceneObjective<'a> {
    pub model: &'a BodyModel,
    pub camera: &'a Intrinsics,
    pub cues: &'a [PersonCues],
    pub prev: &'a [PersonState],
    pub weights: LossWeights,
    prev_vertices: Vec<Vec<Vec3>>,
    root: usize,
}

impl<'a> SceneObjective<'a> {
    pub fn new(
        model: &'a BodyModel,
        camera: &'a Intrinsics,
        cues: &'a [PersonCues],
        prev: &'a [PersonState],
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        if cues.len() != prev.len() {
            return Err(Error::Dimension {
                what: "previous states",
                expected: cues.len(),
                got: prev.len(),
            });
        }
        for c in cues {
            c.keypoints.validate()?;
            c.dense.validate()?;
        }
        let prev_vertices = if weights.lambda_init_verts > 0.0 {
            prev.iter()
                .map(|p| model.pose(p).map(|x| x.vertices))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let root = model.kinematic_order()[0];
        Ok(Self {
            model,
            camera,
            cues,
            prev,
            weights,
            prev_vertices,
            root,
        })
    }

    fn root_depth(&self, vertices: &[Vec3]) -> f64 {
        self.model.joint_regressor().rows[self.root]
            .iter()
            .map(|&(v, w)| vertices[v].z * w)
            .sum()
    }

    fn reprojection_term(
        &self,
        posed: &Posed,
        which: KeypointSet,
        obs: &Observed2D,
        scale: f64,
        dverts: Option<&mut [Vec3]>,
    ) -> Result<f64> {
        let reg = self.model.regressor(which);
        let pts = reg.apply(&posed.vertices);
        let uv = self.camera.project(&pts)?;
        let eval = reprojection_loss(&uv, obs, self.weights.sigma)?;
        if let Some(dverts) = dverts {
            if scale != 0.0 {
                let g3: Vec<Vec3> = pts
                    .iter()
                    .zip(&eval.grad)
                    .map(|(p, g)| self.camera.project_vjp(p, [g[0] * scale, g[1] * scale]))
                    .collect();
                reg.transpose_accumulate(&g3, dverts);
            }
        }
        Ok(eval.value)
    }

    /// Loss breakdown and, if requested, the gradient for every person.
    pub fn evaluate(
        &self,
        states: &[PersonState],
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Vec<PersonState>>)> {
        let n = states.len();
        if n != self.cues.len() {
            return Err(Error::Dimension {
                what: "person states",
                expected: self.cues.len(),
                got: n,
            });
        }
        if n == 0 {
            return Err(Error::Config("scene has no persons".into()));
        }
        let w = &self.weights;
        let inv_n = 1.0 / n as f64;
        let mut out = LossBreakdown::default();
        let mut posed_all = Vec::with_capacity(n);
        let mut dverts_all = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        let mut root_z = Vec::with_capacity(n);
        for (i, state) in states.iter().enumerate() {
            let posed = self.model.pose(state)?;
            let cue = &self.cues[i];
            let mut grad = state.zeros_like();
            let mut dverts = vec![Vec3::zeros(); posed.vertices.len()];
            let sparse_grad = if with_grad {
                Some(dverts.as_mut_slice())
            } else {
                None
            };
            out.reproj_2d += self.reprojection_term(
                &posed,
                KeypointSet::Sparse,
                &cue.keypoints,
                w.lambda_2d * inv_n,
                sparse_grad,
            )? * inv_n;
            let dense_grad = if with_grad {
                Some(dverts.as_mut_slice())
            } else {
                None
            };
            out.dense += self.reprojection_term(
                &posed,
                KeypointSet::Dense,
                &cue.dense,
                w.lambda_dense * inv_n,
                dense_grad,
            )? * inv_n;
            let shape = shape_loss(&state.beta, &cue.shape)?;
            out.shape += shape.value * inv_n;
            for (g, s) in grad.beta.iter_mut().zip(&shape.grad) {
                *g += w.lambda_shape * inv_n * s;
            }
            let prev_v = self.prev_vertices.get(i).map(|v| v.as_slice());
            out.init += init_reg_accumulate(
                state,
                &self.prev[i],
                &posed.vertices,
                prev_v,
                w,
                inv_n,
                &mut grad,
                &mut dverts,
            ) * inv_n;
            root_z.push(self.root_depth(&posed.vertices));
            posed_all.push(posed);
            dverts_all.push(dverts);
            grads.push(grad);
        }
        let depth_cues: Vec<DepthCue> = self.cues.iter().map(|c| c.depth).collect();
        let depth = match w.depth_variant {
            DepthVariant::Ordering => depth_ordering_loss(&root_z, &depth_cues, w.depth_eps_rel)?,
            DepthVariant::AffineRd => affine_root_depth_loss(&root_z, &depth_cues, w.sigma_d)?.0,
        };
        out.depth = depth.value;
        out.total = w.lambda_2d * out.reproj_2d
            + w.lambda_dense * out.dense
            + w.lambda_shape * out.shape
            + out.init
            + w.lambda_depth * out.depth;
        if !out.total.is_finite() {
            return Err(Error::NonFinite {
                what: alloc::format!("objective value {}", out.total),
            });
        }
        if !with_grad {
            return Ok((out, None));
        }
        for i in 0..n {
            let gz = w.lambda_depth * depth.grad[i];
            if gz != 0.0 {
                for &(v, wt) in &self.model.joint_regressor().rows[self.root] {
                    dverts_all[i][v].z += gz * wt;
                }
            }
            self.model
                .backward(&posed_all[i], &dverts_all[i], &mut grads[i]);
        }
        Ok((out, Some(grads)))
    }
}
