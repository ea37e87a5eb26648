//! Synthetic ground-truth scenes and simulated expert cues.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods exist only with std
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, KeypointSet, PersonState};
use crate::camera::Intrinsics;
use crate::cues::{DepthCue, Detection, ExpertCues, Observed2D, PersonCues};
use crate::math::{arr3, exp_so3, log_so3, vec3, Mat3, Vec3};
use crate::semantic::AttributeCatalog;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPerson {
    pub state: PersonState,
    /// Attribute name to category label.
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub id: u64,
    pub seed: u64,
    pub camera: Intrinsics,
    pub persons: Vec<GroundTruthPerson>,
}

/// How shape coordinates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSampling {
    /// Every coordinate uniform in `[0,1]`.
    Uniform,
    /// Attribute-governed coordinates on a random anchor, the rest at 0.5.
    Anchored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub z_near: f64,
    pub z_far: f64,
    /// Every sparse keypoint projects at least this far inside the image.
    pub margin_px: f64,
    /// Minimum gap between the keypoint boxes of two persons.
    pub box_gap_px: f64,
    /// Attempts per person before giving up.
    pub max_retries: usize,
    /// Bound on every articulated pose coordinate, radians.
    pub pose_bound: f64,
    /// Bound on the rotation about the vertical axis, radians.
    pub yaw_bound: f64,
    pub beta_sampling: BetaSampling,
    /// One person per age class first when there are enough persons.
    pub age_stratified: bool,
    /// Relative margin of the depth-ordering loss the scenes are meant for.
    pub depth_eps: f64,
    /// Root-depth pair relations stay this far from the ordering margin and
    /// from the 0.2 m equality tolerance.
    pub depth_buffer: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            z_near: 1.5,
            z_far: 12.0,
            margin_px: 2.0,
            box_gap_px: 4.0,
            max_retries: 400,
            pose_bound: 0.3,
            yaw_bound: 0.6,
            beta_sampling: BetaSampling::Uniform,
            age_stratified: false,
            depth_eps: 0.2,
            depth_buffer: 0.05,
        }
    }
}

impl PlacementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_near > crate::camera::Z_MIN && self.z_far > self.z_near) {
            return Err(Error::Config("placement needs 0 < z_near < z_far".into()));
        }
        if !(self.margin_px >= 0.0 && self.box_gap_px >= 0.0 && self.depth_buffer >= 0.0) {
            return Err(Error::Config(
                "placement margins must be nonnegative".into(),
            ));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("placement needs at least one attempt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitNoise {
    pub tau: f64,
    pub phi: f64,
    pub beta: f64,
    pub theta: f64,
}

impl InitNoise {
    pub const ZERO: Self = Self {
        tau: 0.0,
        phi: 0.0,
        beta: 0.0,
        theta: 0.0,
    };
}

/// Scale confusion of the initialiser: the whole person is scaled about the
/// camera centre by `factor` (or its inverse when the stature range does not
/// allow it) with probability `prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScaleConfusion {
    pub factor: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kp_pixel_sigma: f64,
    pub kp_dropout_prob: f64,
    /// Confidence is `exp(-|noise| / confidence_scale_px)`.
    pub confidence_scale_px: f64,
    /// Sigma of the log of the multiplicative median-depth error.
    pub depth_mult_sigma: f64,
    /// Row-stochastic confusion per attribute, rows and columns in anchor
    /// order; attributes not listed are reported without error.
    #[serde(default)]
    pub confusion: BTreeMap<String, Vec<Vec<f64>>>,
    pub init: InitNoise,
    #[serde(default)]
    pub depth_scale_confusion: Option<DepthScaleConfusion>,
    pub detection_miss_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::zero()
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            kp_pixel_sigma: 0.0,
            kp_dropout_prob: 0.0,
            confidence_scale_px: 20.0,
            depth_mult_sigma: 0.0,
            confusion: BTreeMap::new(),
            init: InitNoise::ZERO,
            depth_scale_confusion: None,
            detection_miss_prob: 0.0,
        }
    }

    /// Moderate cue noise and an imprecise initialiser.
    pub fn noisy() -> Self {
        let mut confusion = BTreeMap::new();
        confusion.insert("age".into(), confusion_with_rate(6, 0.15));
        confusion.insert("gender".into(), confusion_with_rate(3, 0.1));
        confusion.insert("bodytype".into(), confusion_with_rate(4, 0.2));
        Self {
            kp_pixel_sigma: 3.0,
            kp_dropout_prob: 0.05,
            confidence_scale_px: 20.0,
            depth_mult_sigma: 0.05,
            confusion,
            init: InitNoise {
                tau: 0.15,
                phi: 0.1,
                beta: 0.1,
                theta: 0.05,
            },
            depth_scale_confusion: Some(DepthScaleConfusion {
                factor: 1.3,
                prob: 0.5,
            }),
            detection_miss_prob: 0.0,
        }
    }

    pub fn validate(&self, catalog: &AttributeCatalog) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.kp_dropout_prob) || !prob(self.detection_miss_prob) {
            return Err(Error::Config("probabilities must lie in [0,1]".into()));
        }
        let sigmas = [
            self.kp_pixel_sigma,
            self.depth_mult_sigma,
            self.init.tau,
            self.init.phi,
            self.init.beta,
            self.init.theta,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "noise scales must be finite and nonnegative".into(),
            ));
        }
        if !(self.confidence_scale_px > 0.0) {
            return Err(Error::Config("confidence scale must be positive".into()));
        }
        if let Some(c) = self.depth_scale_confusion {
            if !prob(c.prob) || !(c.factor > 0.0) {
                return Err(Error::Config(
                    "depth-scale confusion needs factor > 0, prob in [0,1]".into(),
                ));
            }
        }
        for (attr, m) in &self.confusion {
            let spec = catalog.attribute(attr).ok_or_else(|| {
                Error::Config(alloc::format!("confusion for unknown attribute {attr:?}"))
            })?;
            let k = spec.anchors.len();
            if m.len() != k || m.iter().any(|r| r.len() != k) {
                return Err(Error::Dimension {
                    what: "confusion matrix",
                    expected: k,
                    got: m.len(),
                });
            }
            for (i, row) in m.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !prob(*p)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(alloc::format!(
                        "confusion row {i} of {attr} is not stochastic"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Keeps the label with probability `1 - p`, otherwise picks one of the other
/// `n - 1` labels uniformly.
pub fn confusion_with_rate(n: usize, p: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (i == j, n) {
                    (true, 1) => 1.0,
                    (true, _) => 1.0 - p,
                    (false, _) => p / (n - 1) as f64,
                })
                .collect()
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Pinhole bounds `[x0, y0, x1, y1]` of points, clipped to the image.
pub fn bounding_box(camera: &Intrinsics, points: &[[f64; 2]]) -> [f64; 4] {
    let mut b = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for p in points {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    [
        b[0].clamp(0.0, camera.width),
        b[1].clamp(0.0, camera.height),
        b[2].clamp(0.0, camera.width),
        b[3].clamp(0.0, camera.height),
    ]
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median camera depth of the person's own vertices.
pub fn median_depth(vertices: &[Vec3]) -> f64 {
    let mut z: Vec<f64> = vertices.iter().map(|v| v.z).collect();
    median(&mut z)
}

fn sample_beta(
    catalog: &AttributeCatalog,
    shape_dim: usize,
    sampling: BetaSampling,
    age_class: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut beta: Vec<f64> = match sampling {
        BetaSampling::Uniform => (0..shape_dim).map(|_| rng.random::<f64>()).collect(),
        BetaSampling::Anchored => vec![0.5; shape_dim],
    };
    if sampling == BetaSampling::Anchored {
        for spec in &catalog.attributes {
            let a = &spec.anchors[rng.random_range(0..spec.anchors.len())];
            for (&d, &v) in spec.dims.iter().zip(&a.values) {
                beta[d] = v;
            }
        }
    }
    if let (Some(class), Some(age)) = (age_class, catalog.attribute("age")) {
        let values: Vec<f64> = age.anchors.iter().map(|a| a.values[0]).collect();
        let d = age.dims[0];
        beta[d] = match sampling {
            BetaSampling::Anchored => values[class],
            BetaSampling::Uniform => {
                // the interval whose nearest anchor is `class`
                let lo = if class == 0 {
                    0.0
                } else {
                    0.5 * (values[class - 1] + values[class])
                };
                let hi = if class + 1 == values.len() {
                    1.0
                } else {
                    0.5 * (values[class] + values[class + 1])
                };
                lo + (hi - lo) * (0.05 + 0.9 * rng.random::<f64>())
            }
        };
    }
    beta
}

/// Upright, facing the camera, turned by `yaw` about the body's vertical axis.
fn facing_camera(yaw: f64) -> Mat3 {
    exp_so3(&Vec3::new(core::f64::consts::PI, 0.0, 0.0)) * exp_so3(&Vec3::new(0.0, yaw, 0.0))
}

struct Placed {
    boxes: [f64; 4],
    root_z: f64,
    depth: f64,
}

fn pair_ok(a: &Placed, b: &Placed, config: &PlacementConfig) -> bool {
    let gap = config.box_gap_px;
    let apart = a.boxes[2] + gap <= b.boxes[0]
        || b.boxes[2] + gap <= a.boxes[0]
        || a.boxes[3] + gap <= b.boxes[1]
        || b.boxes[3] + gap <= a.boxes[1];
    if !apart {
        return false;
    }
    let buf = config.depth_buffer;
    let dz = (a.root_z - b.root_z).abs();
    if (dz - 0.2).abs() < buf {
        return false;
    }
    let m = config.depth_eps * a.depth.max(b.depth);
    let dd = (a.depth - b.depth).abs();
    if dd <= m {
        dd <= m - buf && dz <= m - buf
    } else {
        if dd < m + buf {
            return false;
        }
        let (near, far) = if a.depth < b.depth { (a, b) } else { (b, a) };
        far.root_z - near.root_z >= m + buf
    }
}

/// Draws a scene of `n_persons` non-overlapping, fully visible persons.
pub fn sample_scene(
    model: &BodyModel,
    catalog: &AttributeCatalog,
    camera: &Intrinsics,
    n_persons: usize,
    seed: u64,
    config: &PlacementConfig,
) -> Result<GroundTruthScene> {
    if n_persons == 0 {
        return Err(Error::Config("a scene needs at least one person".into()));
    }
    config.validate()?;
    camera.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model.config();
    let root = model.kinematic_order()[0];
    let n_age = catalog.attribute("age").map_or(0, |a| a.anchors.len());
    let stratify = config.age_stratified && n_age > 0 && n_persons >= n_age;
    let mut placed: Vec<Placed> = Vec::with_capacity(n_persons);
    let mut persons = Vec::with_capacity(n_persons);
    for i in 0..n_persons {
        let age_class = if stratify && i < n_age { Some(i) } else { None };
        let mut done = false;
        for _ in 0..config.max_retries {
            let mut s = PersonState::neutral(cfg);
            s.beta = sample_beta(
                catalog,
                cfg.shape_dim,
                config.beta_sampling,
                age_class,
                &mut rng,
            );
            for t in &mut s.theta {
                for x in t.iter_mut() {
                    *x = rng.random_range(-1.0..=1.0) * config.pose_bound;
                }
            }
            let rot = facing_camera(rng.random_range(-1.0..=1.0) * config.yaw_bound);
            s.phi = arr3(&log_so3(&rot));
            let z = rng.random_range(config.z_near..=config.z_far);
            let u = rng.random_range(0.0..=camera.width);
            let v = rng.random_range(0.0..=camera.height);
            // put the root joint on the sampled ray
            let target = Vec3::new(
                (u - camera.cx) * z / camera.fx,
                (v - camera.cy) * z / camera.fy,
                z,
            );
            let posed = model.pose(&s)?;
            let root_body = posed.world_trans[root];
            s.tau = arr3(&(target - rot * root_body));
            let mesh = model.synthesize(&s)?;
            if mesh.vertices.iter().any(|p| p.z <= config.z_near * 0.5) {
                continue;
            }
            let kps = model.regress_keypoints(&mesh, KeypointSet::Sparse)?;
            let Ok(uv) = camera.project(&kps) else {
                continue;
            };
            if !uv.iter().all(|p| camera.contains(*p, config.margin_px)) {
                continue;
            }
            let joints = model.regress_joints(&mesh)?;
            let candidate = Placed {
                boxes: bounding_box(camera, &uv),
                root_z: joints[root].z,
                depth: median_depth(&mesh.vertices),
            };
            if !placed.iter().all(|p| pair_ok(p, &candidate, config)) {
                continue;
            }
            placed.push(candidate);
            let labels = catalog.classify_beta(&s.beta);
            persons.push(GroundTruthPerson { state: s, labels });
            done = true;
            break;
        }
        if !done {
            return Err(Error::Placement(config.max_retries));
        }
    }
    Ok(GroundTruthScene {
        id: 0,
        seed,
        camera: *camera,
        persons,
    })
}

fn noisy_points(
    camera: &Intrinsics,
    points: &[Vec3],
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Observed2D> {
    let uv = camera.project(points)?;
    let mut out = Observed2D {
        points: Vec::with_capacity(uv.len()),
        confidences: Vec::with_capacity(uv.len()),
    };
    for p in uv {
        let e = [
            gauss(rng) * noise.kp_pixel_sigma,
            gauss(rng) * noise.kp_pixel_sigma,
        ];
        let dropped = rng.random::<f64>() < noise.kp_dropout_prob;
        let mag = (e[0] * e[0] + e[1] * e[1]).sqrt();
        out.points.push([p[0] + e[0], p[1] + e[1]]);
        out.confidences.push(if dropped {
            0.0
        } else {
            (-mag / noise.confidence_scale_px).exp().clamp(0.0, 1.0)
        });
    }
    Ok(out)
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // round-off at the top end: last class with mass
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Passes ground-truth labels through the configured confusion matrices.
pub fn confuse_labels(
    catalog: &AttributeCatalog,
    labels: &BTreeMap<String, String>,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (attr, label) in labels {
        let predicted = match (noise.confusion.get(attr), catalog.attribute(attr)) {
            (Some(m), Some(spec)) => match spec.anchors.iter().position(|a| &a.label == label) {
                Some(row) => spec.anchors[sample_row(&m[row], rng)].label.clone(),
                None => label.clone(),
            },
            _ => label.clone(),
        };
        out.insert(attr.clone(), predicted);
    }
    out
}

/// Simulated expert observations of every person in the scene.
pub fn derive_cues(
    model: &BodyModel,
    catalog: &AttributeCatalog,
    scene: &GroundTruthScene,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<ExpertCues> {
    noise.validate(catalog)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = &scene.camera;
    let mut persons = Vec::with_capacity(scene.persons.len());
    for p in &scene.persons {
        let mesh = model.synthesize(&p.state)?;
        let sparse = model.regress_keypoints(&mesh, KeypointSet::Sparse)?;
        let dense = model.regress_keypoints(&mesh, KeypointSet::Dense)?;
        let keypoints = noisy_points(camera, &sparse, noise, &mut rng)?;
        let dense = noisy_points(camera, &dense, noise, &mut rng)?;
        let mult = (gauss(&mut rng) * noise.depth_mult_sigma).exp();
        let depth = DepthCue {
            depth: median_depth(&mesh.vertices) * mult,
            valid: true,
        };
        let labels = confuse_labels(catalog, &p.labels, noise, &mut rng);
        let (shape, _) = catalog.build_estimate(&labels);
        let uv = camera.project(&mesh.vertices)?;
        let present = rng.random::<f64>() >= noise.detection_miss_prob;
        persons.push(PersonCues {
            keypoints,
            dense,
            shape,
            depth,
            detection: Detection {
                bbox: bounding_box(camera, &uv),
                present,
            },
        });
    }
    Ok(ExpertCues { persons })
}

/// Scales a person about the camera centre by roughly `factor`: translation
/// times `factor`, age moved so that stature scales by the same amount. Tries
/// `1 / factor` when `factor` is out of the stature range; `None` when
/// neither fits.
pub fn depth_scale_confuse(
    model: &BodyModel,
    state: &PersonState,
    factor: f64,
) -> Option<(PersonState, f64)> {
    let curve = model.stature();
    let age_dim = model.data().age_dim;
    let knots = &curve.knots;
    // the increasing branch of the curve
    let top = knots
        .iter()
        .enumerate()
        .max_by(|a, b| {
            a.1[1]
                .partial_cmp(&b.1[1])
                .unwrap_or(core::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)?;
    let (lo, hi) = (knots[0][0], knots[top][0]);
    let current = curve.value(state.beta[age_dim]);
    for s in [factor, 1.0 / factor] {
        if let Some(age) = curve.inverse(current * s, lo, hi) {
            let mut out = state.clone();
            out.beta[age_dim] = age;
            out.tau = arr3(&(vec3(state.tau) * s));
            return Some((out, s));
        }
    }
    None
}

/// Initial states: ground truth with per-block Gaussian perturbations and,
/// if configured, depth-scale confusion.
pub fn perturb_init(
    model: &BodyModel,
    scene: &GroundTruthScene,
    noise: &NoiseConfig,
    seed: u64,
) -> Vec<PersonState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = &noise.init;
    scene
        .persons
        .iter()
        .map(|p| {
            let mut s = p.state.clone();
            if let Some(c) = noise.depth_scale_confusion {
                if rng.random::<f64>() < c.prob {
                    if let Some((scaled, _)) = depth_scale_confuse(model, &s, c.factor) {
                        s = scaled;
                    }
                }
            }
            for t in &mut s.tau {
                *t += gauss(&mut rng) * n.tau;
            }
            let dphi = Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * n.phi;
            if n.phi > 0.0 {
                s.phi = arr3(&log_so3(&(exp_so3(&dphi) * exp_so3(&vec3(s.phi)))));
            }
            for b in &mut s.beta {
                *b += gauss(&mut rng) * n.beta;
            }
            s.clamp_beta();
            for t in &mut s.theta {
                for x in t.iter_mut() {
                    *x += gauss(&mut rng) * n.theta;
                }
            }
            s
        })
        .collect()
}

/// Assignment of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    /// Index of the assigned prediction; `None` only without predictions.
    pub pred: Option<usize>,
    /// Assigned by the fallback rather than mutual best matching.
    pub recovered: bool,
    /// The prediction was already taken by another detection.
    pub reused: bool,
}

fn box_centre(b: &[f64; 4]) -> [f64; 2] {
    [0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn argmin(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual-nearest matching of predicted nose points to detection boxes (box
/// centres), then closest-remaining assignment for the rest. Ties go to the
/// lower index.
pub fn match_detections(pred_noses: &[[f64; 2]], boxes: &[[f64; 4]]) -> Vec<Match> {
    let centres: Vec<[f64; 2]> = boxes.iter().map(box_centre).collect();
    let mut out = vec![
        Match {
            pred: None,
            recovered: false,
            reused: false
        };
        boxes.len()
    ];
    if pred_noses.is_empty() {
        return out;
    }
    let mut taken = vec![false; pred_noses.len()];
    for (b, c) in centres.iter().enumerate() {
        let Some(p) = argmin(pred_noses.iter().map(|n| dist(*n, *c))) else {
            continue;
        };
        let back = argmin(centres.iter().map(|c2| dist(pred_noses[p], *c2)));
        if back == Some(b) {
            out[b].pred = Some(p);
            taken[p] = true;
        }
    }
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (b, c) in centres.iter().enumerate() {
            if out[b].pred.is_some() {
                continue;
            }
            for (p, n) in pred_noses.iter().enumerate() {
                if taken[p] {
                    continue;
                }
                let d = dist(*n, *c);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, b, p));
                }
            }
        }
        let Some((_, b, p)) = best else { break };
        out[b] = Match {
            pred: Some(p),
            recovered: true,
            reused: false,
        };
        taken[p] = true;
    }
    for (b, c) in centres.iter().enumerate() {
        if out[b].pred.is_none() {
            out[b] = Match {
                pred: argmin(pred_noses.iter().map(|n| dist(*n, *c))),
                recovered: true,
                reused: true,
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossWeights, SceneObjective};

    fn setup() -> (BodyModel, AttributeCatalog, Intrinsics) {
        (
            BodyModel::default_humanoid(),
            AttributeCatalog::default(),
            Intrinsics::default(),
        )
    }

    #[test]
    fn deterministic_per_seed() {
        let (m, c, k) = setup();
        let a = sample_scene(&m, &c, &k, 1, 42, &PlacementConfig::default()).unwrap();
        let b = sample_scene(&m, &c, &k, 1, 42, &PlacementConfig::default()).unwrap();
        assert_eq!(a, b);
        let d = sample_scene(&m, &c, &k, 1, 43, &PlacementConfig::default()).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn five_persons_in_image() {
        let (m, c, k) = setup();
        let s = sample_scene(&m, &c, &k, 5, 7, &PlacementConfig::default()).unwrap();
        assert_eq!(s.persons.len(), 5);
        let root = m.kinematic_order()[0];
        for p in &s.persons {
            let j = m.regress_joints(&m.synthesize(&p.state).unwrap()).unwrap();
            assert!(k.contains(k.project_point(&j[root], 0).unwrap(), 0.0));
            assert!((1.5..=12.0).contains(&j[root].z));
        }
    }

    #[test]
    fn stratified_covers_every_age_class() {
        let (m, c, k) = setup();
        let cfg = PlacementConfig {
            age_stratified: true,
            ..PlacementConfig::default()
        };
        let s = sample_scene(&m, &c, &k, 6, 3, &cfg).unwrap();
        let ages: Vec<&str> = s.persons.iter().map(|p| p.labels["age"].as_str()).collect();
        for l in crate::semantic::AGE_LABELS {
            assert!(ages.contains(&l), "{ages:?}");
        }
    }

    #[test]
    fn zero_noise_cues_are_consistent() {
        let (m, c, k) = setup();
        let cfg = PlacementConfig {
            beta_sampling: BetaSampling::Anchored,
            ..PlacementConfig::default()
        };
        let scene = sample_scene(&m, &c, &k, 3, 9, &cfg).unwrap();
        let cues = derive_cues(&m, &c, &scene, &NoiseConfig::zero(), 1).unwrap();
        let states: Vec<PersonState> = scene.persons.iter().map(|p| p.state.clone()).collect();
        let w = LossWeights {
            lambda_depth: 50.0,
            lambda_init_beta: 1.0,
            ..LossWeights::default()
        };
        let obj = SceneObjective::new(&m, &k, &cues.persons, &states, w).unwrap();
        let (loss, _) = obj.evaluate(&states, false).unwrap();
        assert!(loss.total.abs() < 1e-9, "{loss:?}");
        assert!(cues
            .persons
            .iter()
            .all(|p| p.keypoints.confidences.iter().all(|c| *c == 1.0)));
    }

    #[test]
    fn full_dropout_zeroes_confidences() {
        let (m, c, k) = setup();
        let scene = sample_scene(&m, &c, &k, 2, 5, &PlacementConfig::default()).unwrap();
        let noise = NoiseConfig {
            kp_dropout_prob: 1.0,
            kp_pixel_sigma: 4.0,
            ..NoiseConfig::zero()
        };
        let cues = derive_cues(&m, &c, &scene, &noise, 2).unwrap();
        for p in &cues.persons {
            assert!(p.keypoints.confidences.iter().all(|c| *c == 0.0));
            assert!(p.dense.confidences.iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn identity_confusion_maps_gt_labels() {
        let (m, c, k) = setup();
        let scene = sample_scene(&m, &c, &k, 3, 11, &PlacementConfig::default()).unwrap();
        let mut noise = NoiseConfig::zero();
        noise
            .confusion
            .insert("age".into(), confusion_with_rate(6, 0.0));
        let cues = derive_cues(&m, &c, &scene, &noise, 4).unwrap();
        for (p, cue) in scene.persons.iter().zip(&cues.persons) {
            assert_eq!(cue.shape, c.build_estimate(&p.labels).0);
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let (m, c, k) = setup();
        let scene = sample_scene(&m, &c, &k, 2, 13, &PlacementConfig::default()).unwrap();
        let init = perturb_init(&m, &scene, &NoiseConfig::zero(), 1);
        for (a, p) in init.iter().zip(&scene.persons) {
            assert_eq!(a.beta, p.state.beta);
            assert_eq!(a.tau, p.state.tau);
            assert_eq!(a.theta, p.state.theta);
            assert_eq!(a.phi, p.state.phi);
        }
        let noisy = NoiseConfig::noisy();
        assert_ne!(
            perturb_init(&m, &scene, &noisy, 1),
            perturb_init(&m, &scene, &noisy, 2)
        );
    }

    #[test]
    fn confusion_rows_are_stochastic() {
        for n in 1..7 {
            for row in confusion_with_rate(n, 0.3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mut noise = NoiseConfig::zero();
        noise.confusion.insert("age".into(), vec![vec![0.5; 6]; 6]);
        assert!(noise.validate(&AttributeCatalog::default()).is_err());
    }

    #[test]
    fn identical_points_match_identity() {
        let pts = [[10.0, 20.0], [200.0, 40.0], [90.0, 300.0]];
        let boxes: Vec<[f64; 4]> = pts.iter().map(|p| [p[0], p[1], p[0], p[1]]).collect();
        let m = match_detections(&pts, &boxes);
        for (i, a) in m.iter().enumerate() {
            assert_eq!(a.pred, Some(i));
            assert!(!a.recovered);
        }
    }

    #[test]
    fn extra_box_is_recovered() {
        let preds = [[0.0, 0.0], [100.0, 0.0]];
        let boxes = [
            [0.0, 0.0, 2.0, 2.0],
            [99.0, 0.0, 101.0, 2.0],
            [60.0, 0.0, 62.0, 2.0],
        ];
        let m = match_detections(&preds, &boxes);
        assert_eq!(m[0].pred, Some(0));
        assert_eq!(m[1].pred, Some(1));
        assert_eq!(m[2].pred, Some(1));
        assert!(m[2].recovered && m[2].reused);
        assert!(!m[0].recovered && !m[1].recovered);
    }
}
