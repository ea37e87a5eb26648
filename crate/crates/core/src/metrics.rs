//! 2D, depth-relation, 3D, attribute and detection metrics, per scene and
//! pooled over a suite.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods exist only with std
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::body_model::{keypoints, BodyModel, KeypointSet, PersonState};
use crate::cues::ExpertCues;
use crate::math::{Mat3, Vec3};
use crate::semantic::{AttributeCatalog, AGE_LABELS, GENDER_LABELS};
use crate::synth::{bounding_box, match_detections, GroundTruthScene};
use crate::{Error, Result};

pub const MPCKH_THRESHOLD: f64 = 0.6;
pub const PCDR_DELTA: f64 = 0.2;
pub const PCK3D_THRESHOLD: f64 = 0.15;
pub const DETECTION_IOU: f64 = 0.5;
/// Label recorded for a ground-truth person without a matched prediction.
pub const MISSED: &str = "missed";

/// Fraction-style tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub hits: u64,
    pub total: u64,
}

impl Count {
    pub fn add(&mut self, other: Count) {
        self.hits += other.hits;
        self.total += other.total;
    }

    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.hits as f64 / self.total as f64)
    }
}

/// Percentage of keypoints within `thr` head lengths, averaged over persons.
/// `pred[i] = None` marks an unmatched person (all keypoints wrong); persons
/// with a non-positive head length are skipped. `None` when no person counts.
pub fn mpckh(
    pred: &[Option<&[[f64; 2]]>],
    gt: &[&[[f64; 2]]],
    head_lengths: &[f64],
    thr: f64,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut persons = 0usize;
    for (i, g) in gt.iter().enumerate() {
        let h = head_lengths[i];
        if !(h > 0.0) {
            log::warn!("person {i} has zero head length; excluded from mPCKh");
            continue;
        }
        persons += 1;
        let Some(p) = pred[i] else { continue };
        if g.is_empty() {
            continue;
        }
        let hits = p
            .iter()
            .zip(g.iter())
            .filter(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() < thr * h)
            .count();
        sum += 100.0 * hits as f64 / g.len() as f64;
    }
    (persons > 0).then(|| sum / persons as f64)
}

/// Pairwise depth relation: -1 nearer, 0 equal, +1 farther.
fn relation(za: f64, zb: f64, delta: f64) -> i8 {
    let d = zb - za;
    if d.abs() <= delta {
        0
    } else if d > 0.0 {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcdrCounts {
    pub overall: Count,
    /// Pairs containing at least one member of each class.
    pub per_class: Vec<Count>,
}

impl PcdrCounts {
    pub fn new(n_classes: usize) -> Self {
        Self {
            overall: Count::default(),
            per_class: vec![Count::default(); n_classes],
        }
    }

    pub fn add(&mut self, other: &PcdrCounts) {
        self.overall.add(other.overall);
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(*b);
        }
    }
}

/// Correct depth relations over unordered person pairs. `pred_z[i] = None`
/// marks an unmatched person whose pairs are all wrong. `classes[i]` is the
/// age class of person `i`.
pub fn pcdr(
    pred_z: &[Option<f64>],
    gt_z: &[f64],
    delta: f64,
    classes: &[usize],
    n_classes: usize,
) -> PcdrCounts {
    let mut out = PcdrCounts::new(n_classes);
    let n = gt_z.len();
    for i in 0..n {
        for j in i + 1..n {
            let correct = match (pred_z[i], pred_z[j]) {
                (Some(a), Some(b)) => relation(a, b, delta) == relation(gt_z[i], gt_z[j], delta),
                _ => false,
            };
            let c = Count {
                hits: correct as u64,
                total: 1,
            };
            out.overall.add(c);
            out.per_class[classes[i]].add(c);
            if classes[j] != classes[i] {
                out.per_class[classes[j]].add(c);
            }
        }
    }
    out
}

/// Mean joint error in millimetres after moving both roots to the origin.
pub fn mpjpe_root(pred: &[Vec3], gt: &[Vec3], root: usize) -> f64 {
    let (pr, gr) = (pred[root], gt[root]);
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p - pr) - (g - gr)).norm())
        .sum();
    1000.0 * sum / gt.len().max(1) as f64
}

/// Similarity `(s, R, t)` minimising `sum |s R x_i + t - y_i|^2`.
pub fn similarity_procrustes(x: &[Vec3], y: &[Vec3]) -> Result<(f64, Mat3, Vec3)> {
    let n = x.len();
    if n <= 2 || y.len() != n {
        return Err(Error::Degenerate(alloc::format!(
            "similarity alignment over {n} points"
        )));
    }
    let mx = x.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let my = y.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let mut cov = Mat3::zeros();
    let mut var = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
        var += (a - mx).norm_squared();
    }
    if !(var > 0.0) {
        return Err(Error::Degenerate("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        d[svd.singular_values.imin()] = -1.0;
    }
    let r = u * Mat3::from_diagonal(&d) * vt;
    let s = svd.singular_values.dot(&d) / var;
    let t = my - r * mx * s;
    Ok((s, r, t))
}

/// Mean joint error in millimetres after one similarity transform fitted to
/// all persons' joints at once.
pub fn mpjpe_joint_pa(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let (s, r, t) = similarity_procrustes(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (r * p * s + t - g).norm())
        .sum();
    Ok(1000.0 * sum / gt.len() as f64)
}

/// Joints within `thr` meters in the camera frame; unmatched persons count
/// all their joints as wrong.
pub fn pck3d(pred: &[Option<&[Vec3]>], gt: &[&[Vec3]], thr: f64) -> Count {
    let mut c = Count::default();
    for (p, g) in pred.iter().zip(gt) {
        c.total += g.len() as u64;
        if let Some(p) = p {
            c.hits += p
                .iter()
                .zip(g.iter())
                .filter(|(a, b)| (*a - *b).norm() < thr)
                .count() as u64;
        }
    }
    c
}

/// Confusion counts: rows are ground-truth classes, columns predicted
/// classes followed by a final "missed" column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: &[&str]) -> Self {
        let k = classes.len();
        Self {
            classes: classes.iter().map(|c| String::from(*c)).collect(),
            counts: vec![vec![0; k + 1]; k],
        }
    }

    /// Records one person; `pred = None` is a miss. Labels outside the class
    /// list are ignored on the ground-truth side and count as misses on the
    /// predicted side.
    pub fn record(&mut self, gt: &str, pred: Option<&str>) {
        let k = self.classes.len();
        let Some(row) = self.classes.iter().position(|c| c == gt) else {
            return;
        };
        let col = pred
            .and_then(|p| self.classes.iter().position(|c| c == p))
            .unwrap_or(k);
        self.counts[row][col] += 1;
    }

    pub fn add(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Per-class F1 (0 when precision + recall is 0) and its macro average
    /// over classes present in the ground truth.
    pub fn f1(&self) -> (Vec<Option<f64>>, Option<f64>) {
        let k = self.classes.len();
        let mut per = vec![None; k];
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..k {
            let support: u64 = self.counts[c].iter().sum();
            if support == 0 {
                continue;
            }
            let tp = self.counts[c][c] as f64;
            let predicted: u64 = (0..k).map(|r| self.counts[r][c]).sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = tp / support as f64;
            let f = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per[c] = Some(f);
            sum += f;
            present += 1;
        }
        (per, (present > 0).then(|| sum / present as f64))
    }
}

/// Macro F1 and confusion of aligned label lists (`None` is a miss).
pub fn attribute_f1(
    pred: &[Option<&str>],
    gt: &[&str],
    classes: &[&str],
) -> (Option<f64>, Confusion) {
    let mut conf = Confusion::new(classes);
    for (p, g) in pred.iter().zip(gt) {
        conf.record(g, *p);
    }
    (conf.f1().1, conf)
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl DetectionCounts {
    pub fn add(&mut self, o: DetectionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// `2 tp / (2 tp + fp + fn)`; 1 when there is nothing to detect and
    /// nothing detected.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }
}

/// Greedy matching in descending confidence order (index order on ties or
/// without confidences), each prediction taking the unmatched ground-truth
/// box of highest IoU at or above `thr`.
pub fn detection_f1(
    pred: &[[f64; 4]],
    gt: &[[f64; 4]],
    confidences: Option<&[f64]>,
    thr: f64,
) -> DetectionCounts {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    if let Some(c) = confidences {
        order.sort_by(|&a, &b| {
            c[b].partial_cmp(&c[a])
                .unwrap_or(core::cmp::Ordering::Equal)
        });
    }
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gt.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&pred[p], b);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
    }
    DetectionCounts {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
    }
}

/// Nearest-rank percentile of sorted data: the value at rank
/// `ceil(p / 100 * n)`, at least 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Indices of the errors lying between the `lo` and `hi` nearest-rank
/// percentiles, inclusive.
pub fn percentile_filter(errors: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    if errors.is_empty() {
        return Vec::new();
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let (a, b) = (nearest_rank(&sorted, lo), nearest_rank(&sorted, hi));
    (0..errors.len())
        .filter(|&i| errors[i] >= a && errors[i] <= b)
        .collect()
}

/// Raw per-scene tallies; pooled with [`SceneMetrics::add`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    /// Per-scene mPCKh, `None` without countable persons.
    pub mpckh: Option<f64>,
    pub pcdr: PcdrCounts,
    /// Per matched person, millimetres.
    pub mpjpe_root: Vec<f64>,
    pub mpjpe_joint_pa: Option<f64>,
    pub pck3d: Count,
    pub age: Confusion,
    pub gender: Confusion,
    pub detection: DetectionCounts,
    pub persons: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenes: usize,
    pub persons: usize,
    pub matched: usize,
    pub mpckh: Option<f64>,
    pub pcdr_overall: Option<f64>,
    /// Keyed by age label.
    pub pcdr_per_age_class: BTreeMap<String, Option<f64>>,
    pub pcdr_pairs: u64,
    pub mpjpe_root: Option<f64>,
    pub mpjpe_joint_pa: Option<f64>,
    pub pck3d_15cm: Option<f64>,
    pub age_f1: Option<f64>,
    pub gender_f1: Option<f64>,
    pub detection_f1: f64,
    pub age_confusion: Confusion,
    pub gender_confusion: Confusion,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Pools scene tallies: mPCKh and joint-PA averaged over scenes, MPJPE over
/// matched persons, counting metrics over their pooled counts.
pub fn aggregate(scenes: &[SceneMetrics]) -> MetricReport {
    let mut pcdr = PcdrCounts::new(AGE_LABELS.len());
    let mut pck = Count::default();
    let mut age = Confusion::new(&AGE_LABELS);
    let mut gender = Confusion::new(&GENDER_LABELS);
    let mut det = DetectionCounts::default();
    for s in scenes {
        pcdr.add(&s.pcdr);
        pck.add(s.pck3d);
        age.add(&s.age);
        gender.add(&s.gender);
        det.add(s.detection);
    }
    MetricReport {
        scenes: scenes.len(),
        persons: scenes.iter().map(|s| s.persons).sum(),
        matched: scenes.iter().map(|s| s.matched).sum(),
        mpckh: mean(scenes.iter().filter_map(|s| s.mpckh)),
        pcdr_overall: pcdr.overall.percent(),
        pcdr_per_age_class: AGE_LABELS
            .iter()
            .zip(&pcdr.per_class)
            .map(|(l, c)| (String::from(*l), c.percent()))
            .collect(),
        pcdr_pairs: pcdr.overall.total,
        mpjpe_root: mean(scenes.iter().flat_map(|s| s.mpjpe_root.iter().copied())),
        mpjpe_joint_pa: mean(scenes.iter().filter_map(|s| s.mpjpe_joint_pa)),
        pck3d_15cm: pck.percent(),
        age_f1: age.f1().1,
        gender_f1: gender.f1().1,
        detection_f1: det.f1(),
        age_confusion: age,
        gender_confusion: gender,
    }
}

struct PersonView {
    kps: Vec<[f64; 2]>,
    joints: Vec<Vec3>,
    nose: [f64; 2],
    bbox: [f64; 4],
    labels: BTreeMap<String, String>,
}

fn view(
    model: &BodyModel,
    catalog: &AttributeCatalog,
    scene: &GroundTruthScene,
    s: &PersonState,
) -> Result<PersonView> {
    let mesh = model.synthesize(s)?;
    let kps = scene
        .camera
        .project(&model.regress_keypoints(&mesh, KeypointSet::Sparse)?)?;
    let uv = scene.camera.project(&mesh.vertices)?;
    Ok(PersonView {
        nose: kps[keypoints::NOSE],
        joints: model.regress_joints(&mesh)?,
        bbox: bounding_box(&scene.camera, &uv),
        labels: catalog.classify_beta(&s.beta),
        kps,
    })
}

/// Evaluates predicted states against the ground truth of one scene.
/// Predictions whose detection cue is missing are dropped; the rest are
/// matched to ground-truth persons by nose distance.
pub fn evaluate_scene(
    model: &BodyModel,
    catalog: &AttributeCatalog,
    scene: &GroundTruthScene,
    cues: Option<&ExpertCues>,
    pred: &[PersonState],
) -> Result<SceneMetrics> {
    let root = model.kinematic_order()[0];
    let gt: Vec<PersonView> = scene
        .persons
        .iter()
        .map(|p| {
            let mut v = view(model, catalog, scene, &p.state)?;
            v.labels = p.labels.clone();
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let mut preds = Vec::new();
    for (i, s) in pred.iter().enumerate() {
        let present = cues.is_none_or(|c| c.persons.get(i).is_none_or(|p| p.detection.present));
        if present {
            preds.push(view(model, catalog, scene, s)?);
        }
    }
    let noses: Vec<[f64; 2]> = preds.iter().map(|p| p.nose).collect();
    let gt_points: Vec<[f64; 4]> = gt
        .iter()
        .map(|g| [g.nose[0], g.nose[1], g.nose[0], g.nose[1]])
        .collect();
    let assignment: Vec<Option<usize>> = match_detections(&noses, &gt_points)
        .iter()
        .map(|m| if m.reused { None } else { m.pred })
        .collect();
    let matched: Vec<Option<&PersonView>> =
        assignment.iter().map(|a| a.map(|p| &preds[p])).collect();

    let head: Vec<f64> = gt
        .iter()
        .map(|g| {
            let (a, b) = (g.kps[keypoints::HEAD_TOP], g.kps[keypoints::NECK]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .collect();
    let gt_kps: Vec<&[[f64; 2]]> = gt.iter().map(|g| g.kps.as_slice()).collect();
    let pred_kps: Vec<Option<&[[f64; 2]]>> = matched
        .iter()
        .map(|m| m.map(|p| p.kps.as_slice()))
        .collect();
    let mpckh_v = mpckh(&pred_kps, &gt_kps, &head, MPCKH_THRESHOLD);

    let age_index = |l: &str| AGE_LABELS.iter().position(|a| *a == l).unwrap_or(0);
    let classes: Vec<usize> = gt
        .iter()
        .map(|g| age_index(g.labels.get("age").map_or("", |s| s)))
        .collect();
    let gt_z: Vec<f64> = gt.iter().map(|g| g.joints[root].z).collect();
    let pred_z: Vec<Option<f64>> = matched
        .iter()
        .map(|m| m.map(|p| p.joints[root].z))
        .collect();
    let pcdr_v = pcdr(&pred_z, &gt_z, PCDR_DELTA, &classes, AGE_LABELS.len());

    let mut root_errs = Vec::new();
    let (mut pa_pred, mut pa_gt) = (Vec::new(), Vec::new());
    for (m, g) in matched.iter().zip(&gt) {
        if let Some(p) = m {
            root_errs.push(mpjpe_root(&p.joints, &g.joints, root));
            pa_pred.extend_from_slice(&p.joints);
            pa_gt.extend_from_slice(&g.joints);
        }
    }
    let pa = if pa_pred.len() > 2 {
        Some(mpjpe_joint_pa(&pa_pred, &pa_gt)?)
    } else {
        None
    };
    let gt_joints: Vec<&[Vec3]> = gt.iter().map(|g| g.joints.as_slice()).collect();
    let pred_joints: Vec<Option<&[Vec3]>> = matched
        .iter()
        .map(|m| m.map(|p| p.joints.as_slice()))
        .collect();
    let pck = pck3d(&pred_joints, &gt_joints, PCK3D_THRESHOLD);

    let mut age = Confusion::new(&AGE_LABELS);
    let mut gender = Confusion::new(&GENDER_LABELS);
    for (m, g) in matched.iter().zip(&gt) {
        let label = |v: &PersonView, a: &str| v.labels.get(a).cloned();
        if let Some(l) = g.labels.get("age") {
            age.record(l, m.and_then(|p| label(p, "age")).as_deref());
        }
        if let Some(l) = g.labels.get("gender") {
            gender.record(l, m.and_then(|p| label(p, "gender")).as_deref());
        }
    }
    let pred_boxes: Vec<[f64; 4]> = preds.iter().map(|p| p.bbox).collect();
    let gt_boxes: Vec<[f64; 4]> = gt.iter().map(|g| g.bbox).collect();
    let detection = detection_f1(&pred_boxes, &gt_boxes, None, DETECTION_IOU);

    Ok(SceneMetrics {
        mpckh: mpckh_v,
        pcdr: pcdr_v,
        mpjpe_root: root_errs,
        mpjpe_joint_pa: pa,
        pck3d: pck,
        age,
        gender,
        detection,
        persons: gt.len(),
        matched: assignment.iter().filter(|a| a.is_some()).count(),
    })
}
