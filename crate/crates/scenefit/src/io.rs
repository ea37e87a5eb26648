//! Versioned JSON files and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use scenefit_core::metrics::{Confusion, MetricReport, MISSED};
use scenefit_core::refit::RefitReport;
use scenefit_core::synth::{GroundTruthPerson, GroundTruthScene};
use scenefit_core::{
    BodyModel, ExpertCues, FitConfig, Intrinsics, LossBreakdown, PersonCues, PersonState,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}: invalid input at {at}: {message}")]
    Parse {
        file: String,
        at: String,
        message: String,
    },
    #[error("{file}: unsupported format version {found:?} (expected {expected:?})")]
    Version {
        file: String,
        found: String,
        expected: &'static str,
    },
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type IoResult<T> = Result<T, IoError>;

fn json_path(path: &serde_path_to_error::Path, message: &str) -> String {
    let mut at = String::from("$");
    let p = path.to_string();
    if p != "." {
        if !p.starts_with('[') {
            at.push('.');
        }
        at.push_str(&p);
    }
    // serde reports a missing field at its parent
    if let Some(field) = message
        .strip_prefix("missing field `")
        .and_then(|r| r.split('`').next())
    {
        at.push('.');
        at.push_str(field);
    }
    at
}

/// Parses `text`, reporting failures with a `$.a.b[2]` style location.
pub fn parse_json<T: DeserializeOwned>(text: &str, file: &str) -> IoResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let message = e.inner().to_string();
        IoError::Parse {
            file: file.into(),
            at: json_path(e.path(), &message),
            message,
        }
    })
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<serde_json::Value>,
}

/// Like [`parse_json`] but first checks the top-level `version` field.
pub fn parse_versioned<T: DeserializeOwned>(text: &str, file: &str) -> IoResult<T> {
    if let Ok(VersionProbe { version: Some(v) }) = serde_json::from_str::<VersionProbe>(text) {
        if v.as_str() != Some(FORMAT_VERSION) {
            return Err(IoError::Version {
                file: file.into(),
                found: v.as_str().map_or_else(|| v.to_string(), String::from),
                expected: FORMAT_VERSION,
            });
        }
    }
    parse_json(text, file)
}

pub fn read_text(path: &Path) -> IoResult<String> {
    fs::read_to_string(path).map_err(|source| IoError::Fs {
        path: path.into(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> IoResult<T> {
    parse_json(&read_text(path)?, &path.display().to_string())
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> IoResult<T> {
    parse_versioned(&read_text(path)?, &path.display().to_string())
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let fs_err = |source| IoError::Fs {
        path: path.into(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(fs_err)?;
    fs::rename(&tmp, path).map_err(fs_err)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> IoResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<GroundTruthPerson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cues: Option<PersonCues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PersonState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub seed: u64,
    pub persons: Vec<PersonRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: String,
    pub camera: Intrinsics,
    pub scenes: Vec<SceneRecord>,
}

impl SceneRecord {
    /// Ground truth when every person carries it.
    pub fn ground_truth(&self, camera: &Intrinsics) -> Option<GroundTruthScene> {
        let persons = self
            .persons
            .iter()
            .map(|p| p.gt.clone())
            .collect::<Option<Vec<_>>>()?;
        Some(GroundTruthScene {
            id: self.id,
            seed: self.seed,
            camera: *camera,
            persons,
        })
    }

    pub fn cues(&self) -> Option<ExpertCues> {
        let persons = self
            .persons
            .iter()
            .map(|p| p.cues.clone())
            .collect::<Option<Vec<_>>>()?;
        Some(ExpertCues { persons })
    }

    pub fn inits(&self) -> Option<Vec<PersonState>> {
        self.persons.iter().map(|p| p.init.clone()).collect()
    }
}

impl SceneFile {
    /// Checks dimensions against the model and that scene ids are unique.
    pub fn validate(&self, model: &BodyModel, file: &str) -> IoResult<()> {
        let invalid = |message: String| IoError::Invalid {
            file: file.into(),
            message,
        };
        self.camera
            .validate()
            .map_err(|e| invalid(format!("$.camera: {e}")))?;
        let cfg = model.config();
        let mut ids = std::collections::BTreeSet::new();
        for (i, s) in self.scenes.iter().enumerate() {
            if !ids.insert(s.id) {
                return Err(invalid(format!(
                    "$.scenes[{i}].id: duplicate scene id {}",
                    s.id
                )));
            }
            for (k, p) in s.persons.iter().enumerate() {
                let at = format!("$.scenes[{i}].persons[{k}]");
                let states =
                    p.gt.as_ref()
                        .map(|g| ("gt.state", &g.state))
                        .into_iter()
                        .chain(p.init.as_ref().map(|s| ("init", s)));
                for (what, st) in states {
                    st.validate(cfg)
                        .map_err(|e| invalid(format!("{at}.{what}: {e}")))?;
                }
                if let Some(c) = &p.cues {
                    let checks = [
                        ("keypoints", c.keypoints.points.len(), cfg.sparse_kp_count),
                        ("dense", c.dense.points.len(), cfg.dense_kp_count),
                        ("shape", c.shape.values.len(), cfg.shape_dim),
                    ];
                    for (what, got, expected) in checks {
                        if got != expected {
                            return Err(invalid(format!(
                                "{at}.cues.{what}: expected {expected} entries, got {got}"
                            )));
                        }
                    }
                    for (what, o) in [("keypoints", &c.keypoints), ("dense", &c.dense)] {
                        o.validate()
                            .map_err(|e| invalid(format!("{at}.cues.{what}: {e}")))?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFit {
    pub id: u64,
    pub states: Vec<PersonState>,
    /// Mean pixel distance of each person's projected keypoints to the
    /// confident observations; `None` without any.
    pub reprojection_px: Vec<Option<f64>>,
    pub final_loss: LossBreakdown,
    pub iterations: usize,
}

impl SceneFit {
    /// Mean over persons with a reprojection error.
    pub fn mean_reprojection(&self) -> Option<f64> {
        let v: Vec<f64> = self.reprojection_px.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitsFile {
    pub version: String,
    /// SHA-256 of the fit configuration as compact JSON.
    pub config_hash: String,
    pub seed: u64,
    pub scenes: Vec<SceneFit>,
}

pub fn config_hash(config: &FitConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("fit config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshFile {
    pub version: String,
    /// One vertex list per mesh, meters.
    pub meshes: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitFile {
    pub version: String,
    /// One entry per input mesh; `error` is set when that mesh failed.
    pub fits: Vec<RefitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RefitReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One row of the loss-trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub scene: u64,
    pub stage: String,
    pub iter: usize,
    pub term: String,
    pub value: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> IoResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| IoError::Csv(e.into_error().into()))?;
    write_bytes(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> IoResult<Vec<T>> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Flat metric row; empty cells mean the metric had nothing to count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub scenes: f64,
    pub persons: f64,
    pub matched: f64,
    pub mpckh: Option<f64>,
    pub pcdr: Option<f64>,
    pub pcdr_baby: Option<f64>,
    pub pcdr_toddler: Option<f64>,
    pub pcdr_child: Option<f64>,
    pub pcdr_teenager: Option<f64>,
    pub pcdr_adult: Option<f64>,
    pub pcdr_senior: Option<f64>,
    pub pcdr_pairs: f64,
    pub mpjpe_root_mm: Option<f64>,
    pub mpjpe_joint_pa_mm: Option<f64>,
    pub pck3d_15cm: Option<f64>,
    pub age_f1: Option<f64>,
    pub gender_f1: Option<f64>,
    pub detection_f1: Option<f64>,
}

impl MetricRow {
    pub fn from_report(label: &str, r: &MetricReport) -> Self {
        let class = |name: &str| r.pcdr_per_age_class.get(name).copied().flatten();
        Self {
            label: label.into(),
            scenes: r.scenes as f64,
            persons: r.persons as f64,
            matched: r.matched as f64,
            mpckh: r.mpckh,
            pcdr: r.pcdr_overall,
            pcdr_baby: class("baby"),
            pcdr_toddler: class("toddler"),
            pcdr_child: class("child"),
            pcdr_teenager: class("teenager"),
            pcdr_adult: class("adult"),
            pcdr_senior: class("senior"),
            pcdr_pairs: r.pcdr_pairs as f64,
            mpjpe_root_mm: r.mpjpe_root,
            mpjpe_joint_pa_mm: r.mpjpe_joint_pa,
            pck3d_15cm: r.pck3d_15cm,
            age_f1: r.age_f1,
            gender_f1: r.gender_f1,
            detection_f1: Some(r.detection_f1),
        }
    }

    fn optional_fields(&self) -> [Option<f64>; 14] {
        [
            self.mpckh,
            self.pcdr,
            self.pcdr_baby,
            self.pcdr_toddler,
            self.pcdr_child,
            self.pcdr_teenager,
            self.pcdr_adult,
            self.pcdr_senior,
            self.mpjpe_root_mm,
            self.mpjpe_joint_pa_mm,
            self.pck3d_15cm,
            self.age_f1,
            self.gender_f1,
            self.detection_f1,
        ]
    }

    /// `self - base` per column; a cell stays empty unless both are set.
    pub fn delta(&self, base: &MetricRow, label: &str) -> Self {
        let d = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        let (a, b) = (self.optional_fields(), base.optional_fields());
        let o: Vec<Option<f64>> = a.iter().zip(&b).map(|(x, y)| d(*x, *y)).collect();
        Self {
            label: label.into(),
            scenes: self.scenes - base.scenes,
            persons: self.persons - base.persons,
            matched: self.matched - base.matched,
            mpckh: o[0],
            pcdr: o[1],
            pcdr_baby: o[2],
            pcdr_toddler: o[3],
            pcdr_child: o[4],
            pcdr_teenager: o[5],
            pcdr_adult: o[6],
            pcdr_senior: o[7],
            pcdr_pairs: self.pcdr_pairs - base.pcdr_pairs,
            mpjpe_root_mm: o[8],
            mpjpe_joint_pa_mm: o[9],
            pck3d_15cm: o[10],
            age_f1: o[11],
            gender_f1: o[12],
            detection_f1: o[13],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub attribute: String,
    pub gt: String,
    pub pred: String,
    pub count: u64,
}

pub fn confusion_rows(attribute: &str, c: &Confusion) -> Vec<ConfusionRow> {
    let mut rows = Vec::new();
    for (i, gt) in c.classes.iter().enumerate() {
        for (j, n) in c.counts[i].iter().enumerate() {
            let pred = c.classes.get(j).map_or(MISSED, |s| s.as_str());
            rows.push(ConfusionRow {
                attribute: attribute.into(),
                gt: gt.clone(),
                pred: pred.into(),
                count: *n,
            });
        }
    }
    rows
}
