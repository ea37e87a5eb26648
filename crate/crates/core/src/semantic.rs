//! Categorical attribute labels mapped to shape-space coordinates and back.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape coordinates with a semantic meaning in the default model.
pub mod dims {
    pub const AGE: usize = 0;
    pub const GENDER: usize = 1;
    pub const WEIGHT: usize = 2;
    pub const HEIGHT: usize = 3;
    pub const MUSCLE: usize = 4;
}

pub const UNKNOWN: &str = "unknown";

pub const AGE_LABELS: [&str; 6] = ["baby", "toddler", "child", "teenager", "adult", "senior"];
pub const GENDER_LABELS: [&str; 3] = ["male", "neutral", "female"];
pub const BODYTYPE_LABELS: [&str; 4] = ["slim", "average", "overweight", "muscular"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub label: String,
    /// One value per governed dimension, each in `[0,1]`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    /// Shape dimensions set by this attribute.
    pub dims: Vec<usize>,
    pub anchors: Vec<Anchor>,
}

impl AttributeSpec {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.anchors.iter().map(|a| a.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCatalog {
    pub shape_dim: usize,
    pub attributes: Vec<AttributeSpec>,
}

/// Result of mapping one label.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedLabel {
    /// `(dimension, value)` pairs.
    pub values: Vec<(usize, f64)>,
    /// Whether an anchor (rather than the fallback) produced the values.
    pub anchored: bool,
    /// Set when the label was not recognised.
    pub warning: bool,
}

/// Image-aligned shape estimate `F` with a per-dimension provided flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEstimate {
    pub values: Vec<f64>,
    pub provided: Vec<bool>,
}

impl ShapeEstimate {
    pub fn unknown(shape_dim: usize) -> Self {
        Self {
            values: vec![0.5; shape_dim],
            provided: vec![false; shape_dim],
        }
    }
}

impl Default for AttributeCatalog {
    fn default() -> Self {
        let one = |label: &str, v: f64| Anchor {
            label: label.to_string(),
            values: vec![v],
        };
        let two = |label: &str, muscle: f64, weight: f64| Anchor {
            label: label.to_string(),
            values: vec![muscle, weight],
        };
        Self {
            shape_dim: 10,
            attributes: vec![
                AttributeSpec {
                    name: "age".to_string(),
                    dims: vec![dims::AGE],
                    anchors: AGE_LABELS
                        .iter()
                        .zip([0.02, 0.06, 0.14, 0.35, 0.66, 0.92])
                        .map(|(l, v)| one(l, v))
                        .collect(),
                },
                AttributeSpec {
                    name: "gender".to_string(),
                    dims: vec![dims::GENDER],
                    anchors: GENDER_LABELS
                        .iter()
                        .zip([0.0, 0.5, 1.0])
                        .map(|(l, v)| one(l, v))
                        .collect(),
                },
                AttributeSpec {
                    name: "bodytype".to_string(),
                    dims: vec![dims::MUSCLE, dims::WEIGHT],
                    anchors: vec![
                        two("slim", 0.3, 0.3),
                        two("average", 0.4, 0.7),
                        two("overweight", 0.1, 0.8),
                        two("muscular", 0.9, 0.7),
                    ],
                },
            ],
        }
    }
}

impl AttributeCatalog {
    pub fn validate(&self) -> Result<()> {
        for a in &self.attributes {
            if a.dims.is_empty() || a.dims.iter().any(|&d| d >= self.shape_dim) {
                return Err(Error::Config(alloc::format!(
                    "attribute {} has invalid dimensions",
                    a.name
                )));
            }
            if a.anchors.is_empty() {
                return Err(Error::Config(alloc::format!(
                    "attribute {} has no anchors",
                    a.name
                )));
            }
            for an in &a.anchors {
                if an.values.len() != a.dims.len()
                    || an.values.iter().any(|v| !(0.0..=1.0).contains(v))
                {
                    return Err(Error::Config(alloc::format!(
                        "anchor {}/{} out of range",
                        a.name,
                        an.label
                    )));
                }
                if an.label == UNKNOWN {
                    return Err(Error::Config(
                        "\"unknown\" is reserved for the fallback".to_string(),
                    ));
                }
            }
            if a.name == "age"
                && a.anchors
                    .windows(2)
                    .any(|w| !(w[1].values[0] > w[0].values[0]))
            {
                return Err(Error::Config(
                    "age anchors must be strictly increasing".to_string(),
                ));
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Anchor value(s) of `label`; unrecognised labels fall back to the
    /// centre of the range with `warning` set.
    pub fn map_category(&self, attribute: &str, label: &str) -> Result<MappedLabel> {
        let spec = self
            .attribute(attribute)
            .ok_or_else(|| Error::Config(alloc::format!("unknown attribute {attribute:?}")))?;
        if let Some(a) = spec.anchors.iter().find(|a| a.label == label) {
            return Ok(MappedLabel {
                values: spec
                    .dims
                    .iter()
                    .copied()
                    .zip(a.values.iter().copied())
                    .collect(),
                anchored: true,
                warning: false,
            });
        }
        Ok(MappedLabel {
            values: spec.dims.iter().map(|&d| (d, 0.5)).collect(),
            anchored: false,
            warning: label != UNKNOWN,
        })
    }

    /// Composes a shape estimate from (possibly partial) labels. Returns the
    /// names of attributes whose label or name was not recognised.
    pub fn build_estimate(
        &self,
        labels: &BTreeMap<String, String>,
    ) -> (ShapeEstimate, Vec<String>) {
        let mut est = ShapeEstimate::unknown(self.shape_dim);
        let mut warnings = Vec::new();
        for (attr, label) in labels {
            match self.map_category(attr, label) {
                Ok(m) => {
                    if m.warning {
                        warnings.push(attr.clone());
                    }
                    for (d, v) in m.values {
                        est.values[d] = v;
                        est.provided[d] = m.anchored;
                    }
                }
                Err(_) => warnings.push(attr.clone()),
            }
        }
        (est, warnings)
    }

    /// Nearest-anchor label per attribute; ties go to the lower-valued anchor.
    pub fn classify_beta(&self, beta: &[f64]) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for spec in &self.attributes {
            let mut anchors: Vec<&Anchor> = spec.anchors.iter().collect();
            anchors.sort_by(|a, b| {
                a.values
                    .partial_cmp(&b.values)
                    .unwrap_or(core::cmp::Ordering::Equal)
            });
            let mut best: Option<(&Anchor, f64)> = None;
            for a in anchors {
                let d: f64 = spec
                    .dims
                    .iter()
                    .zip(&a.values)
                    .map(|(&k, v)| (beta[k] - v) * (beta[k] - v))
                    .sum();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((a, d));
                }
            }
            if let Some((a, _)) = best {
                out.insert(spec.name.clone(), a.label.clone());
            }
        }
        out
    }
}
