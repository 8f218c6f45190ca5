//! Attribute schema: which attributes exist, how they are coded and binned.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Level used for pair covariates whose two sides disagree.
pub const CROSS_LEVEL: &str = "Cross";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Identity,
    Image,
}

/// Half-open interval `[lo, hi)`; `hi` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
}

impl Bin {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v < self.hi
    }

    pub fn label(&self) -> String {
        if self.hi.is_infinite() {
            format!("{}+", self.lo)
        } else {
            format!("{}-{}", self.lo, self.hi)
        }
    }
}

impl Serialize for Bin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let hi = if self.hi.is_infinite() {
            None
        } else {
            Some(self.hi)
        };
        (self.lo, hi).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Bin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (lo, hi): (f64, Option<f64>) = Deserialize::deserialize(d)?;
        Ok(Bin {
            lo,
            hi: hi.unwrap_or(f64::INFINITY),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeKind {
    Categorical { levels: Vec<String>, reference: String },
    Continuous {
        #[serde(default)]
        unit: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<Bin>>,
}

impl AttributeDef {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, AttributeKind::Categorical { .. })
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            AttributeKind::Categorical { levels, .. } => Some(levels),
            AttributeKind::Continuous { .. } => None,
        }
    }

    pub fn reference(&self) -> Option<&str> {
        match &self.kind {
            AttributeKind::Categorical { reference, .. } => Some(reference),
            AttributeKind::Continuous { .. } => None,
        }
    }

    pub fn unit(&self) -> Option<&str> {
        match &self.kind {
            AttributeKind::Continuous { unit } => Some(unit),
            AttributeKind::Categorical { .. } => None,
        }
    }

    /// Index of the bin holding `v`, if any.
    pub fn bin_index(&self, v: f64) -> Option<usize> {
        self.bins.as_ref()?.iter().position(|b| b.contains(v))
    }

    /// Number of categories this attribute takes once discretized.
    pub fn n_categories(&self) -> Option<usize> {
        match &self.kind {
            AttributeKind::Categorical { levels, .. } => Some(levels.len()),
            AttributeKind::Continuous { .. } => self.bins.as_ref().map(Vec::len),
        }
    }
}

/// FairFace age brackets: 0-2, 3-9, 10-19, ..., 60-69, 70+.
pub fn default_age_bins() -> Vec<Bin> {
    let edges = [0.0, 3.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, f64::INFINITY];
    edges
        .windows(2)
        .map(|w| Bin { lo: w[0], hi: w[1] })
        .collect()
}

/// Rotation-magnitude brackets in degrees.
pub fn default_pose_bins() -> Vec<Bin> {
    let edges = [0.0, 10.0, 20.0, 35.0, 60.0, f64::INFINITY];
    edges
        .windows(2)
        .map(|w| Bin { lo: w[0], hi: w[1] })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeDef>,
}

impl AttributeSchema {
    /// Validates the invariants and fills in default bins for `age` and `pose`.
    pub fn new(mut attributes: Vec<AttributeDef>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::SchemaInvalid("attribute list is empty".into()));
        }
        let mut names = HashSet::new();
        for attr in &mut attributes {
            if attr.name.is_empty() || attr.name.contains(':') {
                return Err(Error::SchemaInvalid(format!(
                    "invalid attribute name {:?}",
                    attr.name
                )));
            }
            if !names.insert(attr.name.clone()) {
                return Err(Error::SchemaInvalid(format!(
                    "duplicate attribute {}",
                    attr.name
                )));
            }
            match &attr.kind {
                AttributeKind::Categorical { levels, reference } => {
                    if levels.len() < 2 {
                        return Err(Error::SchemaInvalid(format!(
                            "{} needs at least two levels",
                            attr.name
                        )));
                    }
                    let mut seen = HashSet::new();
                    for level in levels {
                        if level == CROSS_LEVEL {
                            return Err(Error::SchemaInvalid(format!(
                                "{}: level name {CROSS_LEVEL} is reserved",
                                attr.name
                            )));
                        }
                        if !seen.insert(level) {
                            return Err(Error::SchemaInvalid(format!(
                                "{}: duplicate level {level}",
                                attr.name
                            )));
                        }
                    }
                    if !levels.contains(reference) {
                        return Err(Error::SchemaInvalid(format!(
                            "{}: reference level {reference} is not a declared level",
                            attr.name
                        )));
                    }
                    if attr.bins.is_some() {
                        return Err(Error::SchemaInvalid(format!(
                            "{}: bins are only allowed on continuous attributes",
                            attr.name
                        )));
                    }
                }
                AttributeKind::Continuous { .. } => {
                    if attr.bins.is_none() {
                        attr.bins = match attr.name.as_str() {
                            "age" => Some(default_age_bins()),
                            "pose" => Some(default_pose_bins()),
                            _ => None,
                        };
                    }
                    if let Some(bins) = &attr.bins {
                        validate_bins(&attr.name, bins)?;
                    }
                }
            }
        }
        Ok(AttributeSchema { attributes })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: AttributeSchema =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("schema: {e}")))?;
        Self::new(raw.attributes)
    }

    pub fn get(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&AttributeDef> {
        self.get(name)
            .ok_or_else(|| Error::SchemaInvalid(format!("unknown attribute {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }
}

fn validate_bins(name: &str, bins: &[Bin]) -> Result<()> {
    if bins.is_empty() {
        return Err(Error::SchemaInvalid(format!("{name}: empty bin list")));
    }
    for b in bins {
        if !(b.lo < b.hi) || b.lo.is_nan() {
            return Err(Error::SchemaInvalid(format!(
                "{name}: bin [{}, {}) is empty",
                b.lo, b.hi
            )));
        }
    }
    for w in bins.windows(2) {
        // contiguous: sorted, disjoint and gap-free
        if w[0].hi != w[1].lo {
            return Err(Error::SchemaInvalid(format!(
                "{name}: bins [{}, {}) and [{}, {}) are not contiguous",
                w[0].lo, w[0].hi, w[1].lo, w[1].hi
            )));
        }
    }
    Ok(())
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<AttributeSchema> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    AttributeSchema::from_json(&text)
}
