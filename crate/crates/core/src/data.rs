//! Image and pair tables, identity-level consolidation and pair covariates.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeDef, AttributeKind, AttributeSchema, Scope, CROSS_LEVEL};

/// Tolerance on the unit sum of a soft-score vector.
const SOFT_SCORE_TOL: f64 = 1e-6;
const POSE_COMPONENTS: [&str; 3] = ["pitch", "yaw", "roll"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Level(String),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity_id: String,
    pub values: BTreeMap<String, AttrValue>,
    /// Per-level probabilities for categorical attributes, in schema level order.
    pub soft_scores: BTreeMap<String, Vec<f64>>,
}

impl ImageRecord {
    /// Hard level if set, otherwise the soft-score argmax.
    pub fn level<'a>(&'a self, attr: &'a AttributeDef) -> Option<&'a str> {
        match self.values.get(&attr.name) {
            Some(AttrValue::Level(l)) => Some(l.as_str()),
            Some(AttrValue::Real(_)) => None,
            None => {
                let scores = self.soft_scores.get(&attr.name)?;
                let levels = attr.levels()?;
                Some(levels[argmax_first(scores)].as_str())
            }
        }
    }

    pub fn real(&self, name: &str) -> Option<f64> {
        match self.values.get(name) {
            Some(AttrValue::Real(v)) => Some(*v),
            _ => None,
        }
    }

    fn missing(&self, attr: &str) -> Error {
        Error::MissingAttribute {
            image_id: self.image_id.clone(),
            attribute: attr.to_string(),
        }
    }
}

/// Index of the maximum; ties go to the earliest position.
pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Immutable image table with an id index and an identity index.
#[derive(Debug, Clone, Default)]
pub struct ImageTable {
    records: Vec<ImageRecord>,
    by_id: HashMap<String, usize>,
    by_identity: BTreeMap<String, Vec<usize>>,
}

impl ImageTable {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut by_identity: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate image_id {}", r.image_id)));
            }
            by_identity.entry(r.identity_id.clone()).or_default().push(i);
        }
        for members in by_identity.values_mut() {
            members.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
        }
        Ok(ImageTable {
            records,
            by_id,
            by_identity,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.by_id.get(image_id).map(|&i| &self.records[i])
    }

    /// Identities in sorted order with their images sorted by image id.
    pub fn identities(&self) -> impl Iterator<Item = (&str, Vec<&ImageRecord>)> {
        self.by_identity
            .iter()
            .map(|(id, idx)| (id.as_str(), idx.iter().map(|&i| &self.records[i]).collect()))
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }
}

enum Column {
    Value(usize),
    Soft(usize, usize),
    PoseComponent(usize, usize),
}

pub fn load_images(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<ImageTable> {
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    parse_images(file, schema)
}

/// Parses an image CSV. Soft scores come from `attr:level` columns and pose
/// components from `attr:pitch`, `attr:yaw`, `attr:roll`.
pub fn parse_images<R: Read>(reader: R, schema: &AttributeSchema) -> Result<ImageTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("images header: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_col = find("image_id").ok_or_else(|| Error::Parse("images: no image_id column".into()))?;
    let identity_col =
        find("identity_id").ok_or_else(|| Error::Parse("images: no identity_id column".into()))?;

    let mut columns: Vec<(usize, Column)> = Vec::new();
    for (col, header) in headers.iter().enumerate() {
        if col == id_col || col == identity_col {
            continue;
        }
        let (name, sub) = match header.split_once(':') {
            Some((n, s)) => (n, Some(s)),
            None => (header, None),
        };
        let Some(attr_idx) = schema.attributes.iter().position(|a| a.name == name) else {
            continue;
        };
        let attr = &schema.attributes[attr_idx];
        let column = match (sub, &attr.kind) {
            (None, _) => Column::Value(attr_idx),
            (Some(level), AttributeKind::Categorical { levels, .. }) => {
                let li = levels.iter().position(|l| l == level).ok_or_else(|| {
                    Error::Parse(format!("column {header}: unknown level {level}"))
                })?;
                Column::Soft(attr_idx, li)
            }
            (Some(comp), AttributeKind::Continuous { .. }) => {
                let ci = POSE_COMPONENTS.iter().position(|c| *c == comp).ok_or_else(|| {
                    Error::Parse(format!("column {header}: unknown component {comp}"))
                })?;
                Column::PoseComponent(attr_idx, ci)
            }
        };
        columns.push((col, column));
    }

    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("images row {}: {e}", line + 2)))?;
        let mut rec = ImageRecord {
            image_id: row.get(id_col).unwrap_or_default().to_string(),
            identity_id: row.get(identity_col).unwrap_or_default().to_string(),
            ..Default::default()
        };
        if rec.image_id.is_empty() {
            return Err(Error::Parse(format!("images row {}: empty image_id", line + 2)));
        }
        let mut soft: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
        let mut pose: BTreeMap<usize, [Option<f64>; 3]> = BTreeMap::new();
        for (col, column) in &columns {
            let cell = row.get(*col).unwrap_or_default();
            if cell.is_empty() {
                continue;
            }
            match *column {
                Column::Value(ai) => {
                    let attr = &schema.attributes[ai];
                    let value = match &attr.kind {
                        AttributeKind::Categorical { levels, .. } => {
                            if !levels.iter().any(|l| l == cell) {
                                return Err(Error::Parse(format!(
                                    "image {}: {} has unknown level {cell}",
                                    rec.image_id, attr.name
                                )));
                            }
                            AttrValue::Level(cell.to_string())
                        }
                        AttributeKind::Continuous { .. } => {
                            AttrValue::Real(parse_real(cell, &rec.image_id, &attr.name)?)
                        }
                    };
                    rec.values.insert(attr.name.clone(), value);
                }
                Column::Soft(ai, li) => {
                    let n = schema.attributes[ai].levels().map_or(0, <[String]>::len);
                    let v = parse_real(cell, &rec.image_id, &schema.attributes[ai].name)?;
                    soft.entry(ai).or_insert_with(|| vec![None; n])[li] = Some(v);
                }
                Column::PoseComponent(ai, ci) => {
                    let v = parse_real(cell, &rec.image_id, &schema.attributes[ai].name)?;
                    pose.entry(ai).or_default()[ci] = Some(v);
                }
            }
        }
        for (ai, scores) in soft {
            let attr = &schema.attributes[ai];
            let scores: Option<Vec<f64>> = scores.into_iter().collect();
            let scores = scores.ok_or_else(|| {
                Error::Parse(format!(
                    "image {}: incomplete soft scores for {}",
                    rec.image_id, attr.name
                ))
            })?;
            let sum: f64 = scores.iter().sum();
            if scores.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > SOFT_SCORE_TOL {
                return Err(Error::Parse(format!(
                    "image {}: soft scores for {} are not a probability vector",
                    rec.image_id, attr.name
                )));
            }
            rec.soft_scores.insert(attr.name.clone(), scores);
        }
        for (ai, comps) in pose {
            let attr = &schema.attributes[ai];
            if rec.values.contains_key(&attr.name) {
                continue;
            }
            let [Some(p), Some(y), Some(r)] = comps else {
                return Err(Error::Parse(format!(
                    "image {}: incomplete pitch/yaw/roll for {}",
                    rec.image_id, attr.name
                )));
            };
            rec.values.insert(attr.name.clone(), AttrValue::Real(pose_norm(p, y, r)));
        }
        for attr in schema.attributes.iter().filter(|a| a.scope == Scope::Image) {
            if !rec.values.contains_key(&attr.name) && !rec.soft_scores.contains_key(&attr.name) {
                return Err(rec.missing(&attr.name));
            }
        }
        records.push(rec);
    }
    ImageTable::new(records)
}

/// Rotation magnitude in degrees from pitch, yaw and roll.
pub fn pose_norm(pitch: f64, yaw: f64, roll: f64) -> f64 {
    (pitch * pitch + yaw * yaw + roll * roll).sqrt()
}

fn parse_real(cell: &str, image_id: &str, attr: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| Error::Parse(format!("image {image_id}: {attr} value {cell:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("image {image_id}: {attr} is not finite")));
    }
    Ok(v)
}

/// Writes identity-level categorical attributes onto every image of each identity.
///
/// Soft scores are averaged over the identity's images (in image-id order) and
/// the argmax level is assigned; ties go to the earliest schema level.
/// Identities without soft scores keep their hard values.
pub fn consolidate_identity_attributes(
    images: &ImageTable,
    schema: &AttributeSchema,
) -> Result<ImageTable> {
    let identity_attrs: Vec<&AttributeDef> = schema
        .attributes
        .iter()
        .filter(|a| a.scope == Scope::Identity && a.is_categorical())
        .collect();
    let mut records = images.records().to_vec();
    let index: HashMap<&str, usize> = images
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();

    for (_, members) in images.identities() {
        for attr in &identity_attrs {
            let levels = attr.levels().unwrap_or_default();
            let mut sum = vec![0.0; levels.len()];
            let mut n_soft = 0usize;
            for img in &members {
                match img.soft_scores.get(&attr.name) {
                    Some(scores) => {
                        for (s, p) in sum.iter_mut().zip(scores) {
                            *s += p;
                        }
                        n_soft += 1;
                    }
                    None if img.values.contains_key(&attr.name) => {}
                    None => return Err(img.missing(&attr.name)),
                }
            }
            if n_soft == 0 {
                continue;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n_soft as f64).collect();
            let level = levels[argmax_first(&mean)].clone();
            for img in &members {
                records[index[img.image_id.as_str()]]
                    .values
                    .insert(attr.name.clone(), AttrValue::Level(level.clone()));
            }
        }
    }
    ImageTable::new(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Same,
    Different,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s.to_ascii_lowercase().as_str() {
            "same" | "1" | "true" | "genuine" => Some(Label::Same),
            "different" | "0" | "false" | "impostor" => Some(Label::Different),
            _ => None,
        }
    }

    pub fn is_same(self) -> bool {
        self == Label::Same
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Same => "same",
            Label::Different => "different",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    pub image_a: String,
    pub image_b: String,
    pub ground_truth: Label,
    pub distance: f64,
    pub predicted: Option<Label>,
}

pub fn load_pairs(path: impl AsRef<Path>, images: &ImageTable) -> Result<Vec<PairRecord>> {
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    parse_pairs(file, images)
}

/// Parses `pair_id,image_a,image_b,ground_truth,distance[,predicted]`.
pub fn parse_pairs<R: Read>(reader: R, images: &ImageTable) -> Result<Vec<PairRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("pairs header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("pairs: no {name} column")))
    };
    let (c_id, c_a, c_b, c_gt, c_d) = (
        col("pair_id")?,
        col("image_a")?,
        col("image_b")?,
        col("ground_truth")?,
        col("distance")?,
    );
    let c_pred = headers.iter().position(|h| h == "predicted");

    let mut pairs = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("pairs row {}: {e}", line + 2)))?;
        let get = |c: usize| row.get(c).unwrap_or_default();
        let pair_id = get(c_id).to_string();
        let ground_truth = Label::parse(get(c_gt))
            .ok_or_else(|| Error::Parse(format!("pair {pair_id}: bad ground_truth {:?}", get(c_gt))))?;
        let distance: f64 = get(c_d)
            .parse()
            .map_err(|_| Error::Parse(format!("pair {pair_id}: bad distance {:?}", get(c_d))))?;
        if !distance.is_finite() || distance < 0.0 {
            return Err(Error::Parse(format!(
                "pair {pair_id}: distance must be finite and nonnegative"
            )));
        }
        let predicted = match c_pred.map(get) {
            None | Some("") => None,
            Some(s) => Some(
                Label::parse(s)
                    .ok_or_else(|| Error::Parse(format!("pair {pair_id}: bad predicted {s:?}")))?,
            ),
        };
        let pair = PairRecord {
            image_a: get(c_a).to_string(),
            image_b: get(c_b).to_string(),
            pair_id,
            ground_truth,
            distance,
            predicted,
        };
        for img in [&pair.image_a, &pair.image_b] {
            if images.get(img).is_none() {
                return Err(Error::UnresolvedImage {
                    pair_id: pair.pair_id.clone(),
                    image_id: img.clone(),
                });
            }
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// How a continuous attribute of two images is reduced to one pair covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairAggregate {
    #[default]
    Mean,
    AbsDiff,
}

impl std::str::FromStr for PairAggregate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(PairAggregate::Mean),
            "absdiff" => Ok(PairAggregate::AbsDiff),
            other => Err(format!("unknown pair aggregate {other:?} (mean|absdiff)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairCovariates {
    pub pair_id: String,
    pub categorical: BTreeMap<String, String>,
    pub continuous: BTreeMap<String, f64>,
}

pub fn derive_pair_covariates(
    pair: &PairRecord,
    images: &ImageTable,
    schema: &AttributeSchema,
    aggregate: PairAggregate,
) -> Result<PairCovariates> {
    let resolve = |id: &String| {
        images.get(id).ok_or_else(|| Error::UnresolvedImage {
            pair_id: pair.pair_id.clone(),
            image_id: id.clone(),
        })
    };
    let (a, b) = (resolve(&pair.image_a)?, resolve(&pair.image_b)?);
    let mut cov = PairCovariates {
        pair_id: pair.pair_id.clone(),
        ..Default::default()
    };
    for attr in &schema.attributes {
        if attr.is_categorical() {
            let la = a.level(attr).ok_or_else(|| a.missing(&attr.name))?;
            let lb = b.level(attr).ok_or_else(|| b.missing(&attr.name))?;
            let level = if la == lb { la } else { CROSS_LEVEL };
            cov.categorical.insert(attr.name.clone(), level.to_string());
        } else {
            let va = a.real(&attr.name).ok_or_else(|| a.missing(&attr.name))?;
            let vb = b.real(&attr.name).ok_or_else(|| b.missing(&attr.name))?;
            let v = match aggregate {
                PairAggregate::Mean => (va + vb) / 2.0,
                PairAggregate::AbsDiff => (va - vb).abs(),
            };
            cov.continuous.insert(attr.name.clone(), v);
        }
    }
    Ok(cov)
}

/// Covariates for every pair, in input order.
pub fn derive_all_covariates(
    pairs: &[PairRecord],
    images: &ImageTable,
    schema: &AttributeSchema,
    aggregate: PairAggregate,
) -> Result<Vec<PairCovariates>> {
    pairs
        .iter()
        .map(|p| derive_pair_covariates(p, images, schema, aggregate))
        .collect()
}
