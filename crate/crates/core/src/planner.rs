//! Dataset balancing: inverse-frequency sampling and loss weights, and the
//! balanced identity/style plan for controlled generation.

use std::collections::{BTreeMap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, ImageTable};
use crate::error::{Error, Result};
use crate::metrics::diversity_of;
use crate::schema::{AttributeDef, AttributeSchema};

/// Discrete value of `attr` on `img`: the level, or the bin index for continuous attributes.
fn discrete_value(img: &ImageRecord, attr: &AttributeDef) -> Result<String> {
    let missing = || Error::MissingAttribute {
        image_id: img.image_id.clone(),
        attribute: attr.name.clone(),
    };
    if attr.is_categorical() {
        return img.level(attr).map(str::to_string).ok_or_else(missing);
    }
    Ok(bin_of(img, attr)?.to_string())
}

fn bin_of(img: &ImageRecord, attr: &AttributeDef) -> Result<usize> {
    let v = img.real(&attr.name).ok_or_else(|| Error::MissingAttribute {
        image_id: img.image_id.clone(),
        attribute: attr.name.clone(),
    })?;
    if attr.bins.is_none() {
        return Err(Error::SchemaInvalid(format!(
            "continuous attribute {} has no bins",
            attr.name
        )));
    }
    attr.bin_index(v).ok_or_else(|| {
        Error::Precondition(format!(
            "image {}: {} = {v} lies outside every bin",
            img.image_id, attr.name
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageWeight {
    pub image_id: String,
    pub weight: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    /// Sorted by image id.
    pub entries: Vec<ImageWeight>,
    pub attributes: Vec<String>,
}

/// Unnormalized inverse-frequency weights, keyed by image id.
fn inverse_frequency(
    images: &ImageTable,
    schema: &AttributeSchema,
    attrs: &[String],
) -> Result<BTreeMap<String, f64>> {
    let defs = attrs
        .iter()
        .map(|a| schema.require(a))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<Vec<String>> = images
        .records()
        .iter()
        .map(|img| defs.iter().map(|d| discrete_value(img, d)).collect())
        .collect::<Result<_>>()?;
    let mut counts: Vec<HashMap<&str, usize>> = vec![HashMap::new(); defs.len()];
    for k in &keys {
        for (c, v) in counts.iter_mut().zip(k) {
            *c.entry(v.as_str()).or_default() += 1;
        }
    }
    Ok(images
        .records()
        .iter()
        .zip(&keys)
        .map(|(img, k)| {
            let w = k
                .iter()
                .zip(&counts)
                .fold(1.0, |w, (v, c)| w / c[v.as_str()] as f64);
            (img.image_id.clone(), w)
        })
        .collect())
}

/// `w_i = prod_a 1 / count(value_a(i))`, `p_i = w_i / sum_k w_k`.
pub fn sampling_weights(
    images: &ImageTable,
    schema: &AttributeSchema,
    attrs: &[String],
) -> Result<SamplingWeights> {
    if images.is_empty() {
        return Err(Error::Precondition("image table is empty".into()));
    }
    let weights = inverse_frequency(images, schema, attrs)?;
    let total: f64 = weights.values().sum();
    Ok(SamplingWeights {
        entries: weights
            .into_iter()
            .map(|(image_id, weight)| ImageWeight {
                image_id,
                weight,
                probability: weight / total,
            })
            .collect(),
        attributes: attrs.to_vec(),
    })
}

/// Per-sample loss weights for `batch`, normalized to unit sum within the batch.
pub fn loss_weights(
    images: &ImageTable,
    schema: &AttributeSchema,
    attrs: &[String],
    batch: &[String],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Precondition("batch is empty".into()));
    }
    let weights = inverse_frequency(images, schema, attrs)?;
    let w: Vec<f64> = batch
        .iter()
        .map(|id| {
            weights
                .get(id)
                .copied()
                .ok_or_else(|| Error::Precondition(format!("batch image {id} not in table")))
        })
        .collect::<Result<_>>()?;
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

/// `n` draws with replacement according to the sampling probabilities.
pub fn resample_epoch(weights: &SamplingWeights, n: usize, seed: u64) -> Result<Vec<String>> {
    let dist = WeightedIndex::new(weights.entries.iter().map(|e| e.probability))
        .map_err(|e| Error::Precondition(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| weights.entries[dist.sample(&mut rng)].image_id.clone())
        .collect())
}

/// Attribute names the planner balances on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerAttributes {
    /// Demographic segment, e.g. gender x ethnicity.
    pub segment: Vec<String>,
    pub age: String,
    pub pose: String,
}

impl Default for PlannerAttributes {
    fn default() -> Self {
        PlannerAttributes {
            segment: vec!["gender".into(), "ethnicity".into()],
            age: "age".into(),
            pose: "pose".into(),
        }
    }
}

/// Joint level of the segment attributes, in `PlannerAttributes::segment` order.
pub type Segment = Vec<String>;

#[derive(Debug, Clone, PartialEq)]
pub struct IdCandidate {
    pub image_id: String,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleCandidate {
    pub image_id: String,
    pub segment: Segment,
    pub age_bin: usize,
    pub pose_bin: usize,
}

fn segment_of(img: &ImageRecord, schema: &AttributeSchema, attrs: &PlannerAttributes) -> Result<Segment> {
    attrs
        .segment
        .iter()
        .map(|a| {
            let def = schema.require(a)?;
            if !def.is_categorical() {
                return Err(Error::SchemaInvalid(format!("segment attribute {a} is not categorical")));
            }
            discrete_value(img, def)
        })
        .collect()
}

pub fn id_candidates(
    images: &ImageTable,
    schema: &AttributeSchema,
    attrs: &PlannerAttributes,
) -> Result<Vec<IdCandidate>> {
    images
        .records()
        .iter()
        .map(|img| {
            Ok(IdCandidate {
                image_id: img.image_id.clone(),
                segment: segment_of(img, schema, attrs)?,
            })
        })
        .collect()
}

pub fn style_candidates(
    images: &ImageTable,
    schema: &AttributeSchema,
    attrs: &PlannerAttributes,
) -> Result<Vec<StyleCandidate>> {
    let age = schema.require(&attrs.age)?;
    let pose = schema.require(&attrs.pose)?;
    images
        .records()
        .iter()
        .map(|img| {
            Ok(StyleCandidate {
                image_id: img.image_id.clone(),
                segment: segment_of(img, schema, attrs)?,
                age_bin: bin_of(img, age)?,
                pose_bin: bin_of(img, pose)?,
            })
        })
        .collect()
}

/// Every joint level of the segment attributes, in schema level order.
pub fn segment_cells(schema: &AttributeSchema, attrs: &PlannerAttributes) -> Result<Vec<Segment>> {
    let mut cells: Vec<Segment> = vec![vec![]];
    for a in &attrs.segment {
        let levels = schema
            .require(a)?
            .levels()
            .ok_or_else(|| Error::SchemaInvalid(format!("segment attribute {a} is not categorical")))?;
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                levels.iter().map(move |l| {
                    let mut c = prefix.clone();
                    c.push(l.clone());
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

/// Draws `n_identities / |cells|` ID images per cell, uniformly without
/// replacement. Output is cell-major, then sorted by image id.
pub fn select_id_pool(
    candidates: &[IdCandidate],
    cells: &[Segment],
    n_identities: usize,
    seed: u64,
) -> Result<Vec<IdCandidate>> {
    if cells.is_empty() || !n_identities.is_multiple_of(cells.len()) {
        return Err(Error::NotDivisible {
            n: n_identities,
            cells: cells.len(),
        });
    }
    let need = n_identities / cells.len();
    let mut by_cell: HashMap<&Segment, Vec<&IdCandidate>> = HashMap::new();
    for c in candidates {
        by_cell.entry(&c.segment).or_default().push(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_identities);
    for cell in cells {
        let mut pool = by_cell.remove(cell).unwrap_or_default();
        if pool.len() < need {
            return Err(Error::InsufficientCandidates {
                cell: cell.join(" x "),
                have: pool.len(),
                need,
            });
        }
        pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut chosen: Vec<&IdCandidate> = rand::seq::index::sample(&mut rng, pool.len(), need)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        chosen.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        out.extend(chosen.into_iter().cloned());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleAssignment {
    pub style_image: String,
    pub age_bin: usize,
    pub pose_bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id_image: String,
    pub segment: BTreeMap<String, String>,
    pub styles: Vec<StyleAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub entries: Vec<PlanEntry>,
    pub samples_per_identity: usize,
}

impl GenerationPlan {
    /// One JSON object per identity.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("plan entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Global count of assigned styles per (age_bin, pose_bin) cell.
    pub fn style_histogram(&self) -> BTreeMap<(usize, usize), usize> {
        let mut h = BTreeMap::new();
        for s in self.entries.iter().flat_map(|e| &e.styles) {
            *h.entry((s.age_bin, s.pose_bin)).or_default() += 1;
        }
        h
    }
}

/// Greedy fill: each step takes an unused style from the least-represented
/// (age_bin, pose_bin) cell of this identity, lowest cell then lowest id on ties.
fn greedy_styles(
    cells: &BTreeMap<(usize, usize), Vec<&StyleCandidate>>,
    samples: usize,
) -> Vec<StyleAssignment> {
    let mut used: BTreeMap<(usize, usize), usize> = cells.keys().map(|&k| (k, 0)).collect();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (&cell, count) = used
            .iter_mut()
            .filter(|(k, n)| **n < cells[*k].len())
            .min_by_key(|(_, n)| **n)
            .expect("enough styles checked by caller");
        let style = cells[&cell][*count];
        *count += 1;
        out.push(StyleAssignment {
            style_image: style.image_id.clone(),
            age_bin: style.age_bin,
            pose_bin: style.pose_bin,
        });
    }
    out
}

pub fn assign_styles(
    pool: &[IdCandidate],
    styles: &[StyleCandidate],
    segment_attrs: &[String],
    samples_per_identity: usize,
) -> Result<GenerationPlan> {
    let mut by_segment: HashMap<&Segment, BTreeMap<(usize, usize), Vec<&StyleCandidate>>> =
        HashMap::new();
    for s in styles {
        by_segment
            .entry(&s.segment)
            .or_default()
            .entry((s.age_bin, s.pose_bin))
            .or_default()
            .push(s);
    }
    for cells in by_segment.values_mut() {
        for list in cells.values_mut() {
            list.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            list.dedup_by(|a, b| a.image_id == b.image_id);
        }
    }
    // the greedy fill depends only on the segment's style cells
    let mut cache: HashMap<&Segment, Vec<StyleAssignment>> = HashMap::new();
    let mut entries = Vec::with_capacity(pool.len());
    for id in pool {
        if !cache.contains_key(&id.segment) {
            let cells = by_segment
                .get(&id.segment)
                .filter(|c| c.values().map(Vec::len).sum::<usize>() >= samples_per_identity)
                .ok_or_else(|| Error::InsufficientStyles(id.segment.join(" x ")))?;
            cache.insert(&id.segment, greedy_styles(cells, samples_per_identity));
        }
        entries.push(PlanEntry {
            id_image: id.image_id.clone(),
            segment: segment_attrs
                .iter()
                .cloned()
                .zip(id.segment.iter().cloned())
                .collect(),
            styles: cache[&id.segment].clone(),
        });
    }
    Ok(GenerationPlan {
        entries,
        samples_per_identity,
    })
}

/// Normalized-entropy diversity of the plan: segment attributes over
/// identities, age and pose bins over assigned styles.
pub fn plan_diversity_report(
    plan: &GenerationPlan,
    schema: &AttributeSchema,
    attrs: &PlannerAttributes,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for a in &attrs.segment {
        let n = schema.require(a)?.n_categories().unwrap_or(0);
        let d = diversity_of(plan.entries.iter().filter_map(|e| e.segment.get(a).map(String::as_str)), n)?;
        out.insert(a.clone(), d);
    }
    let styles: Vec<&StyleAssignment> = plan.entries.iter().flat_map(|e| &e.styles).collect();
    for (name, pick) in [
        (&attrs.age, (|s: &StyleAssignment| s.age_bin) as fn(&StyleAssignment) -> usize),
        (&attrs.pose, |s: &StyleAssignment| s.pose_bin),
    ] {
        let n = schema.require(name)?.n_categories().unwrap_or(0);
        let labels: Vec<String> = styles.iter().map(|s| pick(s).to_string()).collect();
        out.insert(name.clone(), diversity_of(labels.iter().map(String::as_str), n)?);
    }
    Ok(out)
}
