//! Synthetic verification benchmark with controllable group disparities.
//!
//! Identities are spread evenly over gender x ethnicity; images carry an age
//! and pitch/yaw/roll pose. Positive pairs join two images of one identity,
//! negative pairs two identities of the same segment. Distances are drawn
//! from separated zones so the optimized threshold falls in the gap and the
//! per-group match rates equal the configured rates up to sampling noise.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{pose_norm, AttrValue, ImageRecord, ImageTable, Label, PairRecord};
use crate::error::Result;
use crate::schema::AttributeSchema;

pub const DEMO_SCHEMA: &str = r#"{
  "attributes": [
    {"name": "ethnicity", "kind": "categorical", "scope": "identity",
     "levels": ["Caucasian", "African", "Asian", "Indian"], "reference": "Caucasian"},
    {"name": "gender", "kind": "categorical", "scope": "identity",
     "levels": ["Male", "Female"], "reference": "Male"},
    {"name": "age", "kind": "continuous", "unit": "years", "scope": "image"},
    {"name": "pose", "kind": "continuous", "unit": "degrees", "scope": "image"}
  ]
}
"#;

/// Additive change to a match rate for pairs whose attribute has `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateShift {
    pub attribute: String,
    pub level: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_positive_pairs: usize,
    pub n_negative_pairs: usize,
    pub base_fmr: f64,
    pub base_fnmr: f64,
    pub fmr_shifts: Vec<RateShift>,
    pub fnmr_shifts: Vec<RateShift>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_identities: 400,
            images_per_identity: 4,
            n_positive_pairs: 1500,
            n_negative_pairs: 1500,
            base_fmr: 0.05,
            base_fnmr: 0.05,
            fmr_shifts: vec![RateShift {
                attribute: "ethnicity".into(),
                level: "African".into(),
                delta: 0.10,
            }],
            fnmr_shifts: vec![RateShift {
                attribute: "gender".into(),
                level: "Female".into(),
                delta: 0.05,
            }],
            seed: 7,
        }
    }
}

pub struct SyntheticData {
    pub schema: AttributeSchema,
    pub images: ImageTable,
    pub pairs: Vec<PairRecord>,
}

struct Identity {
    gender: &'static str,
    ethnicity: &'static str,
    base_age: f64,
}

const GENDERS: [&str; 2] = ["Male", "Female"];
const ETHNICITIES: [&str; 4] = ["Caucasian", "African", "Asian", "Indian"];

fn shifted(base: f64, shifts: &[RateShift], id: &Identity) -> f64 {
    let extra: f64 = shifts
        .iter()
        .filter(|s| match s.attribute.as_str() {
            "gender" => s.level == id.gender,
            "ethnicity" => s.level == id.ethnicity,
            _ => false,
        })
        .map(|s| s.delta)
        .sum();
    (base + extra).clamp(0.0, 1.0)
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    let schema = AttributeSchema::from_json(DEMO_SCHEMA)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cells = GENDERS.len() * ETHNICITIES.len();
    let identities: Vec<Identity> = (0..config.n_identities)
        .map(|i| Identity {
            gender: GENDERS[i % cells / ETHNICITIES.len()],
            ethnicity: ETHNICITIES[i % ETHNICITIES.len()],
            base_age: rng.random_range(18.0..70.0),
        })
        .collect();

    let mut records = Vec::new();
    let mut poses = Vec::new();
    for (i, id) in identities.iter().enumerate() {
        for k in 0..config.images_per_identity {
            let pitch: f64 = rng.random_range(-15.0..15.0);
            let yaw: f64 = rng.random_range(-30.0..30.0);
            let roll: f64 = rng.random_range(-10.0..10.0);
            let age: f64 = id.base_age + rng.random_range(-3.0..3.0);
            let mut rec = ImageRecord {
                image_id: format!("img{i:05}_{k}"),
                identity_id: format!("id{i:05}"),
                ..Default::default()
            };
            rec.values.insert("gender".into(), AttrValue::Level(id.gender.into()));
            rec.values.insert("ethnicity".into(), AttrValue::Level(id.ethnicity.into()));
            rec.values.insert("age".into(), AttrValue::Real(round2(age)));
            let (p, y, r) = (round2(pitch), round2(yaw), round2(roll));
            let pose = pose_norm(p, y, r);
            rec.values.insert("pose".into(), AttrValue::Real(pose));
            poses.push(pose);
            records.push(rec);
        }
    }
    let per = config.images_per_identity;
    let image_of = |i: usize, k: usize| format!("img{i:05}_{k}");

    let mut pairs = Vec::new();
    for n in 0..config.n_positive_pairs {
        let i = rng.random_range(0..identities.len());
        let a = rng.random_range(0..per);
        let b = (a + rng.random_range(1..per)) % per;
        let pose_mean = (poses[i * per + a] + poses[i * per + b]) / 2.0;
        let miss = rng.random::<f64>() < shifted(config.base_fnmr, &config.fnmr_shifts, &identities[i]);
        let d = if miss {
            rng.random_range(1.05..1.45)
        } else {
            rng.random_range(0.15..0.50) + 0.05 * (pose_mean / 40.0).min(1.0)
        };
        pairs.push(PairRecord {
            pair_id: format!("pos{n:06}"),
            image_a: image_of(i, a),
            image_b: image_of(i, b),
            ground_truth: Label::Same,
            distance: round4(d),
            predicted: None,
        });
    }
    for n in 0..config.n_negative_pairs {
        let i = rng.random_range(0..identities.len());
        // another identity of the same segment: same residue modulo `cells`
        let same_cell = config.n_identities.div_ceil(cells);
        let j = loop {
            let j = (rng.random_range(0..same_cell) * cells) + i % cells;
            if j < identities.len() && j != i {
                break j;
            }
        };
        let false_match = rng.random::<f64>() < shifted(config.base_fmr, &config.fmr_shifts, &identities[i]);
        let d = if false_match {
            rng.random_range(0.20..0.55)
        } else {
            rng.random_range(1.0..1.5)
        };
        pairs.push(PairRecord {
            pair_id: format!("neg{n:06}"),
            image_a: image_of(i, rng.random_range(0..per)),
            image_b: image_of(j, rng.random_range(0..per)),
            ground_truth: Label::Different,
            distance: round4(d),
            predicted: None,
        });
    }
    let images = ImageTable::new(records)?;
    Ok(SyntheticData {
        schema,
        images,
        pairs,
    })
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

impl SyntheticData {
    pub fn images_csv(&self) -> String {
        let mut out = String::from("image_id,identity_id,gender,ethnicity,age,pose\n");
        for r in self.images.records() {
            let level = |a: &str| match &r.values[a] {
                AttrValue::Level(l) => l.clone(),
                AttrValue::Real(v) => v.to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.image_id,
                r.identity_id,
                level("gender"),
                level("ethnicity"),
                r.real("age").unwrap_or_default(),
                r.real("pose").unwrap_or_default()
            );
        }
        out
    }

    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("pair_id,image_a,image_b,ground_truth,distance\n");
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.pair_id,
                p.image_a,
                p.image_b,
                p.ground_truth.as_str(),
                p.distance
            );
        }
        out
    }
}
