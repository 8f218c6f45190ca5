#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num::{BigInt, BigRational, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use verifair::data::{Label, PairCovariates, PairRecord};
use verifair::logit::{sigmoid, DesignFactor, DesignMatrix, Subset};
use verifair::schema::AttributeSchema;

pub const SCHEMA: &str = r#"{
  "attributes": [
    {"name": "ethnicity", "kind": "categorical", "scope": "identity",
     "levels": ["Caucasian", "African", "Asian", "Indian"], "reference": "Caucasian"},
    {"name": "gender", "kind": "categorical", "scope": "identity",
     "levels": ["Male", "Female"], "reference": "Male"},
    {"name": "age", "kind": "continuous", "unit": "years", "scope": "image"},
    {"name": "pose", "kind": "continuous", "unit": "degrees", "scope": "image"}
  ]
}"#;

pub fn schema() -> AttributeSchema {
    AttributeSchema::from_json(SCHEMA).unwrap()
}

pub fn pair(id: usize, truth: Label, distance: f64) -> PairRecord {
    PairRecord {
        pair_id: format!("p{id:05}"),
        image_a: format!("a{id}"),
        image_b: format!("b{id}"),
        ground_truth: truth,
        distance,
        predicted: None,
    }
}

pub fn covariates(id: usize, cat: &[(&str, &str)], cont: &[(&str, f64)]) -> PairCovariates {
    PairCovariates {
        pair_id: format!("p{id:05}"),
        categorical: cat.iter().map(|(a, l)| (a.to_string(), l.to_string())).collect(),
        continuous: cont.iter().map(|(a, v)| (a.to_string(), *v)).collect(),
    }
}

/// Design for a simulated logit: intercept, a three-level categorical `c`
/// (reference "r", levels "u", "v") and one continuous `z`, all built by hand.
pub struct SimulatedLogit {
    pub design: DesignMatrix,
    pub beta: Vec<f64>,
}

pub fn simulate_logit(n: usize, beta: &[f64; 4], seed: u64) -> SimulatedLogit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 4);
    let mut y = DVector::zeros(n);
    for r in 0..n {
        let level = rng.random_range(0..3);
        let z: f64 = rng.random_range(-1.7..1.7);
        x[(r, 0)] = 1.0;
        x[(r, 1)] = (level == 1) as u8 as f64;
        x[(r, 2)] = (level == 2) as u8 as f64;
        x[(r, 3)] = z;
        let eta = beta[0] + beta[1] * x[(r, 1)] + beta[2] * x[(r, 2)] + beta[3] * z;
        y[r] = (rng.random::<f64>() < sigmoid(eta)) as u8 as f64;
    }
    SimulatedLogit {
        design: DesignMatrix {
            x,
            y,
            labels: vec!["(Intercept)".into(), "c=u".into(), "c=v".into(), "z".into()],
            factors: vec![
                DesignFactor::Categorical {
                    attribute: "c".into(),
                    reference: "r".into(),
                    levels: vec![("u".into(), 1), ("v".into(), 2)],
                },
                DesignFactor::Continuous {
                    attribute: "z".into(),
                    unit: "unit".into(),
                    column: 3,
                    center: 0.0,
                    scale: 1.0,
                },
            ],
            subset: Subset::Negatives,
        },
        beta: beta.to_vec(),
    }
}

/// The 2x2 saturated design: x = 1 has 30/40 positives, x = 0 has 10/40.
pub fn two_by_two() -> DesignMatrix {
    let mut rows = Vec::new();
    for (x, pos) in [(1.0, 30), (0.0, 10)] {
        for i in 0..40 {
            rows.push((x, if i < pos { 1.0 } else { 0.0 }));
        }
    }
    let n = rows.len();
    DesignMatrix {
        x: DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { rows[r].0 }),
        y: DVector::from_fn(n, |r, _| rows[r].1),
        labels: vec!["(Intercept)".into(), "x=1".into()],
        factors: vec![DesignFactor::Categorical {
            attribute: "x".into(),
            reference: "0".into(),
            levels: vec![("1".into(), 1)],
        }],
        subset: Subset::Negatives,
    }
}

pub fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Brute-force confusion tally: `(tp, fp, tn, fn)` per group label string.
pub fn tally_oracle(
    pairs: &[PairRecord],
    covs: &[PairCovariates],
    threshold: f64,
    grouping: &[String],
) -> BTreeMap<String, [u64; 4]> {
    let mut out: BTreeMap<String, [u64; 4]> = BTreeMap::new();
    for (p, c) in pairs.iter().zip(covs) {
        let key = grouping
            .iter()
            .map(|g| c.categorical[g].as_str())
            .collect::<Vec<_>>()
            .join(" x ");
        let same = match p.predicted {
            Some(l) => l == Label::Same,
            None => p.distance < threshold,
        };
        let e = out.entry(key).or_default();
        match (p.ground_truth == Label::Same, same) {
            (true, true) => e[0] += 1,
            (false, true) => e[1] += 1,
            (false, false) => e[2] += 1,
            (true, false) => e[3] += 1,
        }
    }
    out
}

/// Fairness metrics from raw counts, in the order
/// (dob, dpd, dpr, eod, eor, micro_accuracy). Variance uses E[x²] − E[x]².
pub fn metrics_oracle(counts: &[[u64; 4]]) -> [f64; 6] {
    let g = counts.len() as u64;
    let acc: Vec<BigRational> = counts
        .iter()
        .map(|[tp, fp, tn, fn_]| ratio(tp + tn, tp + fp + tn + fn_))
        .collect();
    let sel: Vec<BigRational> = counts
        .iter()
        .map(|[tp, fp, tn, fn_]| ratio(tp + fp, tp + fp + tn + fn_))
        .collect();
    let tmr: Vec<BigRational> = counts
        .iter()
        .filter(|c| c[0] + c[3] > 0)
        .map(|c| ratio(c[0], c[0] + c[3]))
        .collect();
    let fmr: Vec<BigRational> = counts
        .iter()
        .filter(|c| c[1] + c[2] > 0)
        .map(|c| ratio(c[1], c[1] + c[2]))
        .collect();
    let mean = acc.iter().fold(BigRational::zero(), |s, a| s + a) / ratio(g, 1);
    let mean_sq = acc.iter().fold(BigRational::zero(), |s, a| s + a * a) / ratio(g, 1);
    let var = mean_sq - &mean * &mean;
    let span = |v: &[BigRational]| -> (BigRational, BigRational) {
        if v.is_empty() {
            return (BigRational::zero(), ratio(1, 1));
        }
        let mut lo = v[0].clone();
        let mut hi = v[0].clone();
        for x in v {
            if *x < lo {
                lo = x.clone();
            }
            if *x > hi {
                hi = x.clone();
            }
        }
        let r = if hi.is_zero() { ratio(1, 1) } else { &lo / &hi };
        (hi - lo, r)
    };
    let (dpd, dpr) = span(&sel);
    let (dt, rt) = span(&tmr);
    let (df, rf) = span(&fmr);
    let f = |r: &BigRational| r.to_f64().unwrap();
    [
        f(&var).sqrt(),
        f(&dpd),
        f(&dpr),
        f(if dt > df { &dt } else { &df }),
        f(if rt < rf { &rt } else { &rf }),
        f(&mean),
    ]
}

/// Random pairs over the four-attribute schema. Distances follow a logit in
/// the covariates so that a threshold of 0.75 yields both predicted classes
/// in each subset.
pub fn random_pairs(n: usize, seed: u64) -> (Vec<PairRecord>, Vec<PairCovariates>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eth = ["Caucasian", "African", "Asian", "Indian"];
    let genders = ["Male", "Female"];
    let mut pairs = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    for i in 0..n {
        let e = rng.random_range(0..4);
        let g = rng.random_range(0..2);
        let age: f64 = rng.random_range(18.0..70.0);
        let pose: f64 = rng.random_range(0.0..45.0);
        let same = rng.random_bool(0.5);
        let eta = if same { 1.0 } else { -1.2 } + 0.8 * (e == 1) as u8 as f64 - 0.4 * g as f64
            + 0.02 * (age - 40.0)
            - 0.01 * pose;
        let accept = rng.random::<f64>() < sigmoid(eta);
        let d = if accept { 0.3 } else { 1.2 } + rng.random_range(0.0..0.4);
        let truth = if same { Label::Same } else { Label::Different };
        pairs.push(pair(i, truth, d));
        covs.push(covariates(
            i,
            &[("ethnicity", eth[e]), ("gender", genders[g])],
            &[("age", age), ("pose", pose)],
        ));
    }
    (pairs, covs)
}

pub const THRESHOLD: f64 = 0.75;
