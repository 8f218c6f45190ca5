//! Verification threshold, per-group confusion statistics, fairness metrics and
//! the normalized-entropy diversity score.
//!
//! Group metrics are evaluated in exact rational arithmetic from the integer
//! confusion counts and rounded to `f64` once at the end, so they do not
//! depend on summation order or on the number of groups.

use std::collections::BTreeMap;

use num::{BigInt, BigRational, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::data::{Label, PairCovariates, PairRecord};
use crate::error::{Error, Result};

/// Optimized decision threshold: a pair is predicted `Same` iff `distance < threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub false_matches: usize,
}

/// Sweeps every distinct cut between sorted distances and keeps the one with
/// the most correct predictions. Ties go to fewer false matches, then to the
/// widest gap, then to the lowest threshold.
pub fn optimize_threshold(pairs: &[PairRecord]) -> Result<ThresholdChoice> {
    let n_pos = pairs.iter().filter(|p| p.ground_truth.is_same()).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegeneratePairs);
    }
    let mut sorted: Vec<(f64, bool)> = pairs
        .iter()
        .map(|p| (p.distance, p.ground_truth.is_same()))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (distinct value, positives at value, negatives at value)
    let mut levels: Vec<(f64, usize, usize)> = Vec::new();
    for (d, same) in sorted {
        match levels.last_mut() {
            Some(last) if last.0 == d => {
                if same {
                    last.1 += 1
                } else {
                    last.2 += 1
                }
            }
            _ => levels.push((d, usize::from(same), usize::from(!same))),
        }
    }

    // candidate k: the first k distinct values are predicted Same
    let mut best: Option<(usize, usize, f64, f64)> = None; // correct, fp, width, tau
    let (mut tp, mut fp) = (0usize, 0usize);
    for k in 0..=levels.len() {
        if k > 0 {
            tp += levels[k - 1].1;
            fp += levels[k - 1].2;
        }
        let correct = tp + (n_neg - fp);
        let (tau, width) = if k == 0 {
            (levels[0].0 / 2.0, levels[0].0)
        } else if k == levels.len() {
            let top = levels[k - 1].0;
            (top + top.max(1.0), 0.0)
        } else {
            let (lo, hi) = (levels[k - 1].0, levels[k].0);
            let mid = lo + (hi - lo) / 2.0;
            (if mid > lo { mid } else { hi }, hi - lo)
        };
        let better = match best {
            None => true,
            Some((bc, bfp, bw, _)) => {
                correct > bc || (correct == bc && (fp < bfp || (fp == bfp && width > bw)))
            }
        };
        if better {
            best = Some((correct, fp, width, tau));
        }
    }
    let (correct, false_matches, _, threshold) = best.expect("at least one candidate");
    Ok(ThresholdChoice {
        threshold,
        accuracy: correct as f64 / pairs.len() as f64,
        correct,
        false_matches,
    })
}

/// The provided prediction when present, otherwise `distance < threshold`.
pub fn predict(pair: &PairRecord, threshold: f64) -> Label {
    pair.predicted.unwrap_or(if pair.distance < threshold {
        Label::Same
    } else {
        Label::Different
    })
}

/// Ordered `(attribute, level)` pairs identifying a demographic segment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey(pub Vec<(String, String)>);

impl GroupKey {
    pub fn label(&self) -> String {
        self.0
            .iter()
            .map(|(_, l)| l.as_str())
            .collect::<Vec<_>>()
            .join(" x ")
    }
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(a, l)| format!("{a}={l}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: GroupKey,
    pub n_pos: u64,
    pub n_neg: u64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tmr: Option<f64>,
    pub fmr: Option<f64>,
    pub accuracy: f64,
    pub selection_rate: f64,
}

impl GroupStats {
    pub fn from_counts(group: GroupKey, tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let (n_pos, n_neg) = (tp + fn_, fp + tn);
        let n = (n_pos + n_neg) as f64;
        GroupStats {
            group,
            n_pos,
            n_neg,
            tp,
            fp,
            tn,
            fn_,
            tmr: (n_pos > 0).then(|| tp as f64 / n_pos as f64),
            fmr: (n_neg > 0).then(|| fp as f64 / n_neg as f64),
            accuracy: (tp + tn) as f64 / n,
            selection_rate: (tp + fp) as f64 / n,
        }
    }

    pub fn size(&self) -> u64 {
        self.n_pos + self.n_neg
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupConfusion {
    pub groups: Vec<GroupStats>,
    /// Groups observed with fewer than `min_support` pairs.
    pub excluded: Vec<GroupStats>,
}

/// Tallies confusion counts per group of the `grouping` attributes' pair levels.
pub fn group_confusion(
    pairs: &[PairRecord],
    covariates: &[PairCovariates],
    threshold: f64,
    grouping: &[String],
    min_support: u64,
) -> Result<GroupConfusion> {
    if pairs.len() != covariates.len() {
        return Err(Error::Precondition(format!(
            "{} pairs but {} covariate rows",
            pairs.len(),
            covariates.len()
        )));
    }
    let mut tally: BTreeMap<GroupKey, [u64; 4]> = BTreeMap::new();
    for (pair, cov) in pairs.iter().zip(covariates) {
        let key = GroupKey(
            grouping
                .iter()
                .map(|a| {
                    let level = cov.categorical.get(a).ok_or_else(|| {
                        Error::Precondition(format!("grouping attribute {a} is not categorical"))
                    })?;
                    Ok((a.clone(), level.clone()))
                })
                .collect::<Result<_>>()?,
        );
        let slot = match (pair.ground_truth, predict(pair, threshold)) {
            (Label::Same, Label::Same) => 0,
            (Label::Different, Label::Same) => 1,
            (Label::Different, Label::Different) => 2,
            (Label::Same, Label::Different) => 3,
        };
        tally.entry(key).or_default()[slot] += 1;
    }
    let mut out = GroupConfusion::default();
    for (key, [tp, fp, tn, fn_]) in tally {
        let stats = GroupStats::from_counts(key, tp, fp, tn, fn_);
        if stats.size() >= min_support {
            out.groups.push(stats);
        } else {
            out.excluded.push(stats);
        }
    }
    Ok(out)
}

fn frac(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("bounded rational")
}

fn spread_and_ratio(rates: &[BigRational]) -> (BigRational, BigRational) {
    let (Some(min), Some(max)) = (rates.iter().min(), rates.iter().max()) else {
        return (BigRational::zero(), BigRational::from_integer(1.into()));
    };
    let ratio = if max.is_zero() {
        BigRational::from_integer(1.into())
    } else {
        min / max
    };
    (max - min, ratio)
}

/// Population standard deviation of group accuracies.
pub fn degree_of_bias(groups: &[GroupStats]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::NoGroups);
    }
    let g = BigRational::from_integer(BigInt::from(groups.len()));
    let accs: Vec<BigRational> = groups.iter().map(|s| frac(s.tp + s.tn, s.size())).collect();
    let mean = accs.iter().fold(BigRational::zero(), |acc, a| acc + a) / &g;
    let var = accs
        .iter()
        .map(|a| {
            let d = a - &mean;
            &d * &d
        })
        .fold(BigRational::zero(), |acc, x| acc + x)
        / &g;
    Ok(to_f64(&var).sqrt())
}

/// `(max - min, min / max)` of the predicted-Same rates.
pub fn demographic_parity(groups: &[GroupStats]) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(Error::NoGroups);
    }
    let rates: Vec<BigRational> = groups.iter().map(|s| frac(s.tp + s.fp, s.size())).collect();
    let (d, r) = spread_and_ratio(&rates);
    Ok((to_f64(&d), to_f64(&r)))
}

/// Worst spread and worst ratio over the TMRs and FMRs. Groups lacking
/// positives (negatives) do not contribute a TMR (FMR).
pub fn equalized_odds(groups: &[GroupStats]) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(Error::NoGroups);
    }
    let tmrs: Vec<BigRational> = groups
        .iter()
        .filter(|s| s.n_pos > 0)
        .map(|s| frac(s.tp, s.n_pos))
        .collect();
    let fmrs: Vec<BigRational> = groups
        .iter()
        .filter(|s| s.n_neg > 0)
        .map(|s| frac(s.fp, s.n_neg))
        .collect();
    let (dt, rt) = spread_and_ratio(&tmrs);
    let (df, rf) = spread_and_ratio(&fmrs);
    Ok((to_f64(&dt.max(df)), to_f64(&rt.min(rf))))
}

/// Unweighted mean of group accuracies: every segment counts once.
pub fn micro_average_accuracy(groups: &[GroupStats]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::NoGroups);
    }
    let sum = groups
        .iter()
        .map(|s| frac(s.tp + s.tn, s.size()))
        .fold(BigRational::zero(), |acc, a| acc + a);
    Ok(to_f64(&(sum / BigRational::from_integer(BigInt::from(groups.len())))))
}

/// Entropy of the category frequencies normalized by `ln(n_categories)`.
///
/// `frequencies` may be raw counts or proportions; categories missing from
/// the table count as zero.
pub fn diversity(frequencies: &[f64], n_categories: usize) -> Result<f64> {
    if n_categories < 2 {
        return Err(Error::DegenerateSupport(n_categories));
    }
    if frequencies.len() > n_categories {
        return Err(Error::Precondition(format!(
            "{} frequencies for {n_categories} categories",
            frequencies.len()
        )));
    }
    if frequencies.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Precondition("frequencies must be finite and nonnegative".into()));
    }
    // sorted so the result does not depend on category order
    let mut nonzero: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
    nonzero.sort_by(f64::total_cmp);
    let total: f64 = nonzero.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Precondition("frequencies sum to zero".into()));
    }
    if nonzero.len() == n_categories && nonzero.iter().all(|&f| f == nonzero[0]) {
        return Ok(1.0);
    }
    let entropy: f64 = nonzero
        .iter()
        .map(|&f| {
            let p = f / total;
            -p * p.ln()
        })
        .sum();
    // only an exactly uniform table reaches 1
    let below_one = 1.0 - f64::EPSILON / 2.0;
    Ok((entropy / (n_categories as f64).ln() + 0.0).clamp(0.0, below_one))
}

/// Diversity of a list of observed category labels.
pub fn diversity_of<'a, I>(labels: I, n_categories: usize) -> Result<f64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1.0;
    }
    let freqs: Vec<f64> = counts.into_values().collect();
    diversity(&freqs, n_categories)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub dob: f64,
    pub dpd: f64,
    pub eod: f64,
    pub dpr: f64,
    pub eor: f64,
    pub micro_accuracy: f64,
    pub per_group: Vec<GroupStats>,
    pub threshold: f64,
    pub excluded_groups: Vec<GroupKey>,
}

pub fn fairness_report(confusion: &GroupConfusion, threshold: f64) -> Result<FairnessReport> {
    let groups = &confusion.groups;
    let (dpd, dpr) = demographic_parity(groups)?;
    let (eod, eor) = equalized_odds(groups)?;
    Ok(FairnessReport {
        dob: degree_of_bias(groups)?,
        dpd,
        eod,
        dpr,
        eor,
        micro_accuracy: micro_average_accuracy(groups)?,
        per_group: groups.clone(),
        threshold,
        excluded_groups: confusion.excluded.iter().map(|s| s.group.clone()).collect(),
    })
}
