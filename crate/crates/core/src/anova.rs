//! Sequential (Type I) ANOVA of embedding distances with per-factor eta squared.

use serde::{Deserialize, Serialize};

use crate::data::{PairCovariates, PairRecord};
use crate::error::{Error, Result};
use crate::logit::Subset;
use crate::schema::{AttributeKind, AttributeSchema, CROSS_LEVEL};

/// Relative norm below which a column is considered linearly dependent.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaFactor {
    pub name: String,
    pub df: usize,
    pub sum_squares: f64,
    pub eta_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub subset: Subset,
    pub n: usize,
    pub factors: Vec<AnovaFactor>,
    pub residual_ss: f64,
    pub residual_df: usize,
    pub total_ss: f64,
    pub r_squared: f64,
    /// Rank problems encountered; dropped factors are listed here.
    pub warnings: Vec<String>,
}

impl AnovaTable {
    pub fn eta_squared(&self, name: &str) -> Option<f64> {
        self.factors.iter().find(|f| f.name == name).map(|f| f.eta_squared)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AnovaOptions {
    /// Append two-way interactions between categorical factors after the main effects.
    pub interactions: bool,
}

/// One named block of regressors entered together.
#[derive(Debug, Clone)]
pub struct FactorBlock {
    pub name: String,
    pub columns: Vec<Vec<f64>>,
}

/// Dummy columns (observed non-reference levels) or the raw continuous column.
fn factor_block(
    schema: &AttributeSchema,
    name: &str,
    rows: &[&PairCovariates],
) -> Result<FactorBlock> {
    let attr = schema.require(name)?;
    let columns = match &attr.kind {
        AttributeKind::Categorical { levels, reference } => {
            let observed: Vec<&str> = rows
                .iter()
                .map(|c| {
                    c.categorical
                        .get(name)
                        .map(String::as_str)
                        .ok_or_else(|| Error::Precondition(format!("covariate {name} missing")))
                })
                .collect::<Result<_>>()?;
            let mut present: Vec<&str> = levels
                .iter()
                .map(String::as_str)
                .chain(std::iter::once(CROSS_LEVEL))
                .filter(|l| observed.contains(l))
                .collect();
            // baseline: the reference level when observed, else the first observed level
            match present.iter().position(|l| l == reference) {
                Some(i) => {
                    present.remove(i);
                }
                None if !present.is_empty() => {
                    present.remove(0);
                }
                None => {}
            }
            present
                .iter()
                .map(|level| {
                    observed
                        .iter()
                        .map(|o| f64::from(u8::from(o == level)))
                        .collect()
                })
                .collect()
        }
        AttributeKind::Continuous { .. } => vec![rows
            .iter()
            .map(|c| {
                c.continuous
                    .get(name)
                    .copied()
                    .ok_or_else(|| Error::Precondition(format!("covariate {name} missing")))
            })
            .collect::<Result<Vec<f64>>>()?],
    };
    Ok(FactorBlock {
        name: name.to_string(),
        columns,
    })
}

/// Type I decomposition of `response` over blocks entered in order.
///
/// Each block's columns are Gram-Schmidt orthogonalized against the intercept
/// and all previously accepted columns; its sum of squares is the squared
/// norm of the response's projection on the new directions.
pub fn sequential_anova(
    response: &[f64],
    blocks: &[FactorBlock],
    subset: Subset,
) -> Result<AnovaTable> {
    let n = response.len();
    if n == 0 {
        return Err(Error::EmptySubset);
    }
    if response.iter().any(|d| !d.is_finite()) {
        return Err(Error::Precondition("distances must be finite".into()));
    }
    let mean = response.iter().sum::<f64>() / n as f64;
    let mut resid: Vec<f64> = response.iter().map(|d| d - mean).collect();
    let total_ss = dot(&resid, &resid);

    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    let mut factors = Vec::new();
    let mut warnings = Vec::new();
    for block in blocks {
        let mut df = 0;
        let mut ss = 0.0;
        for col in &block.columns {
            if col.len() != n {
                return Err(Error::Precondition(format!("{}: column length mismatch", block.name)));
            }
            let norm0 = dot(col, col).sqrt();
            let mut v = col.clone();
            for _ in 0..2 {
                for q in &basis {
                    let c = dot(q, &v);
                    axpy(-c, q, &mut v);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm0 == 0.0 || norm <= RANK_TOL * norm0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let c = dot(&v, &resid);
            axpy(-c, &v, &mut resid);
            ss += c * c;
            df += 1;
            basis.push(v);
        }
        if df == 0 {
            warnings.push(format!(
                "factor {} dropped: no columns independent of earlier factors",
                block.name
            ));
            continue;
        }
        if df < block.columns.len() {
            warnings.push(format!(
                "factor {}: {} of {} columns collinear with earlier factors",
                block.name,
                block.columns.len() - df,
                block.columns.len()
            ));
        }
        factors.push(AnovaFactor {
            name: block.name.clone(),
            df,
            sum_squares: ss,
            eta_squared: 0.0,
        });
    }
    for f in &mut factors {
        f.eta_squared = if total_ss > 0.0 { f.sum_squares / total_ss } else { 0.0 };
    }
    let r_squared = factors.iter().map(|f| f.eta_squared).sum();
    Ok(AnovaTable {
        subset,
        n,
        residual_ss: dot(&resid, &resid),
        residual_df: n.saturating_sub(basis.len()),
        total_ss,
        r_squared,
        factors,
        warnings,
    })
}

/// ANOVA of raw pair distances on the attributes in `factor_order`.
pub fn anova_distances(
    pairs: &[PairRecord],
    covariates: &[PairCovariates],
    schema: &AttributeSchema,
    subset: Subset,
    factor_order: &[String],
    options: AnovaOptions,
) -> Result<AnovaTable> {
    let idx: Vec<usize> = (0..pairs.len())
        .filter(|&i| subset.matches(pairs[i].ground_truth))
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptySubset);
    }
    let rows: Vec<&PairCovariates> = idx.iter().map(|&i| &covariates[i]).collect();
    let response: Vec<f64> = idx.iter().map(|&i| pairs[i].distance).collect();
    let mut blocks = factor_order
        .iter()
        .map(|name| factor_block(schema, name, &rows))
        .collect::<Result<Vec<_>>>()?;
    if options.interactions {
        let categorical: Vec<usize> = factor_order
            .iter()
            .enumerate()
            .filter(|(_, n)| schema.get(n).is_some_and(|a| a.is_categorical()))
            .map(|(i, _)| i)
            .collect();
        let mut extra = Vec::new();
        for (a, &i) in categorical.iter().enumerate() {
            for &j in &categorical[a + 1..] {
                let (bi, bj) = (&blocks[i], &blocks[j]);
                let columns = bi
                    .columns
                    .iter()
                    .flat_map(|ci| {
                        bj.columns
                            .iter()
                            .map(move |cj| ci.iter().zip(cj).map(|(x, y)| x * y).collect())
                    })
                    .collect();
                extra.push(FactorBlock {
                    name: format!("{}:{}", bi.name, bj.name),
                    columns,
                });
            }
        }
        blocks.extend(extra);
    }
    sequential_anova(&response, &blocks, subset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Range of each factor's eta squared over every entry order of `factor_order`.
pub fn order_sensitivity(
    pairs: &[PairRecord],
    covariates: &[PairCovariates],
    schema: &AttributeSchema,
    subset: Subset,
    factor_order: &[String],
) -> Result<Vec<EtaRange>> {
    let mut ranges: Vec<EtaRange> = factor_order
        .iter()
        .map(|n| EtaRange {
            name: n.clone(),
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        })
        .collect();
    let mut order = factor_order.to_vec();
    let mut stack = vec![0usize; order.len()];
    let mut visit = |order: &[String]| -> Result<()> {
        let table = anova_distances(pairs, covariates, schema, subset, order, AnovaOptions::default())?;
        for r in &mut ranges {
            let eta = table.eta_squared(&r.name).unwrap_or(0.0);
            r.min = r.min.min(eta);
            r.max = r.max.max(eta);
        }
        Ok(())
    };
    // Heap's algorithm
    visit(&order)?;
    let mut i = 0;
    while i < order.len() {
        if stack[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(stack[i], i);
            }
            visit(&order)?;
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(ranges)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
