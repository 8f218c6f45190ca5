//! TMR/FMR logit regressions: dummy-coded design, IRLS maximum likelihood,
//! average marginal effects with delta-method inference.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Label, PairCovariates, PairRecord};
use crate::error::{Error, Result};
use crate::metrics::predict;
use crate::schema::{AttributeKind, AttributeSchema, CROSS_LEVEL};

/// Coefficients beyond this magnitude are treated as divergence.
const SEPARATION_BOUND: f64 = 30.0;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Positives,
    Negatives,
}

impl Subset {
    pub fn matches(self, truth: Label) -> bool {
        match self {
            Subset::Positives => truth == Label::Same,
            Subset::Negatives => truth == Label::Different,
        }
    }

    /// Rate modelled by the logit on this subset.
    pub fn outcome(self) -> &'static str {
        match self {
            Subset::Positives => "TMR",
            Subset::Negatives => "FMR",
        }
    }
}

/// How one schema attribute is laid out in the design columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignFactor {
    Categorical {
        attribute: String,
        reference: String,
        /// Non-reference levels and their column indices.
        levels: Vec<(String, usize)>,
    },
    Continuous {
        attribute: String,
        unit: String,
        column: usize,
        /// Column = (raw - center) / scale.
        center: f64,
        scale: f64,
    },
}

impl DesignFactor {
    pub fn attribute(&self) -> &str {
        match self {
            DesignFactor::Categorical { attribute, .. } | DesignFactor::Continuous { attribute, .. } => {
                attribute
            }
        }
    }

    fn columns(&self) -> Vec<usize> {
        match self {
            DesignFactor::Categorical { levels, .. } => levels.iter().map(|(_, c)| *c).collect(),
            DesignFactor::Continuous { column, .. } => vec![*column],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignOptions {
    /// Center and scale continuous columns to zero mean, unit variance.
    pub standardize: bool,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { standardize: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub labels: Vec<String>,
    pub factors: Vec<DesignFactor>,
    pub subset: Subset,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Copy with the given rows (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
            ..self.clone()
        }
    }
}

/// Builds the dummy-coded design for one subset; the response is 1 when the
/// pair is predicted `Same`.
pub fn build_design(
    pairs: &[PairRecord],
    covariates: &[PairCovariates],
    threshold: f64,
    schema: &AttributeSchema,
    subset: Subset,
    options: DesignOptions,
) -> Result<DesignMatrix> {
    if pairs.len() != covariates.len() {
        return Err(Error::Precondition("pairs and covariates differ in length".into()));
    }
    let rows: Vec<usize> = (0..pairs.len())
        .filter(|&i| subset.matches(pairs[i].ground_truth))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptySubset);
    }
    let n = rows.len();
    let y = DVector::from_iterator(
        n,
        rows.iter()
            .map(|&i| f64::from(u8::from(predict(&pairs[i], threshold).is_same()))),
    );

    let mut labels = vec!["(Intercept)".to_string()];
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut factors = Vec::new();
    for attr in &schema.attributes {
        match &attr.kind {
            AttributeKind::Categorical { levels, reference } => {
                let observed: Vec<&str> = rows
                    .iter()
                    .map(|&i| {
                        covariates[i].categorical.get(&attr.name).map(String::as_str).ok_or_else(
                            || Error::Precondition(format!("covariate {} missing", attr.name)),
                        )
                    })
                    .collect::<Result<_>>()?;
                let mut coded = Vec::new();
                let cross_seen = observed.contains(&CROSS_LEVEL);
                let candidates = levels
                    .iter()
                    .map(String::as_str)
                    .filter(|l| l != reference)
                    .chain(cross_seen.then_some(CROSS_LEVEL));
                for level in candidates {
                    let col: Vec<f64> = observed
                        .iter()
                        .map(|o| f64::from(u8::from(*o == level)))
                        .collect();
                    let label = format!("{}={level}", attr.name);
                    if col.iter().all(|&v| v == 0.0) {
                        return Err(Error::ConstantColumn(label));
                    }
                    coded.push((level.to_string(), columns.len()));
                    labels.push(label);
                    columns.push(col);
                }
                factors.push(DesignFactor::Categorical {
                    attribute: attr.name.clone(),
                    reference: reference.clone(),
                    levels: coded,
                });
            }
            AttributeKind::Continuous { unit } => {
                let raw: Vec<f64> = rows
                    .iter()
                    .map(|&i| {
                        covariates[i].continuous.get(&attr.name).copied().ok_or_else(|| {
                            Error::Precondition(format!("covariate {} missing", attr.name))
                        })
                    })
                    .collect::<Result<_>>()?;
                let mean = raw.iter().sum::<f64>() / n as f64;
                let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                if !(var > 0.0) {
                    return Err(Error::ConstantColumn(attr.name.clone()));
                }
                let (center, scale) = if options.standardize {
                    (mean, var.sqrt())
                } else {
                    (0.0, 1.0)
                };
                factors.push(DesignFactor::Continuous {
                    attribute: attr.name.clone(),
                    unit: unit.clone(),
                    column: columns.len(),
                    center,
                    scale,
                });
                labels.push(attr.name.clone());
                columns.push(raw.iter().map(|v| (v - center) / scale).collect());
            }
        }
    }
    let x = DMatrix::from_fn(n, columns.len(), |r, c| columns[c][r]);
    Ok(DesignMatrix {
        x,
        y,
        labels,
        factors,
        subset,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub beta: Vec<f64>,
    /// Row-major inverse of the observed information at `beta`.
    pub covariance: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    /// Log-likelihood after each accepted iteration, starting at beta = 0.
    /// Non-decreasing up to summation rounding.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_max_norm: f64,
    pub labels: Vec<String>,
}

impl LogitFit {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let k = self.beta.len();
        DMatrix::from_fn(k, k, |i, j| self.covariance[i][j])
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.beta.len())
            .map(|i| self.covariance[i][i].max(0.0).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn log_likelihood(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter().zip(y.iter()).map(|(&e, &yi)| yi * e - softplus(e)).sum()
}

/// Score vector and observed information `X^T W X` at `beta`.
fn score_and_information(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let (n, k) = x.shape();
    let eta = x * beta;
    let mut grad = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    for r in 0..n {
        let p = sigmoid(eta[r]);
        let w = p * (1.0 - p);
        let resid = y[r] - p;
        for i in 0..k {
            let xi = x[(r, i)];
            if xi == 0.0 {
                continue;
            }
            grad[i] += resid * xi;
            let wxi = w * xi;
            for j in 0..=i {
                info[(i, j)] += wxi * x[(r, j)];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            info[(j, i)] = info[(i, j)];
        }
    }
    (grad, info)
}

/// Maximum-likelihood logit fit by Newton-Raphson (IRLS) with step halving.
pub fn fit_logit(design: &DesignMatrix, options: FitOptions) -> Result<LogitFit> {
    let (n, k) = design.x.shape();
    if n <= k {
        return Err(Error::Precondition(format!("{n} rows for {k} columns")));
    }
    let positives = design.y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::Precondition("response has a single class".into()));
    }
    let (x, y) = (&design.x, &design.y);
    let mut beta = DVector::zeros(k);
    let mut ll = log_likelihood(x, y, &beta);
    let mut trace = vec![ll];
    let mut norms = vec![0.0];
    let mut converged = false;
    let mut iterations = 0;
    let (mut grad, mut info) = score_and_information(x, y, &beta);

    while iterations < options.max_iter {
        if grad.amax() < options.tol {
            converged = true;
            break;
        }
        let chol = Cholesky::new(info.clone()).ok_or(Error::SingularInformation)?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_ll = log_likelihood(x, y, &candidate);
        let mut halvings = 0;
        // summation rounding in the log-likelihood; smaller changes are noise
        let slack = 4.0 * n as f64 * f64::EPSILON * (1.0 + ll.abs());
        while !(cand_ll >= ll - slack) && halvings < MAX_HALVINGS {
            t /= 2.0;
            candidate = &beta + &step * t;
            cand_ll = log_likelihood(x, y, &candidate);
            halvings += 1;
        }
        iterations += 1;
        if !(cand_ll >= ll - slack) {
            // no ascent along the Newton direction: numerically at the optimum
            break;
        }
        beta = candidate;
        ll = cand_ll;
        trace.push(ll);
        norms.push(beta.norm());
        if let Some((j, b)) = beta.iter().enumerate().find(|(_, b)| b.abs() > SEPARATION_BOUND) {
            return Err(Error::QuasiSeparation {
                iteration: iterations,
                detail: format!("|{}| = {:.1} exceeds {SEPARATION_BOUND}", design.labels[j], b.abs()),
            });
        }
        (grad, info) = score_and_information(x, y, &beta);
    }
    if !converged && grad.amax() < options.tol {
        converged = true;
    }
    if converged {
        // one Newton step past the tolerance; quadratic convergence makes the
        // reported estimates accurate far below `tol` at the cost of one solve
        if let Some(chol) = Cholesky::new(info.clone()) {
            let candidate = &beta + chol.solve(&grad);
            let cand_ll = log_likelihood(x, y, &candidate);
            let (cand_grad, cand_info) = score_and_information(x, y, &candidate);
            let slack = 4.0 * n as f64 * f64::EPSILON * (1.0 + ll.abs());
            if cand_ll >= ll - slack && cand_grad.amax() <= grad.amax() {
                beta = candidate;
                ll = cand_ll;
                trace.push(ll);
                (grad, info) = (cand_grad, cand_info);
            }
        }
    }
    if !converged && iterations >= options.max_iter {
        let tail = &norms[norms.len().saturating_sub(3)..];
        if tail.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::QuasiSeparation {
                iteration: iterations,
                detail: "coefficient norm still increasing at max_iter".into(),
            });
        }
    }
    let covariance = Cholesky::new(info)
        .ok_or(Error::SingularInformation)?
        .inverse();
    Ok(LogitFit {
        beta: beta.iter().copied().collect(),
        covariance: (0..k)
            .map(|i| (0..k).map(|j| covariance[(i, j)]).collect())
            .collect(),
        log_likelihood: ll,
        log_likelihood_trace: trace,
        iterations,
        converged,
        gradient_max_norm: grad.amax(),
        labels: design.labels.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p: f64,
}

/// Two-sided normal p-value for `estimate / std_error`.
pub fn two_sided_p(estimate: f64, std_error: f64) -> (f64, f64) {
    if std_error > 0.0 {
        let z = estimate / std_error;
        (z, statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0))
    } else if estimate == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(estimate), 0.0)
    }
}

/// Coefficients mapped back to original continuous units, with their covariance.
pub fn original_scale(fit: &LogitFit, design: &DesignMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let k = fit.beta.len();
    // beta_orig = A beta_std
    let mut a = DMatrix::<f64>::identity(k, k);
    for f in &design.factors {
        if let DesignFactor::Continuous {
            column,
            center,
            scale,
            ..
        } = f
        {
            a[(*column, *column)] = 1.0 / scale;
            a[(0, *column)] = -center / scale;
        }
    }
    let beta = &a * fit.beta_vector();
    let cov = &a * fit.covariance_matrix() * a.transpose();
    (beta, cov)
}

/// Coefficient table in original units.
pub fn coefficient_table(fit: &LogitFit, design: &DesignMatrix) -> Vec<CoefficientRow> {
    let (beta, cov) = original_scale(fit, design);
    fit.labels
        .iter()
        .enumerate()
        .map(|(i, term)| {
            let se = cov[(i, i)].max(0.0).sqrt();
            let (z, p) = two_sided_p(beta[i], se);
            CoefficientRow {
                term: term.clone(),
                estimate: beta[i],
                std_error: se,
                z,
                p,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffect {
    pub attribute: String,
    /// Level for categorical attributes.
    pub level: Option<String>,
    /// Reference level for categorical attributes.
    pub reference: Option<String>,
    /// Unit for continuous attributes; the effect is per one original unit.
    pub unit: Option<String>,
    /// Change in probability (proportion, not percent).
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl MarginalEffect {
    pub fn term(&self) -> String {
        match &self.level {
            Some(l) => format!("{}={l}", self.attribute),
            None => self.attribute.clone(),
        }
    }
}

/// Point estimates and gradients (w.r.t. beta) of every average marginal effect.
fn marginal_effect_parts(
    beta: &DVector<f64>,
    design: &DesignMatrix,
) -> Vec<(usize, Option<String>, f64, DVector<f64>)> {
    let (n, k) = design.x.shape();
    let eta = &design.x * beta;
    let mut out = Vec::new();
    for (fi, factor) in design.factors.iter().enumerate() {
        match factor {
            DesignFactor::Categorical { levels, .. } => {
                let cols = factor.columns();
                // linear predictor with the factor at its reference level
                let base: Vec<f64> = (0..n)
                    .map(|r| eta[r] - cols.iter().map(|&c| design.x[(r, c)] * beta[c]).sum::<f64>())
                    .collect();
                for (level, col) in levels {
                    let mut est = 0.0;
                    let mut grad = DVector::zeros(k);
                    for (r, &b0) in base.iter().enumerate() {
                        let p1 = sigmoid(b0 + beta[*col]);
                        let p0 = sigmoid(b0);
                        let (d1, d0) = (p1 * (1.0 - p1), p0 * (1.0 - p0));
                        est += p1 - p0;
                        for j in 0..k {
                            if cols.contains(&j) {
                                continue;
                            }
                            grad[j] += (d1 - d0) * design.x[(r, j)];
                        }
                        grad[*col] += d1;
                    }
                    out.push((fi, Some(level.clone()), est / n as f64, grad / n as f64));
                }
            }
            DesignFactor::Continuous { column, scale, .. } => {
                let b = beta[*column];
                let mut mean_d = 0.0;
                let mut grad = DVector::zeros(k);
                for r in 0..n {
                    let p = sigmoid(eta[r]);
                    let d = p * (1.0 - p);
                    let dd = d * (1.0 - 2.0 * p);
                    mean_d += d;
                    for j in 0..k {
                        grad[j] += b * dd * design.x[(r, j)];
                    }
                }
                grad[*column] += mean_d;
                let est = b * mean_d / n as f64 / scale;
                out.push((fi, None, est, grad / (n as f64 * scale)));
            }
        }
    }
    out
}

/// Average marginal effect of every non-reference level and continuous
/// attribute, with delta-method standard errors.
pub fn marginal_effects(fit: &LogitFit, design: &DesignMatrix, alpha: f64) -> Result<Vec<MarginalEffect>> {
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    let beta = fit.beta_vector();
    let cov = fit.covariance_matrix();
    Ok(marginal_effect_parts(&beta, design)
        .into_iter()
        .map(|(fi, level, est, grad)| {
            let var = (grad.transpose() * &cov * &grad)[(0, 0)];
            let se = var.max(0.0).sqrt();
            let (z, p) = two_sided_p(est, se);
            let (reference, unit) = match &design.factors[fi] {
                DesignFactor::Categorical { reference, .. } => (Some(reference.clone()), None),
                DesignFactor::Continuous { unit, .. } => (None, Some(unit.clone())),
            };
            MarginalEffect {
                attribute: design.factors[fi].attribute().to_string(),
                level,
                reference,
                unit,
                estimate: est,
                std_error: se,
                z,
                p_value: p,
                significant: p < alpha,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub n_resamples: usize,
    /// Resamples whose refit failed (dropped level, separation).
    pub n_failed: usize,
    /// Standard deviation of each marginal effect across resamples, in
    /// `marginal_effects` order.
    pub std_errors: Vec<f64>,
}

/// Nonparametric row bootstrap of the marginal effects. Resample `i` draws
/// from its own ChaCha stream so the result does not depend on thread count.
pub fn bootstrap_marginal_effects(
    design: &DesignMatrix,
    options: FitOptions,
    n_resamples: usize,
    seed: u64,
) -> BootstrapSummary {
    let n = design.nrows();
    let draws: Vec<Option<Vec<f64>>> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = design.select_rows(&rows);
            let fit = fit_logit(&resampled, options).ok().filter(|f| f.converged)?;
            Some(
                marginal_effect_parts(&fit.beta_vector(), &resampled)
                    .into_iter()
                    .map(|(_, _, est, _)| est)
                    .collect(),
            )
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let n_effects = ok.first().map_or(0, |v| v.len());
    let std_errors = (0..n_effects)
        .map(|e| {
            let m = ok.len() as f64;
            let mean = ok.iter().map(|v| v[e]).sum::<f64>() / m;
            (ok.iter().map(|v| (v[e] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    BootstrapSummary {
        n_resamples,
        n_failed: n_resamples - ok.len(),
        std_errors,
    }
}

/// Plain-English reading of one marginal effect.
pub fn interpret(effect: &MarginalEffect, subset: Subset) -> String {
    let outcome = match subset {
        Subset::Negatives => "wrongly matched",
        Subset::Positives => "correctly matched",
    };
    let direction = if effect.estimate < 0.0 { "less" } else { "more" };
    let points = effect.estimate.abs() * 100.0;
    let mut sentence = match (&effect.level, &effect.reference) {
        (Some(level), Some(reference)) => format!(
            "On average and other things being equal, two people from the {level} subgroup are \
             {points:.0} points {direction} likely to be {outcome} than two people from the \
             {reference} subgroup."
        ),
        _ => {
            let unit = effect.unit.as_deref().filter(|u| !u.is_empty()).unwrap_or("unit");
            format!(
                "On average and other things being equal, each additional {unit} of {} makes two \
                 people {points:.2} points {direction} likely to be {outcome}.",
                effect.attribute
            )
        }
    };
    if !effect.significant {
        sentence.push_str(" (not statistically significant)");
    }
    sentence
}
