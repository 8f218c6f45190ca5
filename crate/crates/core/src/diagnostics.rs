//! Simulation-based residual checks for fitted logit models.
//!
//! Replicate outcomes are drawn from the fitted Bernoulli probabilities; each
//! observation gets a randomized-quantile residual from the simulated
//! distribution, which is uniform on [0, 1] when the model is correct.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logit::{sigmoid, DesignMatrix, LogitFit};

pub const DEFAULT_SIMULATIONS: usize = 250;
const MIN_SIMULATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub scaled_residuals: Vec<f64>,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub dispersion_ratio: f64,
    pub dispersion_p: f64,
    pub zero_inflation_ratio: f64,
    pub zero_inflation_p: f64,
    pub n_simulations: usize,
    pub seed: u64,
}

struct Replicate {
    outcomes: Vec<bool>,
    pearson_var: f64,
    zeros: usize,
}

fn pearson_variance(y: impl Iterator<Item = f64>, mu: &[f64]) -> f64 {
    let r: Vec<f64> = y
        .zip(mu)
        .map(|(yi, &m)| (yi - m) / (m * (1.0 - m)).sqrt())
        .collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Two-sided rank p-value `2 min(r, 1 - r)` of `observed` among `simulated`,
/// with ties counted at half weight.
pub fn rank_p_value(observed: f64, simulated: &[f64]) -> f64 {
    let below = simulated.iter().filter(|&&s| s < observed).count() as f64;
    let ties = simulated.iter().filter(|&&s| s == observed).count() as f64;
    let r = (below + 0.5 * ties) / simulated.len() as f64;
    (2.0 * r.min(1.0 - r)).clamp(0.0, 1.0)
}

/// Kolmogorov-Smirnov statistic of `sample` against uniform(0, 1).
pub fn ks_uniform(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - u).max(u - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // small-lambda series for the CDF
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda
            * (y + y.powi(9) + y.powi(25) + y.powi(49));
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let x = (-2.0 * lambda * lambda).exp();
        (2.0 * (x - x.powi(4) + x.powi(9) - x.powi(16))).clamp(0.0, 1.0)
    }
}

/// KS p-value for `n` observations and statistic `d`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)
}

pub fn simulate_residuals(
    fit: &LogitFit,
    design: &DesignMatrix,
    n_sim: usize,
    seed: u64,
) -> Result<ResidualDiagnostics> {
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    if n_sim < MIN_SIMULATIONS {
        return Err(Error::Precondition(format!(
            "n_sim must be at least {MIN_SIMULATIONS}, got {n_sim}"
        )));
    }
    let n = design.nrows();
    let eta = &design.x * fit.beta_vector();
    let mu: Vec<f64> = eta
        .iter()
        .map(|&e| sigmoid(e).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
        .collect();

    let replicates: Vec<Replicate> = (0..n_sim)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64 + 1);
            let outcomes: Vec<bool> = mu.iter().map(|&p| rng.random::<f64>() < p).collect();
            let pearson_var =
                pearson_variance(outcomes.iter().map(|&o| f64::from(u8::from(o))), &mu);
            let zeros = outcomes.iter().filter(|&&o| !o).count();
            Replicate {
                outcomes,
                pearson_var,
                zeros,
            }
        })
        .collect();

    let mut ones = vec![0usize; n];
    for rep in &replicates {
        for (c, &o) in ones.iter_mut().zip(&rep.outcomes) {
            *c += usize::from(o);
        }
    }
    let mut jitter = ChaCha8Rng::seed_from_u64(seed);
    jitter.set_stream(0);
    let m = n_sim as f64;
    let scaled_residuals: Vec<f64> = (0..n)
        .map(|i| {
            let p_one = ones[i] as f64 / m;
            let u: f64 = jitter.random();
            if design.y[i] == 1.0 {
                (1.0 - p_one) + u * p_one
            } else {
                u * (1.0 - p_one)
            }
        })
        .collect();
    let ks_statistic = ks_uniform(&scaled_residuals);

    let observed_var = pearson_variance(design.y.iter().copied(), &mu);
    let sim_var: Vec<f64> = replicates.iter().map(|r| r.pearson_var).collect();
    let observed_zeros = design.y.iter().filter(|&&v| v == 0.0).count() as f64;
    let sim_zeros: Vec<f64> = replicates.iter().map(|r| r.zeros as f64).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    Ok(ResidualDiagnostics {
        ks_statistic,
        ks_p_value: ks_p_value(ks_statistic, n),
        scaled_residuals,
        dispersion_ratio: observed_var / mean(&sim_var),
        dispersion_p: rank_p_value(observed_var, &sim_var),
        zero_inflation_ratio: observed_zeros / mean(&sim_zeros),
        zero_inflation_p: rank_p_value(observed_zeros, &sim_zeros),
        n_simulations: n_sim,
        seed,
    })
}
