//! Offline calibration of the trust weights by Bayesian optimization over
//! the probability simplex: Dirichlet(1) initial design, a squared-exponential
//! Gaussian-process surrogate and expected-improvement acquisition.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::sample_symmetric_dirichlet;
use crate::error::{config, Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::trust::TrustWeights;

/// Kernel length-scale in simplex coordinates.
pub const LENGTH_SCALE: f64 = 0.5;
const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

fn default_ei_candidates() -> usize {
    512
}
fn default_gp_noise() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoConfig {
    pub n_init: usize,
    pub n_iter: usize,
    /// Penalty on attack success in the objective.
    pub lambda_tradeoff: f64,
    #[serde(default = "default_ei_candidates")]
    pub ei_candidate_count: usize,
    #[serde(default = "default_gp_noise")]
    pub gp_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 2 {
            return Err(config("n_init must be at least 2"));
        }
        if !(self.lambda_tradeoff > 0.0) {
            return Err(config("lambda_tradeoff must be positive"));
        }
        if self.ei_candidate_count == 0 {
            return Err(config("ei_candidate_count must be positive"));
        }
        if !(self.gp_noise > 0.0 && self.gp_noise.is_finite()) {
            return Err(config("gp_noise must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRecord {
    pub beta: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub records: Vec<BoRecord>,
    pub best: BoRecord,
}

/// `MTA - lambda * ASR`, both as fractions.
pub fn objective_value(mta: f64, asr: f64, lambda: f64) -> f64 {
    mta - lambda * asr
}

pub fn sample_dirichlet(dim: usize, seed: u64) -> Vec<f64> {
    sample_symmetric_dirichlet(&mut rng_from_seed(seed), dim, 1.0)
}

fn se_kernel(a: &[f64], b: &[f64], signal_var: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    signal_var * (-d2 / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

/// Exact GP regression posterior at `queries`.
///
/// The prior mean is the mean of the observed objectives and the signal
/// variance their sample variance (1 when fewer than two distinct values).
pub fn gp_fit_predict(
    observed: &[BoRecord],
    queries: &[Vec<f64>],
    gp_noise: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = observed.len();
    if n == 0 {
        return Err(config("GP needs at least one observation"));
    }
    let ys: Vec<f64> = observed.iter().map(|r| r.objective).collect();
    let prior_mean = ys.iter().sum::<f64>() / n as f64;
    let signal_var = if n >= 2 {
        let v = ys.iter().map(|y| (y - prior_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if v > 1e-12 {
            v
        } else {
            1.0
        }
    } else {
        1.0
    };

    let gram = DMatrix::from_fn(n, n, |i, j| {
        se_kernel(&observed[i].beta, &observed[j].beta, signal_var)
    });
    let chol = JITTERS
        .iter()
        .find_map(|&jitter| {
            let m = &gram + DMatrix::identity(n, n) * (gp_noise + jitter);
            m.cholesky()
        })
        .ok_or_else(|| Error::Numerical("GP kernel matrix not positive definite".into()))?;
    let centered = DVector::from_iterator(n, ys.iter().map(|y| y - prior_mean));
    let weights = chol.solve(&centered);

    let mut means = Vec::with_capacity(queries.len());
    let mut sds = Vec::with_capacity(queries.len());
    for q in queries {
        let k_star = DVector::from_iterator(
            n,
            observed.iter().map(|r| se_kernel(&r.beta, q, signal_var)),
        );
        means.push(prior_mean + k_star.dot(&weights));
        let v = chol.l().solve_lower_triangular(&k_star).ok_or_else(|| {
            Error::Numerical("triangular solve failed in GP posterior".into())
        })?;
        let var = (signal_var - v.dot(&v)).max(0.0);
        sds.push(var.sqrt());
    }
    Ok((means, sds))
}

pub fn expected_improvement(mean: f64, stddev: f64, best: f64) -> f64 {
    let gain = mean - best;
    if stddev <= 0.0 {
        return gain.max(0.0);
    }
    let std_normal = Normal::standard();
    let z = gain / stddev;
    (gain * std_normal.cdf(z) + stddev * std_normal.pdf(z)).max(0.0)
}

fn argmax_record(records: &[BoRecord]) -> &BoRecord {
    records
        .iter()
        .fold(None::<&BoRecord>, |best, r| match best {
            Some(b) if b.objective >= r.objective => Some(b),
            _ => Some(r),
        })
        .expect("at least one record")
}

/// Bayesian optimization of `objective` over the `dim`-simplex.
pub fn run_bo<F>(cfg: &BoConfig, dim: usize, objective: F) -> Result<BoResult>
where
    F: Fn(&TrustWeights) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(config("simplex dimension must be positive"));
    }
    let to_weights = |beta: &[f64]| -> Result<TrustWeights> {
        let sum: f64 = beta.iter().sum();
        TrustWeights::new(beta.iter().map(|b| b / sum).collect())
    };

    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, &[0xB0, 1]));
    let initial: Vec<Vec<f64>> = (0..cfg.n_init)
        .map(|_| sample_symmetric_dirichlet(&mut init_rng, dim, 1.0))
        .collect();
    let mut records = initial
        .into_par_iter()
        .map(|beta| {
            let w = to_weights(&beta)?;
            let objective = objective(&w)?;
            Ok(BoRecord { beta: w.as_slice().to_vec(), objective })
        })
        .collect::<Result<Vec<_>>>()?;

    for iter in 0..cfg.n_iter {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[0xB0, 2, iter as u64]));
        let candidates: Vec<Vec<f64>> = (0..cfg.ei_candidate_count)
            .map(|_| sample_symmetric_dirichlet(&mut rng, dim, 1.0))
            .collect();
        let (means, sds) = gp_fit_predict(&records, &candidates, cfg.gp_noise)?;
        let best_j = argmax_record(&records).objective;
        let mut pick = 0;
        let mut pick_ei = f64::NEG_INFINITY;
        for (i, (m, s)) in means.iter().zip(&sds).enumerate() {
            let ei = expected_improvement(*m, *s, best_j);
            if ei > pick_ei {
                pick = i;
                pick_ei = ei;
            }
        }
        let w = to_weights(&candidates[pick])?;
        let objective = objective(&w)?;
        records.push(BoRecord { beta: w.as_slice().to_vec(), objective });
    }

    let best = argmax_record(&records).clone();
    Ok(BoResult { records, best })
}
