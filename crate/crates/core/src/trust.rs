//! Stage I: client-side indicators, their monotone normalizations, the
//! composite trust score and tiering.

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::vecops;

/// Raw geometric indicators reported by one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVector {
    /// Temporal direction alignment, cosine of the update with the global model.
    pub tda: f64,
    pub rel_l2: f64,
    pub spikiness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformParams {
    pub r0: f64,
    pub alpha_steep: f64,
    pub s0: f64,
    pub gamma: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            r0: 1.5,
            alpha_steep: 2.0,
            s0: 0.05,
            gamma: 2.0,
        }
    }
}

impl TransformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 >= 0.0 && self.r0.is_finite()) {
            return Err(config("r0 must be nonnegative"));
        }
        if !(self.alpha_steep > 0.0 && self.alpha_steep.is_finite()) {
            return Err(config("alpha_steep must be positive"));
        }
        if !(0.0..1.0).contains(&self.s0) {
            return Err(config("s0 must lie in [0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(config("gamma must be positive"));
        }
        Ok(())
    }
}

/// Convex combination weights over the indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TrustWeights(Vec<f64>);

impl TrustWeights {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(config("trust weights must be nonempty"));
        }
        if beta.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(config(format!("trust weights {beta:?} must be nonnegative")));
        }
        let sum: f64 = beta.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(config(format!("trust weights sum to {sum}, expected 1")));
        }
        Ok(Self(beta))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Unit weight on indicator `i` of `n`.
    pub fn vertex(n: usize, i: usize) -> Self {
        Self((0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for TrustWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TrustWeights> for Vec<f64> {
    fn from(w: TrustWeights) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Trusted,
    Suspicious,
    Malicious,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Trusted => "trusted",
            Tier::Suspicious => "suspicious",
            Tier::Malicious => "malicious",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustAssessment {
    pub client_id: usize,
    pub normalized: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TierSpec {
    Threshold {
        tau_high: f64,
        tau_low: f64,
    },
    Proportion {
        p_trusted: f64,
        p_suspicious: f64,
        p_malicious: f64,
    },
}

impl TierSpec {
    pub fn proportion(p_trusted: f64, p_suspicious: f64, p_malicious: f64) -> Self {
        TierSpec::Proportion {
            p_trusted,
            p_suspicious,
            p_malicious,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TierSpec::Threshold { tau_high, tau_low } => {
                if !(tau_high > tau_low) {
                    return Err(config(format!(
                        "tiering thresholds need tau_high > tau_low, got {tau_high} <= {tau_low}"
                    )));
                }
            }
            TierSpec::Proportion {
                p_trusted,
                p_suspicious,
                p_malicious,
            } => {
                let ps = [p_trusted, p_suspicious, p_malicious];
                if ps.iter().any(|p| !(*p >= 0.0)) {
                    return Err(config("tiering fractions must be nonnegative"));
                }
                let sum: f64 = ps.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(config(format!(
                        "tiering fractions (p_trusted, p_suspicious, p_malicious) sum to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tier sizes for `k` clients in proportion mode.
    pub fn proportion_counts(p_trusted: f64, p_suspicious: f64, k: usize) -> (usize, usize, usize) {
        let floor = |p: f64| ((p * k as f64) + 1e-9).floor() as usize;
        let t = floor(p_trusted).min(k);
        let s = floor(p_suspicious).min(k - t);
        (t, s, k - t - s)
    }
}

/// Cosine between the update and the previous global model; 0 when either is zero.
pub fn compute_tda(delta: &[f64], global_prev: &[f64]) -> Result<f64> {
    if delta.len() != global_prev.len() {
        return Err(shape("delta and global model lengths differ"));
    }
    Ok(vecops::cosine(delta, global_prev))
}

pub fn compute_rel_l2(delta: &[f64], global_prev: &[f64]) -> Result<f64> {
    if delta.len() != global_prev.len() {
        return Err(shape("delta and global model lengths differ"));
    }
    let g = vecops::norm2(global_prev);
    if g == 0.0 {
        return Err(Error::DefenseSetup(
            "relative l2 norm undefined for a zero global model".into(),
        ));
    }
    Ok(vecops::norm2(delta) / g)
}

/// Number of coordinates in the top-1% set: `max(1, ceil(S / 100))`.
pub fn top_one_percent_count(s: usize) -> usize {
    s.div_ceil(100).max(1)
}

/// Share of squared energy carried by the top-1% coordinates by magnitude.
pub fn compute_spikiness(delta: &[f64]) -> f64 {
    if delta.is_empty() {
        return 0.0;
    }
    let mut sq: Vec<f64> = delta.iter().map(|x| x * x).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let k = top_one_percent_count(sq.len()).min(sq.len());
    if k < sq.len() {
        sq.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    let top: f64 = sq[..k].iter().sum();
    (top / total).clamp(0.0, 1.0)
}

pub fn compute_indicators(delta: &[f64], global_prev: &[f64]) -> Result<IndicatorVector> {
    Ok(IndicatorVector {
        tda: compute_tda(delta, global_prev)?,
        rel_l2: compute_rel_l2(delta, global_prev)?,
        spikiness: compute_spikiness(delta),
    })
}

pub fn normalize_tda(tda: f64) -> f64 {
    ((tda + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub fn normalize_rel_l2(rel_l2: f64, p: &TransformParams) -> f64 {
    1.0 - (p.alpha_steep * (rel_l2 - p.r0).max(0.0)).tanh()
}

pub fn normalize_spikiness(spikiness: f64, p: &TransformParams) -> f64 {
    (1.0 - (spikiness - p.s0).max(0.0).powf(p.gamma)).clamp(0.0, 1.0)
}

/// Maps raw indicators into `[0, 1]`, larger meaning more benign.
pub fn normalize_indicators(ind: &IndicatorVector, p: &TransformParams) -> [f64; 3] {
    [
        normalize_tda(ind.tda),
        normalize_rel_l2(ind.rel_l2, p),
        normalize_spikiness(ind.spikiness, p),
    ]
}

/// A pluggable Stage-I indicator: computes its raw statistic from the
/// client's update and maps it into `[0, 1]`.
pub trait TrustIndicator: Send + Sync {
    fn name(&self) -> &str;
    fn raw(&self, delta: &[f64], global_prev: &[f64]) -> Result<f64>;
    fn normalize(&self, raw: f64, params: &TransformParams) -> f64;
}

pub struct Tda;
pub struct RelL2;
pub struct Spikiness;

impl TrustIndicator for Tda {
    fn name(&self) -> &str {
        "tda"
    }
    fn raw(&self, delta: &[f64], global_prev: &[f64]) -> Result<f64> {
        compute_tda(delta, global_prev)
    }
    fn normalize(&self, raw: f64, _: &TransformParams) -> f64 {
        normalize_tda(raw)
    }
}

impl TrustIndicator for RelL2 {
    fn name(&self) -> &str {
        "rel_l2"
    }
    fn raw(&self, delta: &[f64], global_prev: &[f64]) -> Result<f64> {
        compute_rel_l2(delta, global_prev)
    }
    fn normalize(&self, raw: f64, params: &TransformParams) -> f64 {
        normalize_rel_l2(raw, params)
    }
}

impl TrustIndicator for Spikiness {
    fn name(&self) -> &str {
        "spikiness"
    }
    fn raw(&self, delta: &[f64], _: &[f64]) -> Result<f64> {
        Ok(compute_spikiness(delta))
    }
    fn normalize(&self, raw: f64, params: &TransformParams) -> f64 {
        normalize_spikiness(raw, params)
    }
}

/// The three geometric indicators in their canonical order.
pub fn geometric_indicators() -> Vec<Box<dyn TrustIndicator>> {
    vec![Box::new(Tda), Box::new(RelL2), Box::new(Spikiness)]
}

pub fn trust_score(normalized: &[f64], weights: &TrustWeights) -> Result<f64> {
    let beta = weights.as_slice();
    if normalized.len() != beta.len() {
        return Err(config(format!(
            "{} normalized indicators but {} weights",
            normalized.len(),
            beta.len()
        )));
    }
    Ok(vecops::dot(normalized, beta).clamp(0.0, 1.0))
}

/// Normalizes an indicator set and scores it.
pub fn assess(
    client_id: usize,
    delta: &[f64],
    global_prev: &[f64],
    indicators: &[Box<dyn TrustIndicator>],
    params: &TransformParams,
    weights: &TrustWeights,
) -> Result<TrustAssessment> {
    let normalized = indicators
        .iter()
        .map(|ind| Ok(ind.normalize(ind.raw(delta, global_prev)?, params)))
        .collect::<Result<Vec<_>>>()?;
    let score = trust_score(&normalized, weights)?;
    Ok(TrustAssessment {
        client_id,
        normalized,
        score,
    })
}

/// Assigns a tier to every assessment, returned in the input order.
pub fn tier_clients(assessments: &[TrustAssessment], spec: &TierSpec) -> Result<Vec<Tier>> {
    spec.validate()?;
    match *spec {
        TierSpec::Threshold { tau_high, tau_low } => Ok(assessments
            .iter()
            .map(|a| {
                if a.score >= tau_high {
                    Tier::Trusted
                } else if a.score >= tau_low {
                    Tier::Suspicious
                } else {
                    Tier::Malicious
                }
            })
            .collect()),
        TierSpec::Proportion {
            p_trusted,
            p_suspicious,
            ..
        } => {
            if assessments.is_empty() {
                return Err(config("proportion tiering needs at least one client"));
            }
            let k = assessments.len();
            let (n_t, n_s, _) = TierSpec::proportion_counts(p_trusted, p_suspicious, k);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                assessments[b]
                    .score
                    .total_cmp(&assessments[a].score)
                    .then(assessments[a].client_id.cmp(&assessments[b].client_id))
            });
            let mut tiers = vec![Tier::Malicious; k];
            for (rank, &i) in order.iter().enumerate() {
                tiers[i] = if rank < n_t {
                    Tier::Trusted
                } else if rank < n_t + n_s {
                    Tier::Suspicious
                } else {
                    Tier::Malicious
                };
            }
            Ok(tiers)
        }
    }
}
