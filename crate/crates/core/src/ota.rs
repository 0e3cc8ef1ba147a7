//! Idealized over-the-air aggregation.
//!
//! Trusted clients' updates are handed over as [`SealedUploads`], which has
//! no accessor for individual vectors: the only way to consume it is
//! [`SealedUploads::superpose`], mirroring a channel in which the server
//! observes nothing but the superposed mean.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::vecops;

/// Mean of `deltas` plus i.i.d. Gaussian receiver noise with std `noise_std`.
pub fn ota_aggregate(deltas: &[&[f64]], noise_std: f64, seed: u64) -> Result<Vec<f64>> {
    let weights = vec![1.0; deltas.len()];
    ota_aggregate_weighted(deltas, &weights, noise_std, seed)
}

/// Weighted mean `sum(w_k * delta_k) / sum(w_k)` plus receiver noise.
pub fn ota_aggregate_weighted(
    deltas: &[&[f64]],
    weights: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Err(Error::Aggregation("nothing to aggregate".into()));
    }
    if weights.len() != deltas.len() {
        return Err(Error::Aggregation("one weight per update required".into()));
    }
    let s = deltas[0].len();
    if deltas.iter().any(|d| d.len() != s) {
        return Err(Error::Aggregation("updates differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Aggregation("aggregation weights must be nonnegative with positive sum".into()));
    }
    let mut acc = vec![0.0; s];
    for (d, &w) in deltas.iter().zip(weights) {
        if w != 0.0 {
            vecops::axpy(&mut acc, w / total, d);
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std)
            .map_err(|e| Error::Aggregation(format!("bad noise std: {e}")))?;
        let mut rng = rng_from_seed(seed);
        for a in acc.iter_mut() {
            *a += normal.sample(&mut rng);
        }
    }
    Ok(acc)
}

/// Updates of clients transmitting over the shared analog channel.
pub struct SealedUploads {
    client_ids: Vec<usize>,
    deltas: Vec<Vec<f64>>,
}

/// What the server learns from a superposed transmission.
#[derive(Debug, Clone)]
pub struct OtaReception {
    pub senders: Vec<usize>,
    pub mean: Vec<f64>,
}

impl SealedUploads {
    pub fn new(client_ids: Vec<usize>, deltas: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(client_ids.len(), deltas.len());
        Self { client_ids, deltas }
    }

    pub fn senders(&self) -> &[usize] {
        &self.client_ids
    }

    pub fn is_empty(&self) -> bool {
        self.client_ids.is_empty()
    }

    pub fn superpose(self, noise_std: f64, seed: u64) -> Result<OtaReception> {
        let refs: Vec<&[f64]> = self.deltas.iter().map(Vec::as_slice).collect();
        let mean = ota_aggregate(&refs, noise_std, seed)?;
        Ok(OtaReception {
            senders: self.client_ids,
            mean,
        })
    }
}
