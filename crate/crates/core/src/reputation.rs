//! Per-client reputation counts and the median/MAD participation filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::median;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReputationLedger {
    rs: Vec<u64>,
    warm_up: usize,
}

impl ReputationLedger {
    pub fn new(num_clients: usize, warm_up: usize) -> Self {
        Self {
            rs: vec![0; num_clients],
            warm_up,
        }
    }

    pub fn from_scores(rs: Vec<u64>, warm_up: usize) -> Self {
        Self { rs, warm_up }
    }

    pub fn scores(&self) -> &[u64] {
        &self.rs
    }

    pub fn score(&self, client: usize) -> u64 {
        self.rs[client]
    }

    pub fn warm_up(&self) -> usize {
        self.warm_up
    }

    pub fn num_clients(&self) -> usize {
        self.rs.len()
    }

    /// Adds one to every participant's score.
    pub fn increment(&mut self, participants: &[usize]) -> Result<()> {
        if let Some(&bad) = participants.iter().find(|&&k| k >= self.rs.len()) {
            return Err(Error::Internal(format!("unknown client id {bad}")));
        }
        for &k in participants {
            self.rs[k] += 1;
        }
        Ok(())
    }

    /// `(median, MAD)` of all clients' scores, without a consistency constant.
    pub fn median_mad(&self) -> (f64, f64) {
        let scores: Vec<f64> = self.rs.iter().map(|&r| r as f64).collect();
        let med = median(&scores).unwrap_or(0.0);
        let dev: Vec<f64> = scores.iter().map(|s| (s - med).abs()).collect();
        (med, median(&dev).unwrap_or(0.0))
    }

    /// Keeps candidates whose score reaches `median - MAD`; identity during warm-up.
    pub fn mad_filter(&self, candidates: &[usize], round: usize) -> Vec<usize> {
        if round <= self.warm_up {
            return candidates.to_vec();
        }
        let (med, mad) = self.median_mad();
        let threshold = med - mad;
        candidates
            .iter()
            .copied()
            .filter(|&k| self.rs.get(k).is_some_and(|&r| r as f64 >= threshold))
            .collect()
    }
}
