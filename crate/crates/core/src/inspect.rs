//! Stage II: layer-wise inspection of suspicious clients.
//!
//! For every layer the server builds a nine-feature description of each
//! suspect's slice, splits the suspects into two groups with average-linkage
//! agglomerative clustering, decides which group looks benign, and finally
//! accepts suspects that land in the benign group on enough layers.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::model::{slice_layers, LayerMap};
use crate::vecops;

/// Entries with magnitude below this count as zero in the sign features.
pub const ZERO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatureVector {
    pub pos_count: usize,
    pub neg_count: usize,
    pub zero_count: usize,
    pub kurtosis: f64,
    pub skewness: f64,
    pub d_mean: f64,
    pub l1_dev: f64,
    pub l2_norm: f64,
    pub angle_sim: f64,
}

impl LayerFeatureVector {
    pub const DIM: usize = 9;

    pub fn to_row(&self) -> [f64; Self::DIM] {
        [
            self.pos_count as f64,
            self.neg_count as f64,
            self.zero_count as f64,
            self.kurtosis,
            self.skewness,
            self.d_mean,
            self.l1_dev,
            self.l2_norm,
            self.angle_sim,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub members: Vec<usize>,
    pub d_mean: f64,
    pub sd_mean: f64,
    pub dev_mean: f64,
    pub rs_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionVerdict {
    pub client_id: usize,
    pub layer_pass: Vec<bool>,
    pub benign_fraction: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterChoice {
    First,
    Second,
}

/// Per-layer mean of the trusted clients' slices.
pub fn trusted_reference(trusted: &[&[f64]], layer_map: &LayerMap) -> Result<Vec<Vec<f64>>> {
    if trusted.is_empty() {
        return Err(Error::InspectionUnavailable(
            "no trusted client to form a reference".into(),
        ));
    }
    let mean = vecops::mean_of(trusted.iter().copied());
    reference_layers(&mean, layer_map)
}

/// Slices an already aggregated trusted mean into per-layer references.
pub fn reference_layers(aggregate: &[f64], layer_map: &LayerMap) -> Result<Vec<Vec<f64>>> {
    Ok(slice_layers(aggregate, layer_map)?
        .into_iter()
        .map(<[f64]>::to_vec)
        .collect())
}

/// Population skewness and excess kurtosis; both 0 for a constant slice.
fn shape_moments(g: &[f64]) -> (f64, f64) {
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in g {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= f64::MIN_POSITIVE {
        return (0.0, 0.0);
    }
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

pub fn extract_features(
    candidate: &[f64],
    reference: &[f64],
    others: &[&[f64]],
) -> Result<LayerFeatureVector> {
    if candidate.is_empty() {
        return Err(shape("empty layer slice"));
    }
    if candidate.len() != reference.len() || others.iter().any(|o| o.len() != candidate.len()) {
        return Err(shape("layer slices differ in length"));
    }
    let mut pos = 0;
    let mut neg = 0;
    let mut zero = 0;
    for &x in candidate {
        if x.abs() < ZERO_EPS {
            zero += 1;
        } else if x > 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    let (skewness, kurtosis) = shape_moments(candidate);
    let d_mean = if others.is_empty() {
        0.0
    } else {
        others.iter().map(|o| vecops::euclidean(candidate, o)).sum::<f64>() / others.len() as f64
    };
    Ok(LayerFeatureVector {
        pos_count: pos,
        neg_count: neg,
        zero_count: zero,
        kurtosis,
        skewness,
        d_mean,
        l1_dev: vecops::norm1(&vecops::sub(candidate, reference)),
        l2_norm: vecops::norm2(candidate),
        angle_sim: vecops::cosine(candidate, reference),
    })
}

/// Column-wise z-scores (population standard deviation). Constant columns
/// become zeros.
pub fn standardize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let dim = rows[0].len();
    let mut out = vec![vec![0.0; dim]; n];
    for c in 0..dim {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 0.0 && sd.is_finite() {
            for (o, r) in out.iter_mut().zip(rows) {
                o[c] = (r[c] - mean) / sd;
            }
        }
    }
    out
}

/// Average-linkage agglomerative clustering on standardized rows, merged
/// until two clusters remain. The cluster holding row 0 comes first.
pub fn ahc_two(features: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InspectionUnavailable(format!(
            "clustering needs at least 2 candidates, got {n}"
        )));
    }
    let z = standardize(features);
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = vecops::euclidean(&z[i], &z[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    // Clusters kept sorted by their lowest member, so scanning pairs in order
    // and replacing only on strictly smaller distance realizes the tie-break.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let linkage = |a: &[usize], b: &[usize]| {
        let total: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| dist[i][j]).sum();
        total / (a.len() * b.len()) as f64
    };
    while clusters.len() > 2 {
        let mut best = (f64::INFINITY, 0, 1);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = linkage(&clusters[a], &clusters[b]);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
        clusters[a].sort_unstable();
    }
    let second = clusters.pop().expect("two clusters");
    let first = clusters.pop().expect("two clusters");
    Ok((first, second))
}

/// Cluster-level statistics. `slices` and `reputation` are indexed by
/// candidate position; `members` holds candidate positions and
/// `client_ids` maps positions to client ids.
pub fn cluster_stats(
    members: &[usize],
    client_ids: &[usize],
    slices: &[&[f64]],
    reference: &[f64],
    reputation: &[f64],
) -> Result<ClusterStats> {
    if members.is_empty() {
        return Err(Error::Internal("cluster has no members".into()));
    }
    let m = members.len();
    let len = reference.len();

    let d_mean = if m < 2 {
        0.0
    } else {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                total += vecops::euclidean(slices[i], slices[j]);
                pairs += 1;
            }
        }
        total / pairs as f64
    };

    let sd_mean = if m < 2 || len == 0 {
        0.0
    } else {
        let mut acc = 0.0;
        for c in 0..len {
            let mean = members.iter().map(|&i| slices[i][c]).sum::<f64>() / m as f64;
            let var = members.iter().map(|&i| (slices[i][c] - mean).powi(2)).sum::<f64>() / m as f64;
            acc += var.sqrt();
        }
        acc / len as f64
    };

    let dev_mean = members
        .iter()
        .map(|&i| vecops::norm1(&vecops::sub(slices[i], reference)) / len.max(1) as f64)
        .sum::<f64>()
        / m as f64;

    Ok(ClusterStats {
        members: members.iter().map(|&i| client_ids[i]).collect(),
        d_mean,
        sd_mean,
        dev_mean,
        rs_sum: members.iter().map(|&i| reputation[i]).sum(),
    })
}

fn preferred(x: &ClusterStats, y: &ClusterStats) -> bool {
    let closer = x.dev_mean < y.dev_mean;
    let reputable = x.rs_sum >= y.rs_sum;
    let rule_i = closer && reputable;
    let rule_ii = x.d_mean < y.d_mean && closer && reputable;
    rule_i || rule_ii
}

/// Picks the cluster that looks benign: reference alignment and reputation
/// first, internal cohesion second, then deterministic fallbacks.
pub fn select_benign(a: &ClusterStats, b: &ClusterStats) -> ClusterChoice {
    match (preferred(a, b), preferred(b, a)) {
        (true, false) => return ClusterChoice::First,
        (false, true) => return ClusterChoice::Second,
        _ => {}
    }
    if a.dev_mean != b.dev_mean {
        return if a.dev_mean < b.dev_mean {
            ClusterChoice::First
        } else {
            ClusterChoice::Second
        };
    }
    if a.rs_sum != b.rs_sum {
        return if a.rs_sum > b.rs_sum {
            ClusterChoice::First
        } else {
            ClusterChoice::Second
        };
    }
    let min_a = a.members.iter().min().copied().unwrap_or(usize::MAX);
    let min_b = b.members.iter().min().copied().unwrap_or(usize::MAX);
    if min_a <= min_b {
        ClusterChoice::First
    } else {
        ClusterChoice::Second
    }
}

pub fn verdict(client_id: usize, layer_pass: Vec<bool>, rho: f64) -> InspectionVerdict {
    let l = layer_pass.len().max(1) as f64;
    let f = layer_pass.iter().filter(|&&p| p).count() as f64 / l;
    InspectionVerdict {
        client_id,
        accepted: f >= rho,
        benign_fraction: f,
        layer_pass,
    }
}

/// Individually uploaded suspicious updates together with their reputation.
#[derive(Debug, Clone, Copy)]
pub struct Suspects<'a> {
    pub client_ids: &'a [usize],
    pub deltas: &'a [&'a [f64]],
    pub reputation: &'a [f64],
}

/// Runs the full layer-wise inspection and returns one verdict per suspect.
pub fn inspect(
    suspects: &Suspects<'_>,
    reference: &[Vec<f64>],
    layer_map: &LayerMap,
    rho: f64,
) -> Result<Vec<InspectionVerdict>> {
    let n = suspects.client_ids.len();
    if suspects.deltas.len() != n || suspects.reputation.len() != n {
        return Err(shape("suspect ids, deltas and reputation differ in length"));
    }
    if reference.len() != layer_map.num_layers() {
        return Err(shape("reference layer count differs from layer map"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let per_client: Vec<Vec<&[f64]>> = suspects
        .deltas
        .iter()
        .map(|d| slice_layers(d, layer_map))
        .collect::<Result<_>>()?;

    let mut pass = vec![vec![false; layer_map.num_layers()]; n];
    for (layer, reference_slice) in reference.iter().enumerate() {
        let slices: Vec<&[f64]> = per_client.iter().map(|s| s[layer]).collect();
        if n == 1 {
            // No clustering possible: the lone suspect passes a layer when it
            // sits closer (in l1) to the trusted reference than to the origin.
            let g = slices[0];
            pass[0][layer] = vecops::norm1(&vecops::sub(g, reference_slice)) <= vecops::norm1(g);
            continue;
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let others: Vec<&[f64]> = (0..n).filter(|&j| j != i).map(|j| slices[j]).collect();
                extract_features(slices[i], reference_slice, &others).map(|f| f.to_row().to_vec())
            })
            .collect::<Result<_>>()?;
        let (first, second) = ahc_two(&rows)?;
        let stats_a = cluster_stats(&first, suspects.client_ids, &slices, reference_slice, suspects.reputation)?;
        let stats_b = cluster_stats(&second, suspects.client_ids, &slices, reference_slice, suspects.reputation)?;
        let benign = match select_benign(&stats_a, &stats_b) {
            ClusterChoice::First => &first,
            ClusterChoice::Second => &second,
        };
        for &i in benign {
            pass[i][layer] = true;
        }
    }
    Ok(pass
        .into_iter()
        .enumerate()
        .map(|(i, p)| verdict(suspects.client_ids[i], p, rho))
        .collect())
}
