//! Synthetic classification data, Dirichlet label-skew partitioning and
//! trigger poisoning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Norm of each class-mean direction in feature space.
pub const CLASS_MEAN_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(config(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(config(format!("label {bad} outside [0, {num_classes})")));
        }
        if let Some(w) = features.first().map(Vec::len) {
            if features.iter().any(|f| f.len() != w) {
                return Err(config("feature rows have differing widths"));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature width, or 0 for an empty dataset.
    pub fn width(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Shannon entropy (nats) of the label distribution.
    pub fn label_entropy(&self) -> f64 {
        let n = self.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        self.class_histogram()
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    fn push(&mut self, x: Vec<f64>, y: usize) {
        self.features.push(x);
        self.labels.push(y);
    }
}

/// Backdoor trigger: an additive offset on a fixed coordinate subset that
/// should steer the model to `target_label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub coords: Vec<usize>,
    pub offset: f64,
    pub target_label: usize,
    pub poison_rate: f64,
}

impl TriggerSpec {
    pub fn validate(&self, width: usize, num_classes: usize) -> Result<()> {
        if self.coords.is_empty() {
            return Err(config("trigger coords must be nonempty"));
        }
        if let Some(&c) = self.coords.iter().find(|&&c| c >= width) {
            return Err(config(format!("trigger coord {c} outside feature width {width}")));
        }
        if self.target_label >= num_classes {
            return Err(config(format!(
                "trigger target label {} outside [0, {num_classes})",
                self.target_label
            )));
        }
        if !(self.poison_rate > 0.0 && self.poison_rate <= 1.0) {
            return Err(config(format!(
                "poison_rate {} must lie in (0, 1]",
                self.poison_rate
            )));
        }
        if !self.offset.is_finite() {
            return Err(config("trigger offset must be finite"));
        }
        Ok(())
    }

    /// Number of samples poisoned out of `n`: `ceil(rate * n)`, at least one.
    pub fn poison_count(&self, n: usize) -> usize {
        let raw = (self.poison_rate * n as f64 - 1e-9).ceil().max(1.0) as usize;
        raw.min(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(config("partition needs at least 2 clients"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(config("dirichlet_alpha must be positive and finite"));
        }
        Ok(())
    }
}

/// Draws `per_class_count` samples around each of `num_classes` class means.
/// Class `c` has mean `CLASS_MEAN_SCALE * e_c`; every coordinate receives
/// independent Gaussian noise with standard deviation `cluster_spread`.
pub fn generate_dataset(
    num_classes: usize,
    width: usize,
    per_class_count: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    generate_scaled_dataset(num_classes, width, per_class_count, CLASS_MEAN_SCALE, cluster_spread, seed)
}

/// Like [`generate_dataset`] with class means `mean_scale * e_c`.
pub fn generate_scaled_dataset(
    num_classes: usize,
    width: usize,
    per_class_count: usize,
    mean_scale: f64,
    cluster_spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(mean_scale > 0.0 && mean_scale.is_finite()) {
        return Err(config("class mean scale must be positive"));
    }
    if num_classes < 2 {
        return Err(config("need at least 2 classes"));
    }
    if width < num_classes {
        return Err(config(format!(
            "feature width {width} smaller than class count {num_classes}"
        )));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(config("cluster_spread must be nonnegative"));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = LabeledDataset::empty(num_classes);
    for class in 0..num_classes {
        for _ in 0..per_class_count {
            let x = (0..width)
                .map(|i| {
                    let mean = if i == class { mean_scale } else { 0.0 };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mean + cluster_spread * z
                })
                .collect();
            out.push(x, class);
        }
    }
    Ok(out)
}

/// Samples a point from the symmetric Dirichlet distribution with
/// concentration `alpha` via normalized Gamma variates.
pub(crate) fn sample_symmetric_dirichlet<R: Rng>(rng: &mut R, dim: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        // every Gamma draw underflowed; put all mass on one vertex
        let hot = rng.random_range(0..dim);
        draws = (0..dim).map(|i| if i == hot { 1.0 } else { 0.0 }).collect();
    }
    draws
}

/// Result of a Dirichlet partition, with the per-class share vectors used.
#[derive(Debug, Clone)]
pub struct Partition {
    pub clients: Vec<LabeledDataset>,
    /// `class_shares[c][k]`: fraction of class `c` destined for client `k`.
    pub class_shares: Vec<Vec<f64>>,
}

pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<Vec<LabeledDataset>> {
    Ok(dirichlet_partition_with_shares(dataset, spec)?.clients)
}

pub fn dirichlet_partition_with_shares(
    dataset: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<Partition> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(config("cannot partition an empty dataset"));
    }
    let k = spec.num_clients;
    if dataset.len() < k {
        return Err(config(format!(
            "{} samples cannot cover {k} clients",
            dataset.len()
        )));
    }
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[0xD1]));
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut class_shares = Vec::with_capacity(dataset.num_classes);
    for indices in by_class.iter_mut() {
        let shares = sample_symmetric_dirichlet(&mut rng, k, spec.dirichlet_alpha);
        indices.shuffle(&mut rng);
        let n = indices.len();
        let mut cum = 0.0;
        let mut start = 0usize;
        for (client, &p) in shares.iter().enumerate() {
            cum += p;
            let end = if client + 1 == k {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            assignment[client].extend_from_slice(&indices[start..end]);
            start = end;
        }
        class_shares.push(shares);
    }

    // Every client must train, so refill empty clients from the largest one.
    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..k)
            .max_by_key(|&c| (assignment[c].len(), std::cmp::Reverse(c)))
            .expect("k >= 2");
        let moved = assignment[largest].pop().expect("largest client nonempty");
        assignment[empty].push(moved);
    }

    let clients = assignment
        .into_iter()
        .map(|idx| {
            let mut d = LabeledDataset::empty(dataset.num_classes);
            for i in idx {
                d.push(dataset.features[i].clone(), dataset.labels[i]);
            }
            d
        })
        .collect();
    Ok(Partition {
        clients,
        class_shares,
    })
}

/// Applies the trigger to a `poison_rate` fraction of samples (at least one)
/// and relabels them to the target class. Other samples are left untouched.
pub fn poison_dataset(
    dataset: &LabeledDataset,
    trigger: &TriggerSpec,
    seed: u64,
) -> Result<LabeledDataset> {
    if dataset.is_empty() {
        return Err(config("cannot poison an empty dataset"));
    }
    trigger.validate(dataset.width(), dataset.num_classes)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut out = dataset.clone();
    for &i in &order[..trigger.poison_count(dataset.len())] {
        for &c in &trigger.coords {
            out.features[i][c] += trigger.offset;
        }
        out.labels[i] = trigger.target_label;
    }
    Ok(out)
}

/// Adds the trigger offset to every row; labels are not involved.
pub fn apply_trigger_for_eval(features: &[Vec<f64>], trigger: &TriggerSpec) -> Result<Vec<Vec<f64>>> {
    let mut out = features.to_vec();
    for row in out.iter_mut() {
        for &c in &trigger.coords {
            let slot = row.get_mut(c).ok_or_else(|| {
                config(format!("trigger coord {c} outside feature width"))
            })?;
            *slot += trigger.offset;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trigger(rate: f64) -> TriggerSpec {
        TriggerSpec {
            coords: vec![14, 15],
            offset: 2.0,
            target_label: 0,
            poison_rate: rate,
        }
    }

    #[test]
    fn generate_counts_per_class() {
        let d = generate_dataset(10, 16, 100, 0.3, 1).unwrap();
        assert_eq!(d.len(), 1000);
        assert!(d.class_histogram().iter().all(|&c| c == 100));
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let d = generate_dataset(3, 5, 4, 0.0, 9).unwrap();
        for (x, &y) in d.features.iter().zip(&d.labels) {
            for (i, &v) in x.iter().enumerate() {
                let expect = if i == y { CLASS_MEAN_SCALE } else { 0.0 };
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn width_below_classes_rejected() {
        assert!(matches!(
            generate_dataset(10, 8, 5, 0.1, 0),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn partition_is_exhaustive_multiset() {
        let d = generate_dataset(10, 16, 30, 0.3, 3).unwrap();
        let spec = PartitionSpec {
            num_clients: 20,
            dirichlet_alpha: 0.5,
            seed: 4,
        };
        let parts = dirichlet_partition(&d, &spec).unwrap();
        assert_eq!(parts.len(), 20);
        assert!(parts.iter().all(|p| !p.is_empty()));
        let key = |x: &Vec<f64>, y: usize| {
            let mut k: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            k.push(y as u64);
            k
        };
        let mut original: Vec<_> = d.features.iter().zip(&d.labels).map(|(x, &y)| key(x, y)).collect();
        let mut merged: Vec<_> = parts
            .iter()
            .flat_map(|p| p.features.iter().zip(&p.labels).map(|(x, &y)| key(x, y)))
            .collect();
        original.sort();
        merged.sort();
        assert_eq!(original, merged);
    }

    #[test]
    fn class_shares_on_simplex() {
        let d = generate_dataset(10, 16, 50, 0.3, 5).unwrap();
        let spec = PartitionSpec {
            num_clients: 20,
            dirichlet_alpha: 0.5,
            seed: 11,
        };
        let p = dirichlet_partition_with_shares(&d, &spec).unwrap();
        assert_eq!(p.class_shares.len(), 10);
        for s in &p.class_shares {
            assert_eq!(s.len(), 20);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let d = generate_dataset(4, 8, 1000, 0.3, 6).unwrap();
        let spec = PartitionSpec {
            num_clients: 4,
            dirichlet_alpha: 1e6,
            seed: 2,
        };
        let parts = dirichlet_partition(&d, &spec).unwrap();
        for p in &parts {
            for &c in &p.class_histogram() {
                let rel = (c as f64 - 250.0).abs() / 250.0;
                assert!(rel <= 0.10, "class count {c} too far from 250");
            }
        }
    }

    #[test]
    fn empty_clients_repaired() {
        // 12 samples over 10 clients with extreme skew.
        let d = generate_dataset(2, 4, 6, 0.1, 1).unwrap();
        for seed in 0..20 {
            let spec = PartitionSpec {
                num_clients: 10,
                dirichlet_alpha: 0.01,
                seed,
            };
            let parts = dirichlet_partition(&d, &spec).unwrap();
            assert!(parts.iter().all(|p| !p.is_empty()));
            assert_eq!(parts.iter().map(LabeledDataset::len).sum::<usize>(), 12);
        }
    }

    #[test]
    fn full_poisoning_relabels_everything() {
        let d = generate_dataset(3, 16, 10, 0.2, 1).unwrap();
        let p = poison_dataset(&d, &trigger(1.0), 3).unwrap();
        assert!(p.labels.iter().all(|&l| l == 0));
        for (a, b) in d.features.iter().zip(&p.features) {
            assert_eq!(b[14], a[14] + 2.0);
            assert_eq!(b[15], a[15] + 2.0);
            assert_eq!(a[..14], b[..14]);
        }
    }

    #[test]
    fn tiny_rate_poisons_exactly_one() {
        let d = generate_dataset(4, 16, 25, 0.2, 1).unwrap();
        let p = poison_dataset(&d, &trigger(1e-9), 3).unwrap();
        let changed = d
            .features
            .iter()
            .zip(&p.features)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn untouched_samples_bitwise_equal() {
        let d = generate_dataset(4, 16, 25, 0.2, 1).unwrap();
        let t = trigger(0.3);
        let p = poison_dataset(&d, &t, 8).unwrap();
        let mut touched = 0;
        for i in 0..d.len() {
            if d.features[i] == p.features[i] {
                assert_eq!(d.labels[i], p.labels[i]);
            } else {
                touched += 1;
            }
        }
        assert_eq!(touched, t.poison_count(d.len()));
        assert_eq!(touched, 30);
    }

    #[test]
    fn eval_trigger_properties() {
        let rows = vec![vec![0.5; 16], vec![-1.0; 16]];
        let mut t = trigger(0.5);
        t.offset = 0.0;
        assert_eq!(apply_trigger_for_eval(&rows, &t).unwrap(), rows);
        t.offset = 1.25;
        let twice = apply_trigger_for_eval(&apply_trigger_for_eval(&rows, &t).unwrap(), &t).unwrap();
        assert_eq!(twice[0][14], 0.5 + 2.5);
        assert_eq!(twice[1][15], -1.0 + 2.5);
        assert_eq!(twice[0][0], 0.5);
        t.coords = vec![16];
        assert!(apply_trigger_for_eval(&rows, &t).is_err());
    }

    #[test]
    fn poisoning_empty_dataset_fails() {
        let d = LabeledDataset::empty(3);
        assert!(poison_dataset(&d, &trigger(0.5), 0).is_err());
    }
}
