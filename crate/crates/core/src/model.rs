//! Flat-parameter MLP classifier with hand-written backpropagation.
//!
//! Parameters live in one contiguous vector so that client updates, trust
//! indicators and aggregation all operate on plain slices. The [`LayerMap`]
//! records where each weight matrix and bias vector lives inside it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{config, shape, Result};
use crate::rng::rng_from_seed;
use crate::vecops;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelDims {
    pub fn new(input: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            input,
            hidden,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.classes == 0 || self.hidden.contains(&0) {
            return Err(config(format!("zero-width layer in model dims {self:?}")));
        }
        if self.classes < 2 {
            return Err(config("classifier needs at least 2 classes"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each dense layer in order.
    fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.dense_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Ordered, contiguous, disjoint segments covering `[0, S)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    segments: Vec<LayerSegment>,
}

impl LayerMap {
    pub fn new(segments: Vec<LayerSegment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.start != next {
                return Err(shape(format!(
                    "segment `{}` starts at {} but expected {next}",
                    s.name, s.start
                )));
            }
            if s.len == 0 {
                return Err(shape(format!("segment `{}` is empty", s.name)));
            }
            next += s.len;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[LayerSegment] {
        &self.segments
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    /// A map that treats the whole vector as one layer.
    pub fn single(len: usize) -> Self {
        Self {
            segments: vec![LayerSegment {
                name: "model".into(),
                start: 0,
                len,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatModel {
    pub params: Vec<f64>,
    pub layer_map: LayerMap,
    pub dims: ModelDims,
}

/// A client's round update `w_k^t - w^{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub delta: Vec<f64>,
    pub client_id: usize,
    pub round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// L2 penalty coefficient applied as `p -= lr * wd * p` on every step.
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config("weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Training objective. The augmented variants mix cross-entropy with a
/// distance to `anchor` as `(1 - alpha) * CE + alpha * metric`.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    Normal,
    /// metric = `||w - anchor||_2`
    Euclidean { alpha: f64, anchor: &'a [f64] },
    /// metric = `1 - cos(anchor, w)`
    Cosine { alpha: f64, anchor: &'a [f64] },
}

impl LossSpec<'_> {
    fn validate(&self, s: usize) -> Result<()> {
        match *self {
            LossSpec::Normal => Ok(()),
            LossSpec::Euclidean { alpha, anchor } | LossSpec::Cosine { alpha, anchor } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(config(format!("loss mixing weight {alpha} outside [0, 1]")));
                }
                if anchor.len() != s {
                    return Err(shape(format!(
                        "anchor has {} params, model has {s}",
                        anchor.len()
                    )));
                }
                Ok(())
            }
        }
    }
}

pub fn init_model(dims: &ModelDims, seed: u64) -> Result<FlatModel> {
    dims.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = Vec::with_capacity(dims.param_count());
    let mut segments = Vec::new();
    for (layer, (fan_in, fan_out)) in dims.dense_shapes().into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for (kind, len) in [("weight", fan_in * fan_out), ("bias", fan_out)] {
            segments.push(LayerSegment {
                name: format!("fc{}.{kind}", layer + 1),
                start: params.len(),
                len,
            });
            params.extend((0..len).map(|_| rng.random_range(-bound..=bound)));
        }
    }
    Ok(FlatModel {
        params,
        layer_map: LayerMap::new(segments)?,
        dims: dims.clone(),
    })
}

/// Splits `delta` into one vector per layer-map segment.
pub fn slice_layers<'a>(delta: &'a [f64], layer_map: &LayerMap) -> Result<Vec<&'a [f64]>> {
    if delta.len() != layer_map.total_len() {
        return Err(shape(format!(
            "delta has {} entries, layer map covers {}",
            delta.len(),
            layer_map.total_len()
        )));
    }
    Ok(layer_map
        .segments()
        .iter()
        .map(|s| &delta[s.start..s.start + s.len])
        .collect())
}

impl FlatModel {
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_width(&self, data: &LabeledDataset) -> Result<()> {
        if !data.is_empty() && data.width() != self.dims.input {
            return Err(shape(format!(
                "feature width {} but model expects {}",
                data.width(),
                self.dims.input
            )));
        }
        Ok(())
    }

    /// Logits for a single input.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let shapes = self.dims.dense_shapes();
        let last = shapes.len() - 1;
        let mut offset = 0;
        for (li, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut z: Vec<f64> = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                *zo += vecops::dot(&w[o * fan_in..(o + 1) * fan_in], &act);
            }
            if li != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            act = z;
        }
        act
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &LabeledDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / data.len() as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Mean cross-entropy over `indices` of `data`, accumulating its gradient into `grad`.
fn cross_entropy_grad(
    model: &FlatModel,
    data: &LabeledDataset,
    indices: &[usize],
    grad: &mut [f64],
) -> f64 {
    let shapes = model.dims.dense_shapes();
    let n_layers = shapes.len();
    let inv_n = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    // per-layer parameter offsets
    let mut offsets = Vec::with_capacity(n_layers);
    let mut acc = 0;
    for &(i, o) in &shapes {
        offsets.push(acc);
        acc += i * o + o;
    }

    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    for &idx in indices {
        acts.clear();
        acts.push(data.features[idx].clone());
        for (li, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let off = offsets[li];
            let w = &model.params[off..off + fan_in * fan_out];
            let b = &model.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let input = &acts[li];
            let mut z: Vec<f64> = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                *zo += vecops::dot(&w[o * fan_in..(o + 1) * fan_in], input);
            }
            if li + 1 != n_layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }

        // softmax cross-entropy on the logits
        let logits = &acts[n_layers];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let label = data.labels[idx];
        total += -(logits[label] - max - sum.ln());
        let mut dz: Vec<f64> = exps.iter().map(|e| e / sum * inv_n).collect();
        dz[label] -= inv_n;

        for li in (0..n_layers).rev() {
            let (fan_in, fan_out) = shapes[li];
            let off = offsets[li];
            let input = &acts[li];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = dz[o];
                    gb[o] += d;
                    if d != 0.0 {
                        vecops::axpy(&mut gw[o * fan_in..(o + 1) * fan_in], d, input);
                    }
                }
            }
            if li > 0 {
                let w = &model.params[off..off + fan_in * fan_out];
                let mut da = vec![0.0; fan_in];
                for o in 0..fan_out {
                    vecops::axpy(&mut da, dz[o], &w[o * fan_in..(o + 1) * fan_in]);
                }
                // tanh'(z) = 1 - a^2
                for (d, a) in da.iter_mut().zip(input) {
                    *d *= 1.0 - a * a;
                }
                dz = da;
            }
        }
    }
    total * inv_n
}

/// Adds the metric term's gradient (scaled by `weight`) into `grad` and
/// returns the metric value.
fn metric_grad(params: &[f64], loss: &LossSpec<'_>, weight: f64, grad: &mut [f64]) -> f64 {
    match *loss {
        LossSpec::Normal => 0.0,
        LossSpec::Euclidean { anchor, .. } => {
            let diff = vecops::sub(params, anchor);
            let dist = vecops::norm2(&diff);
            if dist > 0.0 {
                vecops::axpy(grad, weight / dist, &diff);
            }
            dist
        }
        LossSpec::Cosine { anchor, .. } => {
            let na = vecops::norm2(anchor);
            let nw = vecops::norm2(params);
            if na == 0.0 || nw == 0.0 {
                return 0.0;
            }
            let ip = vecops::dot(anchor, params);
            let cos = ip / (na * nw);
            // d(1 - cos)/dw = -(a / (|a||w|) - cos * w / |w|^2)
            vecops::axpy(grad, -weight / (na * nw), anchor);
            vecops::axpy(grad, weight * cos / (nw * nw), params);
            1.0 - cos
        }
    }
}

fn loss_grad_indices(
    model: &FlatModel,
    data: &LabeledDataset,
    indices: &[usize],
    loss: &LossSpec<'_>,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.num_params()];
    let alpha = match *loss {
        LossSpec::Normal => 0.0,
        LossSpec::Euclidean { alpha, .. } | LossSpec::Cosine { alpha, .. } => alpha,
    };
    let ce = cross_entropy_grad(model, data, indices, &mut grad);
    if alpha == 0.0 {
        return (ce, grad);
    }
    vecops::scale(&mut grad, 1.0 - alpha);
    let metric = metric_grad(&model.params, loss, alpha, &mut grad);
    ((1.0 - alpha) * ce + alpha * metric, grad)
}

/// Loss on the whole `batch` and its gradient with respect to all parameters.
pub fn forward_loss_grad(
    model: &FlatModel,
    batch: &LabeledDataset,
    loss: &LossSpec<'_>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(config("empty batch"));
    }
    model.check_width(batch)?;
    loss.validate(model.num_params())?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    Ok(loss_grad_indices(model, batch, &indices, loss))
}

#[derive(Debug, Clone)]
pub struct LocalTrainOutput {
    pub model: FlatModel,
    /// Trained parameters minus the starting parameters.
    pub delta: Vec<f64>,
    /// Mean minibatch loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn local_train(
    model: &FlatModel,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    loss: &LossSpec<'_>,
) -> Result<LocalTrainOutput> {
    local_train_masked(model, dataset, cfg, loss, None)
}

/// Minibatch SGD. Coordinates flagged `true` in `frozen` receive no update.
pub fn local_train_masked(
    model: &FlatModel,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    loss: &LossSpec<'_>,
    frozen: Option<&[bool]>,
) -> Result<LocalTrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(config("local dataset is empty"));
    }
    model.check_width(dataset)?;
    loss.validate(model.num_params())?;
    if let Some(mask) = frozen {
        if mask.len() != model.num_params() {
            return Err(shape("gradient mask length differs from parameter count"));
        }
    }

    let mut rng = rng_from_seed(cfg.seed);
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (l, mut grad) = loss_grad_indices(&current, dataset, chunk, loss);
            if cfg.weight_decay > 0.0 {
                vecops::axpy(&mut grad, cfg.weight_decay, &current.params);
            }
            if let Some(mask) = frozen {
                for (g, &f) in grad.iter_mut().zip(mask) {
                    if f {
                        *g = 0.0;
                    }
                }
            }
            vecops::axpy(&mut current.params, -cfg.learning_rate, &grad);
            sum += l;
            batches += 1;
        }
        if current.params.iter().any(|p| !p.is_finite()) {
            return Err(crate::Error::Numerical(
                "non-finite parameter after SGD step".into(),
            ));
        }
        epoch_losses.push(sum / batches as f64);
    }
    let delta = vecops::sub(&current.params, &model.params);
    Ok(LocalTrainOutput {
        model: current,
        delta,
        epoch_losses,
    })
}
