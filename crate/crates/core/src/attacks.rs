//! Adversarial client behaviors: bounded scaling, Euclidean- and
//! cosine-constrained training, and Neurotoxin-style sparse poisoning.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{config, shape, Result};
use crate::model::{local_train, local_train_masked, FlatModel, LossSpec, TrainConfig};
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    BoundedScaling,
    EuclideanConstrained,
    CosineConstrained,
    Neurotoxin,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::BoundedScaling,
        AttackKind::EuclideanConstrained,
        AttackKind::CosineConstrained,
        AttackKind::Neurotoxin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::BoundedScaling => "bounded_scaling",
            AttackKind::EuclideanConstrained => "euclidean_constrained",
            AttackKind::CosineConstrained => "cosine_constrained",
            AttackKind::Neurotoxin => "neurotoxin",
        }
    }
}

fn default_alpha_mix() -> f64 {
    0.5
}
fn default_scale_factor() -> f64 {
    5.0
}
fn default_norm_bound_factor() -> f64 {
    1.5
}
fn default_mask_top_fraction() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Weight of the distance term in the constrained losses.
    #[serde(default = "default_alpha_mix")]
    pub alpha_mix: f64,
    #[serde(default = "default_scale_factor")]
    pub scale_factor: f64,
    /// Fixed clipping bound for bounded scaling. When absent the simulator
    /// derives one from `norm_bound_factor` and last round's benign norms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_bound: Option<f64>,
    #[serde(default = "default_norm_bound_factor")]
    pub norm_bound_factor: f64,
    #[serde(default = "default_mask_top_fraction")]
    pub mask_top_fraction: f64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            alpha_mix: default_alpha_mix(),
            scale_factor: default_scale_factor(),
            norm_bound: None,
            norm_bound_factor: default_norm_bound_factor(),
            mask_top_fraction: default_mask_top_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return Err(config(format!("alpha_mix {} outside [0, 1]", self.alpha_mix)));
        }
        match self.kind {
            AttackKind::BoundedScaling => {
                if !(self.scale_factor > 1.0 && self.scale_factor.is_finite()) {
                    return Err(config("scale_factor must be finite and > 1"));
                }
                if let Some(b) = self.norm_bound {
                    if !(b > 0.0 && b.is_finite()) {
                        return Err(config("norm_bound must be positive"));
                    }
                }
                if !(self.norm_bound_factor > 0.0 && self.norm_bound_factor.is_finite()) {
                    return Err(config("norm_bound_factor must be positive"));
                }
            }
            AttackKind::Neurotoxin => {
                if !(self.mask_top_fraction > 0.0 && self.mask_top_fraction < 1.0) {
                    return Err(config("mask_top_fraction must lie in (0, 1)"));
                }
            }
            AttackKind::EuclideanConstrained | AttackKind::CosineConstrained => {}
        }
        Ok(())
    }
}

/// Round-specific information available to an attacker.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttackContext<'a> {
    /// Proxy for coordinates benign clients update heavily (Neurotoxin).
    pub benign_direction_hint: Option<&'a [f64]>,
    /// Clipping bound resolved for this round (bounded scaling).
    pub norm_bound: Option<f64>,
}

/// Rescales `v` so its Euclidean norm is at most `bound`.
pub fn clip_norm(v: &[f64], bound: f64) -> Vec<f64> {
    let n = vecops::norm2(v);
    if n <= bound || n == 0.0 {
        return v.to_vec();
    }
    let s = bound / n;
    v.iter().map(|x| x * s).collect()
}

/// Coordinates to freeze: the top `fraction` of `|hint|`. A constant hint
/// carries no information about benign usage and freezes nothing.
pub fn neurotoxin_mask(hint: &[f64], fraction: f64) -> Vec<bool> {
    let s = hint.len();
    let mut mask = vec![false; s];
    if s == 0 {
        return mask;
    }
    let first = hint[0].abs();
    if hint.iter().all(|h| h.abs() == first) {
        return mask;
    }
    let k = ((fraction * s as f64).round() as usize).min(s);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| hint[b].abs().total_cmp(&hint[a].abs()).then(a.cmp(&b)));
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Runs one malicious client's local round on already-poisoned data and
/// returns the update it transmits.
pub fn attack_local_round(
    model_prev: &FlatModel,
    poisoned: &LabeledDataset,
    spec: &AttackSpec,
    cfg: &TrainConfig,
    ctx: &AttackContext<'_>,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let anchor = &model_prev.params;
    match spec.kind {
        AttackKind::BoundedScaling => {
            let bound = spec.norm_bound.or(ctx.norm_bound).ok_or_else(|| {
                config("bounded scaling needs a norm bound for this round")
            })?;
            let raw = local_train(model_prev, poisoned, cfg, &LossSpec::Normal)?.delta;
            let scaled: Vec<f64> = raw.iter().map(|x| x * spec.scale_factor).collect();
            Ok(clip_norm(&scaled, bound))
        }
        AttackKind::EuclideanConstrained => {
            let loss = LossSpec::Euclidean { alpha: spec.alpha_mix, anchor };
            Ok(local_train(model_prev, poisoned, cfg, &loss)?.delta)
        }
        AttackKind::CosineConstrained => {
            let loss = LossSpec::Cosine { alpha: spec.alpha_mix, anchor };
            Ok(local_train(model_prev, poisoned, cfg, &loss)?.delta)
        }
        AttackKind::Neurotoxin => {
            let hint = ctx
                .benign_direction_hint
                .ok_or_else(|| config("neurotoxin requires a benign direction hint"))?;
            if hint.len() != model_prev.num_params() {
                return Err(shape("benign direction hint length differs from model"));
            }
            let mask = neurotoxin_mask(hint, spec.mask_top_fraction);
            Ok(local_train_masked(model_prev, poisoned, cfg, &LossSpec::Normal, Some(&mask))?.delta)
        }
    }
}
