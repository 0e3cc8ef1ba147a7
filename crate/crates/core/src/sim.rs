//! The trust-then-inspect round loop, baseline defenses and metrics.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_local_round, AttackContext, AttackKind, AttackSpec};
use crate::data::{
    apply_trigger_for_eval, dirichlet_partition, generate_scaled_dataset, poison_dataset, LabeledDataset,
    PartitionSpec, TriggerSpec,
};
use crate::error::{config, Error, Result};
use crate::inspect::{inspect, reference_layers, Suspects};
use crate::model::{init_model, local_train, FlatModel, LayerMap, LossSpec, ModelDims, TrainConfig};
use crate::ota::{ota_aggregate, ota_aggregate_weighted, SealedUploads};
use crate::reputation::ReputationLedger;
use crate::rng::{derive_seed, rng_from_seed};
use crate::trust::{
    assess, compute_indicators, geometric_indicators, IndicatorVector, tier_clients, Tier, TierSpec, TransformParams, TrustAssessment,
    TrustWeights,
};
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    Tti,
    TdaOnly,
    L2Only,
    SpikinessOnly,
    ModelWise,
    Bev,
    None,
}

impl DefenseMode {
    pub const ALL: [DefenseMode; 7] = [
        DefenseMode::Tti,
        DefenseMode::TdaOnly,
        DefenseMode::L2Only,
        DefenseMode::SpikinessOnly,
        DefenseMode::ModelWise,
        DefenseMode::Bev,
        DefenseMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefenseMode::Tti => "tti",
            DefenseMode::TdaOnly => "tda_only",
            DefenseMode::L2Only => "l2_only",
            DefenseMode::SpikinessOnly => "spikiness_only",
            DefenseMode::ModelWise => "model_wise",
            DefenseMode::Bev => "bev",
            DefenseMode::None => "none",
        }
    }

    /// Single-indicator ablations replace the weights with a simplex vertex.
    fn weight_override(self) -> Option<usize> {
        match self {
            DefenseMode::TdaOnly => Some(0),
            DefenseMode::L2Only => Some(1),
            DefenseMode::SpikinessOnly => Some(2),
            _ => None,
        }
    }
}

/// BEV aggregation weights for trusted / suspicious / malicious tiers.
pub const BEV_WEIGHTS: [f64; 3] = [1.0, 0.1, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub class_mean_scale: f64,
    pub test_per_class: usize,
    pub cluster_spread: f64,
    pub dirichlet_alpha: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 32,
            train_per_class: 100,
            class_mean_scale: 1.0,
            test_per_class: 50,
            cluster_spread: 0.2,
            dirichlet_alpha: 0.5,
        }
    }
}

fn default_trigger() -> TriggerSpec {
    TriggerSpec {
        coords: vec![28, 29, 30, 31],
        offset: 2.0,
        target_label: 0,
        poison_rate: 0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_clients: usize,
    /// Number of attackers; ignored when `malicious_ids` is given.
    pub num_malicious: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub malicious_ids: Option<Vec<usize>>,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    pub trigger: TriggerSpec,
    pub tiering: TierSpec,
    pub transform: TransformParams,
    pub trust_weights: TrustWeights,
    pub rho: f64,
    pub rounds: usize,
    pub warm_up: usize,
    pub ota_noise_std: f64,
    pub defense_mode: DefenseMode,
    /// After this round, skip both stages and admit clients by reputation alone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rs_only_after_round: Option<usize>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            num_malicious: 6,
            malicious_ids: None,
            data: DataConfig::default(),
            hidden: vec![64, 32],
            train: TrainConfig {
                learning_rate: 0.1,
                local_epochs: 2,
                batch_size: 10,
                seed: 0,
                weight_decay: 0.0,
            },
            attack: None,
            trigger: default_trigger(),
            tiering: TierSpec::proportion(0.5, 0.3, 0.2),
            transform: TransformParams::default(),
            trust_weights: TrustWeights::uniform(3),
            rho: 0.6,
            rounds: 60,
            warm_up: 10,
            ota_noise_std: 0.0,
            defense_mode: DefenseMode::Tti,
            rs_only_after_round: None,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn with_attack(mut self, kind: Option<AttackKind>) -> Self {
        self.attack = kind.map(AttackSpec::new);
        self
    }

    pub fn with_defense(mut self, mode: DefenseMode) -> Self {
        self.defense_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims::new(self.data.feature_dim, self.hidden.clone(), self.data.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_clients;
        if k < 2 {
            return Err(config("num_clients must be at least 2"));
        }
        let m = self.malicious_ids.as_ref().map_or(self.num_malicious, Vec::len);
        if m >= k {
            return Err(config(format!("{m} malicious clients leave no benign client among {k}")));
        }
        if let Some(ids) = &self.malicious_ids {
            if ids.iter().any(|&i| i >= k) {
                return Err(config("malicious id outside client range"));
            }
            if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
                return Err(config("duplicate malicious id"));
            }
        }
        self.model_dims().validate()?;
        self.train.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        self.trigger.validate(self.data.feature_dim, self.data.num_classes)?;
        self.tiering.validate()?;
        self.transform.validate()?;
        if self.trust_weights.as_slice().len() != 3 {
            return Err(config("trust_weights needs one weight per indicator (3)"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(config("rho must lie in (0, 1)"));
        }
        if self.rounds == 0 {
            return Err(config("rounds must be positive"));
        }
        if self.warm_up >= self.rounds {
            return Err(config("warm_up must be smaller than rounds"));
        }
        if !(self.ota_noise_std >= 0.0 && self.ota_noise_std.is_finite()) {
            return Err(config("ota_noise_std must be nonnegative"));
        }
        if !(self.data.dirichlet_alpha > 0.0) {
            return Err(config("dirichlet_alpha must be positive"));
        }
        if self.data.train_per_class * self.data.num_classes < k {
            return Err(config("not enough training samples for every client"));
        }
        if self.data.test_per_class == 0 {
            return Err(config("test_per_class must be positive"));
        }
        Ok(())
    }
}

/// Everything observable about one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mta: f64,
    pub asr: f64,
    /// Backdoor success restricted to test samples whose true class is not the target.
    pub asr_non_target: f64,
    pub tiers: Vec<Tier>,
    pub scores: Vec<f64>,
    /// Raw Stage I indicators per client; empty when Stage I did not run.
    pub indicators: Vec<IndicatorVector>,
    /// `(client_id, accepted)` for each inspected suspect.
    pub verdicts: Vec<(usize, bool)>,
    pub final_participants: Vec<usize>,
    pub rs_snapshot: Vec<u64>,
    pub n_rs_filtered: usize,
    pub stalled: bool,
    /// Suspects whose update also travelled in the trusted superposition.
    /// Always zero unless the opacity boundary is broken.
    pub opacity_breaches: usize,
    /// Threshold tiering left no trusted client and the top scorer was promoted.
    pub empty_trusted_fallback: bool,
}

impl RoundRecord {
    pub fn tier_count(&self, tier: Tier) -> usize {
        self.tiers.iter().filter(|&&t| t == tier).count()
    }

    pub fn accepted_suspects(&self) -> usize {
        self.verdicts.iter().filter(|(_, a)| *a).count()
    }
}

/// Client-side environment fixed for a whole run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<LabeledDataset>,
    pub malicious: BTreeSet<usize>,
    pub test: LabeledDataset,
}

impl Federation {
    pub fn build(scenario: &ScenarioConfig) -> Result<Self> {
        let d = &scenario.data;
        let train = generate_scaled_dataset(
            d.num_classes,
            d.feature_dim,
            d.train_per_class,
            d.class_mean_scale,
            d.cluster_spread,
            derive_seed(scenario.seed, &[1]),
        )?;
        let test = generate_scaled_dataset(
            d.num_classes,
            d.feature_dim,
            d.test_per_class,
            d.class_mean_scale,
            d.cluster_spread,
            derive_seed(scenario.seed, &[2]),
        )?;
        let spec = PartitionSpec {
            num_clients: scenario.num_clients,
            dirichlet_alpha: d.dirichlet_alpha,
            seed: derive_seed(scenario.seed, &[3]),
        };
        let mut clients = dirichlet_partition(&train, &spec)?;
        let malicious: BTreeSet<usize> = match &scenario.malicious_ids {
            Some(ids) => ids.iter().copied().collect(),
            None => {
                let mut rng = rng_from_seed(derive_seed(scenario.seed, &[4]));
                sample(&mut rng, scenario.num_clients, scenario.num_malicious)
                    .into_iter()
                    .collect()
            }
        };
        if scenario.attack.is_some() {
            for &m in &malicious {
                clients[m] = poison_dataset(
                    &clients[m],
                    &scenario.trigger,
                    derive_seed(scenario.seed, &[5, m as u64]),
                )?;
            }
        }
        Ok(Self {
            clients,
            malicious,
            test,
        })
    }

    pub fn is_attacking(&self, scenario: &ScenarioConfig, client: usize) -> bool {
        scenario.attack.is_some() && self.malicious.contains(&client)
    }
}

/// Mutable server-side state carried between rounds.
#[derive(Debug, Clone)]
pub struct RunState {
    pub global: FlatModel,
    pub ledger: ReputationLedger,
    /// Index of the next round to run (1-based).
    pub round: usize,
    pub last_global_update: Option<Vec<f64>>,
    pub last_benign_median_norm: Option<f64>,
}

impl RunState {
    pub fn new(scenario: &ScenarioConfig) -> Result<Self> {
        Ok(Self {
            global: init_model(&scenario.model_dims(), derive_seed(scenario.seed, &[6]))?,
            ledger: ReputationLedger::new(scenario.num_clients, scenario.warm_up),
            round: 1,
            last_global_update: None,
            last_benign_median_norm: None,
        })
    }
}

/// Clean accuracy, backdoor success over all triggered test inputs, and
/// backdoor success over triggered inputs whose true class differs from the target.
pub fn evaluate_full(
    model: &FlatModel,
    clean_test: &LabeledDataset,
    trigger: &TriggerSpec,
) -> Result<(f64, f64, f64)> {
    if clean_test.is_empty() {
        return Err(config("empty test set"));
    }
    let mta = model.accuracy(clean_test);
    let triggered = apply_trigger_for_eval(&clean_test.features, trigger)?;
    let mut hits = 0usize;
    let mut hits_nt = 0usize;
    let mut total_nt = 0usize;
    for (x, &y) in triggered.iter().zip(&clean_test.labels) {
        let hit = model.predict(x) == trigger.target_label;
        hits += hit as usize;
        if y != trigger.target_label {
            total_nt += 1;
            hits_nt += hit as usize;
        }
    }
    let asr = hits as f64 / triggered.len() as f64;
    let asr_nt = if total_nt == 0 { 0.0 } else { hits_nt as f64 / total_nt as f64 };
    Ok((mta, asr, asr_nt))
}

/// `(MTA, ASR)` of `model`.
pub fn evaluate(model: &FlatModel, clean_test: &LabeledDataset, trigger: &TriggerSpec) -> Result<(f64, f64)> {
    let (mta, asr, _) = evaluate_full(model, clean_test, trigger)?;
    Ok((mta, asr))
}

fn client_train_config(scenario: &ScenarioConfig, round: usize, client: usize) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(scenario.seed, &[7, round as u64, client as u64]),
        ..scenario.train
    }
}

/// Local training of every client for the current round, returning the
/// deltas in client order and the benign median update norm.
pub fn local_updates(
    state: &RunState,
    scenario: &ScenarioConfig,
    fed: &Federation,
) -> Result<(Vec<Vec<f64>>, Option<f64>)> {
    let k = scenario.num_clients;
    let round = state.round;
    let benign: Vec<usize> = (0..k).filter(|&c| !fed.is_attacking(scenario, c)).collect();
    let attackers: Vec<usize> = (0..k).filter(|&c| fed.is_attacking(scenario, c)).collect();

    let benign_deltas = benign
        .par_iter()
        .map(|&c| {
            let cfg = client_train_config(scenario, round, c);
            local_train(&state.global, &fed.clients[c], &cfg, &LossSpec::Normal).map(|o| o.delta)
        })
        .collect::<Result<Vec<_>>>()?;
    let norms: Vec<f64> = benign_deltas.iter().map(|d| vecops::norm2(d)).collect();
    let benign_median = vecops::median(&norms);

    let mut deltas: Vec<Option<Vec<f64>>> = vec![None; k];
    for (c, d) in benign.iter().zip(benign_deltas) {
        deltas[*c] = Some(d);
    }

    if let Some(spec) = &scenario.attack {
        // The attacker sees only broadcast globals: the previous global update
        // stands in for benign usage, and last round's benign norm sets the clip.
        let ones;
        let hint: &[f64] = match &state.last_global_update {
            Some(u) => u,
            None => {
                ones = vec![1.0; state.global.num_params()];
                &ones
            }
        };
        let reference_norm = state.last_benign_median_norm.or(benign_median);
        let norm_bound = reference_norm.map(|n| spec.norm_bound_factor * n);
        let ctx = AttackContext {
            benign_direction_hint: Some(hint),
            norm_bound,
        };
        let attack_deltas = attackers
            .par_iter()
            .map(|&c| {
                let cfg = client_train_config(scenario, round, c);
                attack_local_round(&state.global, &fed.clients[c], spec, &cfg, &ctx)
            })
            .collect::<Result<Vec<_>>>()?;
        for (c, d) in attackers.iter().zip(attack_deltas) {
            deltas[*c] = Some(d);
        }
    }
    let deltas = deltas
        .into_iter()
        .map(|d| d.ok_or_else(|| Error::Internal("missing client update".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((deltas, benign_median))
}

fn stage_one(
    scenario: &ScenarioConfig,
    global_prev: &[f64],
    deltas: &[Vec<f64>],
) -> Result<(Vec<TrustAssessment>, Vec<Tier>, bool)> {
    let weights = match scenario.defense_mode.weight_override() {
        Some(i) => TrustWeights::vertex(3, i),
        None => scenario.trust_weights.clone(),
    };
    let indicators = geometric_indicators();
    let assessments = deltas
        .par_iter()
        .enumerate()
        .map(|(k, d)| assess(k, d, global_prev, &indicators, &scenario.transform, &weights))
        .collect::<Result<Vec<_>>>()?;
    let mut tiers = tier_clients(&assessments, &scenario.tiering)?;
    let mut fallback = false;
    if !tiers.contains(&Tier::Trusted) {
        // A trusted reference must exist; promote the best-scored client.
        let best = assessments
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.score.total_cmp(&b.score).then(b.client_id.cmp(&a.client_id)))
            .map(|(i, _)| i)
            .expect("at least one client");
        tiers[best] = Tier::Trusted;
        fallback = true;
    }
    Ok((assessments, tiers, fallback))
}

/// Executes one communication round and advances `state`.
pub fn run_round(state: &mut RunState, scenario: &ScenarioConfig, fed: &Federation) -> Result<RoundRecord> {
    let round = state.round;
    let k = scenario.num_clients;
    let (deltas, benign_median) = local_updates(state, scenario, fed)?;
    let noise_seed = derive_seed(scenario.seed, &[8, round as u64]);

    let mut tiers = vec![Tier::Trusted; k];
    let mut scores = vec![1.0; k];
    let mut indicators = Vec::new();
    let mut verdicts = Vec::new();
    let mut n_rs_filtered = 0;
    let mut opacity_breaches = 0;
    let mut empty_trusted_fallback = false;

    let rs_only = scenario
        .rs_only_after_round
        .is_some_and(|r| round > r && scenario.defense_mode != DefenseMode::None);

    let (update, participants): (Option<Vec<f64>>, Vec<usize>) = match scenario.defense_mode {
        DefenseMode::None => {
            let refs: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
            (Some(ota_aggregate(&refs, scenario.ota_noise_std, noise_seed)?), (0..k).collect())
        }
        _ if rs_only => {
            let all: Vec<usize> = (0..k).collect();
            let kept = state.ledger.mad_filter(&all, round);
            n_rs_filtered = k - kept.len();
            let refs: Vec<&[f64]> = kept.iter().map(|&c| deltas[c].as_slice()).collect();
            let update = if refs.is_empty() {
                None
            } else {
                Some(ota_aggregate(&refs, scenario.ota_noise_std, noise_seed)?)
            };
            (update, kept)
        }
        DefenseMode::Bev => {
            let (assess, t, fb) = stage_one(scenario, &state.global.params, &deltas)?;
            indicators = deltas
                .iter()
                .map(|d| compute_indicators(d, &state.global.params))
                .collect::<Result<_>>()?;
            tiers = t;
            scores = assess.iter().map(|a| a.score).collect();
            empty_trusted_fallback = fb;
            let weights: Vec<f64> = tiers
                .iter()
                .map(|t| match t {
                    Tier::Trusted => BEV_WEIGHTS[0],
                    Tier::Suspicious => BEV_WEIGHTS[1],
                    Tier::Malicious => BEV_WEIGHTS[2],
                })
                .collect();
            let refs: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
            let update = ota_aggregate_weighted(&refs, &weights, scenario.ota_noise_std, noise_seed)?;
            let participants = (0..k).filter(|&c| weights[c] > 0.0).collect();
            (Some(update), participants)
        }
        _ => {
            let (assess, t, fb) = stage_one(scenario, &state.global.params, &deltas)?;
            indicators = deltas
                .iter()
                .map(|d| compute_indicators(d, &state.global.params))
                .collect::<Result<_>>()?;
            tiers = t;
            scores = assess.iter().map(|a| a.score).collect();
            empty_trusted_fallback = fb;

            // Reputation depends only on past rounds, so the filter can be
            // applied before transmission; filtered trusted clients stay silent.
            let trusted: Vec<usize> = (0..k).filter(|&c| tiers[c] == Tier::Trusted).collect();
            let suspects: Vec<usize> = (0..k).filter(|&c| tiers[c] == Tier::Suspicious).collect();
            let trusted_kept = state.ledger.mad_filter(&trusted, round);
            n_rs_filtered += trusted.len() - trusted_kept.len();

            let sealed = SealedUploads::new(
                trusted_kept.clone(),
                trusted_kept.iter().map(|&c| deltas[c].clone()).collect(),
            );
            let reception = if sealed.is_empty() {
                None
            } else {
                Some(sealed.superpose(scenario.ota_noise_std, noise_seed)?)
            };

            let mut accepted = Vec::new();
            if let Some(rx) = &reception {
                if !suspects.is_empty() {
                    let layer_map = match scenario.defense_mode {
                        DefenseMode::ModelWise => LayerMap::single(state.global.num_params()),
                        _ => state.global.layer_map.clone(),
                    };
                    opacity_breaches = suspects.iter().filter(|s| rx.senders.contains(s)).count();
                    let reference = reference_layers(&rx.mean, &layer_map)?;
                    let suspect_deltas: Vec<&[f64]> = suspects.iter().map(|&c| deltas[c].as_slice()).collect();
                    let reputation: Vec<f64> = suspects.iter().map(|&c| state.ledger.score(c) as f64).collect();
                    let found = inspect(
                        &Suspects {
                            client_ids: &suspects,
                            deltas: &suspect_deltas,
                            reputation: &reputation,
                        },
                        &reference,
                        &layer_map,
                        scenario.rho,
                    )?;
                    verdicts = found.iter().map(|v| (v.client_id, v.accepted)).collect();
                    let passed: Vec<usize> = found.iter().filter(|v| v.accepted).map(|v| v.client_id).collect();
                    let kept = state.ledger.mad_filter(&passed, round);
                    n_rs_filtered += passed.len() - kept.len();
                    accepted = kept;
                }
            }

            let n_trusted = reception.as_ref().map_or(0, |r| r.senders.len());
            let total = n_trusted + accepted.len();
            let update = if total == 0 {
                None
            } else {
                // Exact participant mean rebuilt from the superposed trusted mean.
                let mut acc = match &reception {
                    Some(rx) => rx.mean.iter().map(|x| x * n_trusted as f64).collect(),
                    None => vec![0.0; state.global.num_params()],
                };
                for &c in &accepted {
                    vecops::add_assign(&mut acc, &deltas[c]);
                }
                vecops::scale(&mut acc, 1.0 / total as f64);
                Some(acc)
            };
            let mut participants: Vec<usize> = reception.map(|r| r.senders).unwrap_or_default();
            participants.extend(accepted);
            participants.sort_unstable();
            (update, participants)
        }
    };

    debug_assert!(participants.iter().all(|&c| tiers[c] != Tier::Malicious));
    state.ledger.increment(&participants)?;
    let stalled = update.is_none();
    if let Some(u) = &update {
        vecops::add_assign(&mut state.global.params, u);
    }
    state.last_global_update = update;
    state.last_benign_median_norm = benign_median;

    let (mta, asr, asr_non_target) = evaluate_full(&state.global, &fed.test, &scenario.trigger)?;
    state.round += 1;
    Ok(RoundRecord {
        round,
        mta,
        asr,
        asr_non_target,
        tiers,
        scores,
        indicators,
        verdicts,
        final_participants: participants,
        rs_snapshot: state.ledger.scores().to_vec(),
        n_rs_filtered,
        stalled,
        opacity_breaches,
        empty_trusted_fallback,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub final_model: FlatModel,
    pub malicious: Vec<usize>,
}

impl ExperimentResult {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("at least one round")
    }
}

pub fn run_experiment(scenario: &ScenarioConfig) -> Result<ExperimentResult> {
    scenario.validate()?;
    let fed = Federation::build(scenario)?;
    let mut state = RunState::new(scenario)?;
    let mut records = Vec::with_capacity(scenario.rounds);
    for _ in 0..scenario.rounds {
        records.push(run_round(&mut state, scenario, &fed)?);
    }
    Ok(ExperimentResult {
        records,
        final_model: state.global,
        malicious: fed.malicious.into_iter().collect(),
    })
}

/// Calibration objective: final `MTA - lambda * ASR` with the given weights.
pub fn weights_objective(scenario: &ScenarioConfig, weights: &TrustWeights, lambda: f64) -> Result<f64> {
    let mut s = scenario.clone();
    s.trust_weights = weights.clone();
    let res = run_experiment(&s)?;
    let last = res.final_record();
    Ok(crate::bo::objective_value(last.mta, last.asr, lambda))
}
