//! Experiment manifests and the artifacts the command-line front end writes:
//! per-round `metrics.csv`, `summary.json`, `calibration.json` and the
//! `sweep_summary.csv` table of a grid.
//!
//! Manifests are TOML with a mandatory `schema_version`. Unknown keys are
//! rejected, and every diagnostic names the offending field.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attacks::{AttackKind, AttackSpec};
use crate::bo::{run_bo, BoConfig, BoResult};
use crate::error::{Error, Result};
use crate::sim::{run_experiment, weights_objective, DefenseMode, ExperimentResult, RoundRecord, ScenarioConfig};
use crate::trust::{Tier, TierSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides the manifest's `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "TTI_OUTPUT_DIR";

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "mta",
    "asr",
    "n_trusted",
    "n_suspicious",
    "n_malicious_tier",
    "n_accepted_suspects",
    "n_rs_filtered",
];

pub const SWEEP_HEADER: [&str; 10] = [
    "point",
    "num_malicious",
    "defense_mode",
    "attack",
    "tiering",
    "seed",
    "final_mta",
    "final_asr",
    "final_asr_non_target",
    "opacity_breaches",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub run_label: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    pub bo: BoConfig,
    /// Scenario seeds averaged per objective evaluation; empty means the
    /// scenario's own seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Attack axis entry; `none` runs the point without an adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAttack {
    None,
    BoundedScaling,
    EuclideanConstrained,
    CosineConstrained,
    Neurotoxin,
}

impl SweepAttack {
    pub fn kind(self) -> Option<AttackKind> {
        match self {
            SweepAttack::None => None,
            SweepAttack::BoundedScaling => Some(AttackKind::BoundedScaling),
            SweepAttack::EuclideanConstrained => Some(AttackKind::EuclideanConstrained),
            SweepAttack::CosineConstrained => Some(AttackKind::CosineConstrained),
            SweepAttack::Neurotoxin => Some(AttackKind::Neurotoxin),
        }
    }
}

/// Grid axes. Absent axes keep the base scenario's value; a present but
/// empty axis is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_malicious: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense_modes: Option<Vec<DefenseMode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacks: Option<Vec<SweepAttack>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiering: Option<Vec<TierSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

/// One resolved sweep grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub num_malicious: usize,
    pub defense_mode: DefenseMode,
    pub attack: Option<AttackKind>,
    pub tiering: TierSpec,
    pub seed: u64,
}

impl GridPoint {
    pub fn attack_label(&self) -> &'static str {
        self.attack.map_or("none", AttackKind::as_str)
    }

    pub fn dir_name(&self) -> String {
        format!(
            "{:03}_m{}_{}_{}_{}_s{}",
            self.index,
            self.num_malicious,
            self.defense_mode.as_str(),
            self.attack_label(),
            tiering_label(&self.tiering),
            self.seed
        )
    }

    pub fn scenario(&self, base: &ScenarioConfig) -> ScenarioConfig {
        let mut s = base.clone();
        s.num_malicious = self.num_malicious;
        s.defense_mode = self.defense_mode;
        s.tiering = self.tiering;
        s.seed = self.seed;
        s.attack = self.attack.map(|kind| match &base.attack {
            Some(spec) => AttackSpec { kind, ..spec.clone() },
            None => AttackSpec::new(kind),
        });
        s
    }
}

pub fn tiering_label(t: &TierSpec) -> String {
    match *t {
        TierSpec::Proportion {
            p_trusted,
            p_suspicious,
            p_malicious,
        } => format!("p{p_trusted:.2}-{p_suspicious:.2}-{p_malicious:.2}"),
        TierSpec::Threshold { tau_high, tau_low } => format!("t{tau_high:.2}-{tau_low:.2}"),
    }
}

/// Command-line overrides applied on top of a manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn manifest_err(field: impl Into<String>, message: impl ToString) -> Error {
    Error::Manifest {
        field: field.into(),
        message: message.to_string(),
    }
}

fn within(field: &str, res: Result<()>) -> Result<()> {
    res.map_err(|e| match e {
        Error::Config(msg) => manifest_err(field, msg),
        other => manifest_err(field, other),
    })
}

/// Exit status for a failed command: 2 for manifest problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Manifest { .. } => 2,
        _ => 1,
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let table: toml::Table = toml::from_str(text).map_err(|e| manifest_err("<syntax>", e.message()))?;
    let manifest: Manifest = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        manifest_err(field, e.into_inner().message())
    })?;
    validate_manifest(&manifest)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| manifest_err("<file>", format!("{}: {e}", path.display())))?;
    parse_manifest(&text)
}

pub fn validate_manifest(m: &Manifest) -> Result<()> {
    if m.schema_version != SCHEMA_VERSION {
        return Err(manifest_err(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", m.schema_version),
        ));
    }
    if m.run_label.trim().is_empty() {
        return Err(manifest_err("run_label", "must be nonempty"));
    }
    validate_scenario(&m.scenario, "scenario")?;
    if let Some(cal) = &m.calibration {
        within("calibration.bo", cal.bo.validate())?;
    }
    if let Some(sweep) = &m.sweep {
        let points = grid_points(&m.scenario, sweep)?;
        for p in &points {
            within("sweep", p.scenario(&m.scenario).validate())?;
        }
    }
    Ok(())
}

fn validate_scenario(s: &ScenarioConfig, prefix: &str) -> Result<()> {
    let f = |name: &str| format!("{prefix}.{name}");
    within(&f("tiering"), s.tiering.validate())?;
    within(&f("transform"), s.transform.validate())?;
    within(&f("train"), s.train.validate())?;
    if let Some(a) = &s.attack {
        within(&f("attack"), a.validate())?;
    }
    within(&f("trigger"), s.trigger.validate(s.data.feature_dim, s.data.num_classes))?;
    within(&f("model"), s.model_dims().validate())?;
    within(prefix, s.validate())
}

/// Expands the sweep axes into grid points in a fixed nesting order:
/// malicious count, defense, attack, tiering, seed.
pub fn grid_points(base: &ScenarioConfig, sweep: &SweepSpec) -> Result<Vec<GridPoint>> {
    fn axis<T: Clone>(name: &str, given: &Option<Vec<T>>, fallback: T) -> Result<Vec<T>> {
        match given {
            Some(v) if v.is_empty() => Err(manifest_err(format!("sweep.{name}"), "axis is empty")),
            Some(v) => Ok(v.clone()),
            None => Ok(vec![fallback]),
        }
    }
    let no_axis = sweep.num_malicious.is_none()
        && sweep.defense_modes.is_none()
        && sweep.attacks.is_none()
        && sweep.tiering.is_none()
        && sweep.seeds.is_none();
    if no_axis {
        return Err(manifest_err("sweep", "declares no axis"));
    }
    if sweep.num_malicious.is_some() && base.malicious_ids.is_some() {
        return Err(manifest_err(
            "sweep.num_malicious",
            "cannot sweep the malicious count with fixed scenario.malicious_ids",
        ));
    }
    let ms = axis("num_malicious", &sweep.num_malicious, base.num_malicious)?;
    let modes = axis("defense_modes", &sweep.defense_modes, base.defense_mode)?;
    let attacks: Vec<Option<AttackKind>> = match &sweep.attacks {
        Some(v) if v.is_empty() => return Err(manifest_err("sweep.attacks", "axis is empty")),
        Some(v) => v.iter().map(|a| a.kind()).collect(),
        None => vec![base.attack.as_ref().map(|a| a.kind)],
    };
    let tiers = axis("tiering", &sweep.tiering, base.tiering)?;
    let seeds = axis("seeds", &sweep.seeds, base.seed)?;

    let mut out = Vec::new();
    for &m in &ms {
        for &mode in &modes {
            for &attack in &attacks {
                for &tiering in &tiers {
                    for &seed in &seeds {
                        out.push(GridPoint {
                            index: out.len(),
                            num_malicious: m,
                            defense_mode: mode,
                            attack,
                            tiering,
                            seed,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Applies overrides and returns the resolved output directory.
pub fn apply_overrides(m: &mut Manifest, ov: &Overrides) -> PathBuf {
    if let Some(seed) = ov.seed {
        m.scenario.seed = seed;
        if let Some(sweep) = &mut m.sweep {
            if sweep.seeds.is_some() {
                sweep.seeds = Some(vec![seed]);
            }
        }
    }
    ov.output_dir.clone().unwrap_or_else(|| m.output_dir.clone())
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

pub fn metrics_row(rec: &RoundRecord) -> [String; 8] {
    [
        rec.round.to_string(),
        fmt6(rec.mta),
        fmt6(rec.asr),
        rec.tier_count(Tier::Trusted).to_string(),
        rec.tier_count(Tier::Suspicious).to_string(),
        rec.tier_count(Tier::Malicious).to_string(),
        rec.accepted_suspects().to_string(),
        rec.n_rs_filtered.to_string(),
    ]
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

pub fn write_metrics_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for rec in records {
        w.write_record(metrics_row(rec))?;
    }
    w.flush()?;
    Ok(())
}

/// Serializes JSON with sorted keys, two-space indentation and every float
/// at six decimals, so that parse and re-serialize is byte-stable.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, v: &Value, depth: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                match n.as_f64() {
                    Some(x) if x.is_finite() => out.push_str(&fmt6(x)),
                    _ => out.push_str("null"),
                }
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[*k], depth + 1);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, canonical_json(v))?;
    Ok(())
}

pub fn summary_value(label: &str, scenario: &ScenarioConfig, res: &ExperimentResult, wall_time_s: f64) -> Result<Value> {
    let last = res.final_record();
    let breaches: usize = res.records.iter().map(|r| r.opacity_breaches).sum();
    Ok(json!({
        "run_label": label,
        "seed": scenario.seed,
        "rounds": res.records.len(),
        "final_mta": last.mta,
        "final_asr": last.asr,
        "final_asr_non_target": last.asr_non_target,
        "malicious_ids": res.malicious,
        "opacity_breaches": breaches,
        "wall_time_s": wall_time_s,
        "config": serde_json::to_value(scenario)?,
    }))
}

/// Result of one executed scenario.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub final_mta: f64,
    pub final_asr: f64,
    pub final_asr_non_target: f64,
    pub opacity_breaches: usize,
}

/// Runs one scenario and writes its metrics and summary into `dir`.
pub fn execute_run(label: &str, scenario: &ScenarioConfig, dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(dir)?;
    let started = Instant::now();
    let res = run_experiment(scenario)?;
    let wall = started.elapsed().as_secs_f64();
    write_metrics_csv(&dir.join(METRICS_FILE), &res.records)?;
    write_json(&dir.join(SUMMARY_FILE), &summary_value(label, scenario, &res, wall)?)?;
    let last = res.final_record();
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        final_mta: last.mta,
        final_asr: last.asr,
        final_asr_non_target: last.asr_non_target,
        opacity_breaches: res.records.iter().map(|r| r.opacity_breaches).sum(),
    })
}

pub fn cmd_run(manifest_path: &Path, ov: &Overrides) -> Result<RunOutcome> {
    let mut m = load_manifest(manifest_path)?;
    let dir = apply_overrides(&mut m, ov);
    execute_run(&m.run_label, &m.scenario, &dir)
}

/// Mean calibration objective of `weights` over the given scenario seeds.
pub fn calibration_objective(
    scenario: &ScenarioConfig,
    seeds: &[u64],
    weights: &crate::trust::TrustWeights,
    lambda: f64,
) -> Result<f64> {
    let vals = seeds
        .par_iter()
        .map(|&s| weights_objective(&scenario.clone().with_seed(s), weights, lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn calibration_value(label: &str, cal: &CalibrationSpec, seeds: &[u64], res: &BoResult) -> Value {
    json!({
        "run_label": label,
        "n_init": cal.bo.n_init,
        "n_iter": cal.bo.n_iter,
        "lambda_tradeoff": cal.bo.lambda_tradeoff,
        "bo_seed": cal.bo.seed,
        "scenario_seeds": seeds,
        "records": res.records.iter().map(|r| json!({"beta": r.beta, "objective": r.objective})).collect::<Vec<_>>(),
        "beta_star": res.best.beta,
        "best_objective": res.best.objective,
    })
}

pub fn cmd_calibrate(manifest_path: &Path, ov: &Overrides) -> Result<BoResult> {
    let mut m = load_manifest(manifest_path)?;
    let dir = apply_overrides(&mut m, ov);
    let cal = m
        .calibration
        .clone()
        .ok_or_else(|| manifest_err("calibration", "missing; calibrate needs a [calibration.bo] table"))?;
    let seeds = if cal.seeds.is_empty() { vec![m.scenario.seed] } else { cal.seeds.clone() };
    let dim = m.scenario.trust_weights.as_slice().len();
    let res = run_bo(&cal.bo, dim, |w| {
        calibration_objective(&m.scenario, &seeds, w, cal.bo.lambda_tradeoff)
    })?;
    fs::create_dir_all(&dir)?;
    write_json(&dir.join(CALIBRATION_FILE), &calibration_value(&m.run_label, &cal, &seeds, &res))?;
    Ok(res)
}

pub fn cmd_sweep(manifest_path: &Path, ov: &Overrides) -> Result<Vec<(GridPoint, RunOutcome)>> {
    let mut m = load_manifest(manifest_path)?;
    let dir = apply_overrides(&mut m, ov);
    let sweep = m
        .sweep
        .clone()
        .ok_or_else(|| manifest_err("sweep", "missing; sweep needs a [sweep] table with at least one axis"))?;
    let points = grid_points(&m.scenario, &sweep)?;
    fs::create_dir_all(&dir)?;
    let outcomes = points
        .par_iter()
        .map(|p| {
            let label = format!("{}/{}", m.run_label, p.dir_name());
            execute_run(&label, &p.scenario(&m.scenario), &dir.join(p.dir_name()))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(GridPoint, RunOutcome)> = points.into_iter().zip(outcomes).collect();
    write_sweep_summary(&dir.join(SWEEP_SUMMARY_FILE), &rows)?;
    Ok(rows)
}

pub fn write_sweep_summary(path: &Path, rows: &[(GridPoint, RunOutcome)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SWEEP_HEADER)?;
    for (p, o) in rows {
        w.write_record([
            p.dir_name(),
            p.num_malicious.to_string(),
            p.defense_mode.as_str().to_string(),
            p.attack_label().to_string(),
            tiering_label(&p.tiering),
            p.seed.to_string(),
            fmt6(o.final_mta),
            fmt6(o.final_asr),
            fmt6(o.final_asr_non_target),
            o.opacity_breaches.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
