//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion is red.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scrat_core::controller::ControllerConfig;
use scrat_core::env::DMode;
use scrat_core::harness::{self, parse_config, run_cell, run_grid, write_report, AgentConfig, ExperimentConfig, ResultSet};
use scrat_core::ledger::{bootstrap_diff_ci, constraint_check, RunRecord, RunStatus, Verdict as LedgerVerdict, Weights, BOOTSTRAP_RESAMPLES};
use scrat_core::memory::{CueVector, Landmark, LandmarkSet, LookupQuery, MemoryStore, MemoryVariant, Query};
use scrat_core::rng::{RunStreams, Substream};
use scrat_core::state::{
    update_belief, Action, Belief, BeliefConfig, Dynamics, EmbodiedState, Family, ItemObservation, LatentEvidence, Observation,
    OptionChoice, OptionKind, Trace, TraceRecord,
};
use scrat_core::verifier::{evaluate, Placement, Verdict, VerifierKind, VerifierSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn config(doc: &str) -> ExperimentConfig {
    parse_config(doc).expect("acceptance config parses")
}

fn smoke_configs() -> Vec<ExperimentConfig> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke");
    let mut paths: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths.iter().map(|p| config(&fs::read_to_string(p).unwrap())).collect()
}

/// Runs one agent over the config's seeds in parallel, in seed order.
fn cells(cfg: &ExperimentConfig, agent: &AgentConfig) -> Vec<RunRecord> {
    let seeds: Vec<u64> = cfg.seeds.seeds().collect();
    seeds
        .par_iter()
        .map(|&s| run_cell(cfg, agent, s).expect("cell runs").record)
        .collect()
}

fn metric(records: &[RunRecord], name: &str) -> Vec<f64> {
    records.iter().map(|r| r.metric(name).expect(name)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn diff_ci(a: &[f64], b: &[f64], label: &str) -> (f64, f64) {
    let mut rng = RunStreams::new(0).child(Substream::Bootstrap, label);
    bootstrap_diff_ci(a, b, BOOTSTRAP_RESAMPLES, &mut rng)
}

fn runs_jsonl(results: &mut ResultSet) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    write_report(results, dir.path()).unwrap();
    fs::read(dir.path().join("runs.jsonl")).unwrap()
}

fn smoke_grid(jobs: usize) -> Vec<ResultSet> {
    smoke_configs().iter().map(|c| run_grid(c, jobs).unwrap()).collect()
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let mut first = smoke_grid(8);
    let elapsed = t.elapsed();
    let mut second = smoke_grid(8);
    let mut serial = smoke_grid(1);
    let mut mismatches = Vec::new();
    for i in 0..first.len() {
        let a = runs_jsonl(&mut first[i]);
        let b = runs_jsonl(&mut second[i]);
        let c = runs_jsonl(&mut serial[i]);
        if a != b || a != c {
            mismatches.push(first[i].config.family.to_string());
        }
    }
    let failed: usize = first.iter().map(ResultSet::failed_cells).sum();
    let cells: usize = first.iter().map(|r| r.records().count()).sum();
    Outcome::new(
        mismatches.is_empty() && failed == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{cells} smoke cells byte-identical across reruns and jobs 1 vs 8 (mismatching families: {mismatches:?}), {failed} failed, smoke grid {:.1}s < 60s",
            elapsed.as_secs_f64()
        ),
    )
}

fn h1() -> Outcome {
    let cfg = config(r#"{"family": "A", "env": {"z_range": [0.8, 0.8], "delay": 2}, "seeds": {"start": 0, "end": 100}}"#);
    let closed = cells(&cfg, &cfg.agent);
    let open_agent = AgentConfig {
        controller: ControllerConfig::open_loop(),
        ..cfg.agent.clone()
    };
    let open = cells(&cfg, &open_agent);
    let (sc, so) = (mean(&metric(&closed, "success")), mean(&metric(&open, "success")));
    Outcome::new(
        sc >= 0.9 && so <= 0.1,
        format!("z at range edge, d=2, 100 seeds: feedback+compensator success {sc:.2} >= 0.9, open-loop success {so:.2} <= 0.1"),
    )
}

fn h2() -> Outcome {
    let cfg = config(
        r#"{"family": "B",
            "env": {"n_events": 4096, "item_types": 8, "sigma_d": 0.02, "conflict_rate": 0.5},
            "ablations": ["flat_archive"],
            "seeds": {"start": 0, "end": 50}}"#,
    );
    let results = run_grid(&cfg, rayon::current_num_threads()).unwrap();
    let clustered: Vec<RunRecord> = results.variants[0].records.clone();
    let flat: Vec<RunRecord> = results.variants[1].records.clone();
    let (pc, pf) = (mean(&metric(&clustered, "mean_probes")), mean(&metric(&flat, "mean_probes")));
    let (cc, cf) = (metric(&clustered, "confusion_rate"), metric(&flat, "confusion_rate"));
    let (lo, hi) = diff_ci(&cf, &cc, "h2/confusion");
    Outcome::new(
        pc <= pf / 16.0 && mean(&cc) <= mean(&cf) && lo > 0.0,
        format!(
            "N=4096, 50 seeds: mean probes clustered {pc:.1} <= flat {pf:.1} / 16; confusion clustered {:.4} vs flat {:.4}, flat - clustered 95% CI [{lo:.4}, {hi:.4}] excludes 0",
            mean(&cc),
            mean(&cf)
        ),
    )
}

fn h3() -> Outcome {
    let cfg = config(r#"{"family": "C", "env": {"visibility": 0.5}, "seeds": {"start": 0, "end": 200}}"#);
    let mut aware = cfg.agent.clone();
    aware.observer.observer_aware = true;
    aware.verifier.placement = Placement::InLoop;
    let mut unaware = cfg.agent.clone();
    unaware.observer.observer_aware = false;
    unaware.verifier.placement = Placement::EndOnly;
    let a = cells(&cfg, &aware);
    let u = cells(&cfg, &unaware);
    let leak = |rs: &[RunRecord]| -> Vec<f64> { rs.iter().map(|r| r.ledger.as_ref().unwrap().leak_cost).collect() };
    let (la, lu) = (leak(&a), leak(&u));
    let (ma, mu) = (metric(&a, "verifier_miss_rate"), metric(&u, "verifier_miss_rate"));
    let (leak_lo, leak_hi) = diff_ci(&lu, &la, "h3/leak_cost");
    let (miss_lo, miss_hi) = diff_ci(&mu, &ma, "h3/miss_rate");
    Outcome::new(
        mean(&la) < mean(&lu) && mean(&ma) < mean(&mu) && leak_lo > 0.0 && miss_lo > 0.0,
        format!(
            "nu=0.5, 200 seeds: leak_cost aware+in-loop {:.3} < unaware+end-only {:.3} (CI [{leak_lo:.3}, {leak_hi:.3}]); miss rate {:.3} < {:.3} (CI [{miss_lo:.3}, {miss_hi:.3}])",
            mean(&la),
            mean(&lu),
            mean(&ma),
            mean(&mu)
        ),
    )
}

fn c1() -> Outcome {
    let cfg = config(
        r#"{"family": "D", "env": {"n_constraints": 40, "knowledge_fraction": 0.6}, "ablations": ["single_agent"], "seeds": {"start": 0, "end": 500}}"#,
    );
    assert_eq!(cfg.agent.mode, DMode::Differentiated);
    let results = run_grid(&cfg, rayon::current_num_threads()).unwrap();
    let diff = mean(&metric(&results.variants[0].records, "correlated_error"));
    let single = mean(&metric(&results.variants[1].records, "correlated_error"));
    Outcome::new(
        (diff - 0.16).abs() <= 0.03 && (single - 0.40).abs() <= 0.03,
        format!("500 seeds: correlated error differentiated {diff:.4} (0.16 ± 0.03), single agent {single:.4} (0.40 ± 0.03)"),
    )
}

fn fp_calibration() -> Outcome {
    let mut trace = Trace::new();
    trace
        .push(TraceRecord {
            step: 0,
            observation: Observation::new(vec![0.0]),
            action: Action::Idle,
            option_active: OptionChoice::new(OptionKind::Stabilize, &[]),
            observed_by_adversary: false,
        })
        .unwrap();
    let segment = trace.segment(0, 0).unwrap();
    let spec = VerifierSpec::covering(VerifierKind::Postcondition, "p", 0.1, 0.0, 0).unwrap();
    let truth = scrat_core::env::TruthFn(|_: &str, _: &scrat_core::state::TraceSegment<'_>| Ok(true));
    let mut noise = RunStreams::new(6).stream(Substream::VerifierNoise);
    let n = 10_000;
    let flipped = (0..n)
        .filter(|_| evaluate(&spec, &segment, &truth, None, &mut noise).unwrap().verdict == Some(Verdict::Fail))
        .count();
    let rate = flipped as f64 / n as f64;
    Outcome::new((rate - 0.1).abs() <= 0.01, format!("fp=0.1 over 10^4 true-pass evaluations: empirical {rate:.4} in 0.1 ± 0.01"))
}

fn accounting() -> Outcome {
    let results = smoke_grid(rayon::current_num_threads());
    let mut worst_fd: f64 = 0.0;
    let mut kappa_breaches = 0;
    let mut runs = 0;
    let h = 0.5;
    for r in results.iter().flat_map(|r| r.records()) {
        runs += 1;
        let Some(ledger) = r.ledger.as_ref() else {
            kappa_breaches += 1;
            continue;
        };
        let sum: f64 = r.kappa_by_module.values().sum();
        if r.status == RunStatus::Failed || (sum - ledger.compute_used).abs() > 1e-9 * ledger.compute_used.max(1.0) {
            kappa_breaches += 1;
        }
        let base = ledger.objective_value();
        let components = [ledger.latency_cost, ledger.leak_cost, ledger.repair_cost];
        for (i, c) in components.into_iter().enumerate() {
            let mut bumped = ledger.clone();
            let w: &mut Weights = &mut bumped.weights;
            match i {
                0 => w.lambda_tau += h,
                1 => w.lambda_l += h,
                _ => w.lambda_r += h,
            }
            let slope = (bumped.objective_value() - base) / h;
            worst_fd = worst_fd.max((slope - c).abs() / c.abs().max(1.0));
        }
    }
    let mut outcomes = vec![true; 92];
    outcomes.extend([false; 8]);
    let report = constraint_check(&outcomes, 0.1).unwrap();
    let wilson_ok = (report.wilson_lo - 0.850).abs() < 1.5e-3
        && (report.wilson_hi - 0.958).abs() < 1.5e-3
        && report.verdict == LedgerVerdict::Inconclusive;
    Outcome::new(
        worst_fd <= 1e-12 && wilson_ok && kappa_breaches == 0,
        format!(
            "objective finite-difference slope error {worst_fd:.1e} <= 1e-12 over {runs} smoke runs; 92/100 at delta 0.1 gives [{:.3}, {:.3}] {:?}; kappa conserved on {}/{runs} runs",
            report.wilson_lo,
            report.wilson_hi,
            report.verdict,
            runs - kappa_breaches
        ),
    )
}

fn brute(store: &MemoryStore, item_type: u32, cue: &CueVector) -> Option<u64> {
    let mut best: Option<(f64, u64)> = None;
    for e in store.episodes() {
        if e.item_type != item_type {
            continue;
        }
        let s = cue.similarity(&e.cue);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, e.id));
        }
    }
    best.map(|(_, id)| id)
}

fn memory_equivalence() -> (usize, usize) {
    let (mut queries, mut disagreements) = (0, 0);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let landmarks = LandmarkSet::new(
            (0..12)
                .map(|id| Landmark {
                    id,
                    position: [rng.random(), rng.random()],
                })
                .collect(),
        );
        for n in 1..=64u64 {
            let mut flat = MemoryStore::new(MemoryVariant::FlatArchive);
            let mut clustered = MemoryStore::new(MemoryVariant::ClusteredIndex);
            for step in 0..n {
                let obs = Observation {
                    landmarks: landmarks.iter().copied().collect(),
                    item: Some(ItemObservation {
                        item_type: rng.random_range(1..=4),
                        value: rng.random(),
                    }),
                    ..Default::default()
                };
                let dig = Action::Dig {
                    location: [rng.random(), rng.random()],
                };
                flat.write(step, &obs, &dig, None).unwrap();
                clustered.write(step, &obs, &dig, None).unwrap();
            }
            for e in flat.episodes().to_vec() {
                let cue = CueVector::encode(e.location, &landmarks).unwrap();
                let want = brute(&flat, e.item_type, &cue);
                let q = Query::Lookup(LookupQuery {
                    item_type: e.item_type,
                    value_band: None,
                    cue,
                });
                let got_flat = flat.retrieve(&q, &landmarks).unwrap().episode.map(|x| x.id);
                let got_clustered = clustered.retrieve(&q, &landmarks).unwrap().episode.map(|x| x.id);
                queries += 1;
                disagreements += usize::from(got_flat != want || got_clustered != want);
            }
        }
    }
    (queries, disagreements)
}

fn belief_oracle() -> f64 {
    let config = BeliefConfig {
        family: Family::A,
        observation_dim: 2,
        delay: 0,
        dynamics: Dynamics::CompliantDoubleIntegrator { dt: 0.05, gain_slope: 0.5 },
        rls_enabled: true,
        forgetting: 1.0,
    };
    let mut worst: f64 = 0.0;
    for (z, xs) in [(0.73, vec![1.4]), (0.21, vec![0.6, -2.0, 1.1]), (0.55, vec![0.05, 3.0])] {
        let mut b = Belief::new(Family::A, vec![0.5], vec![1e12], EmbodiedState::default()).unwrap();
        for &x in &xs {
            let obs = Observation {
                values: vec![0.0, 0.0],
                evidence: Some(LatentEvidence {
                    latent: 0,
                    regressor: x,
                    response: z * x,
                }),
                ..Default::default()
            };
            b = update_belief(&b, &obs, &Action::Idle, &config).unwrap();
        }
        let sxy: f64 = xs.iter().map(|x| x * z * x).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        worst = worst.max((b.latent_mean[0] - sxy / sxx).abs());
    }
    worst
}

fn oracles() -> Outcome {
    let (queries, disagreements) = memory_equivalence();
    let err = belief_oracle();
    Outcome::new(
        disagreements == 0 && err <= 1e-9,
        format!(
            "flat and clustered agree with brute force on {}/{queries} queries (stores of 1..=64, zero drift); belief vs least squares error {err:.1e} <= 1e-9",
            queries - disagreements
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("determinism", determinism),
        ("H1 separation", h1),
        ("H2 separation", h2),
        ("H3 separation", h3),
        ("C1 correlated error", c1),
        ("verifier noise calibration", fp_calibration),
        ("objective and constraint accounting", accounting),
        ("oracle equivalence", oracles),
    ];
    let limits = [60, 120, 300, 300, 120, 60, 60, 60];
    println!("{}", harness::VERSION);
    let mut red = 0;
    for (i, ((name, check), limit)) in criteria.iter().zip(limits).enumerate() {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        let pass = outcome.pass && secs < limit as f64;
        red += usize::from(!pass);
        println!(
            "{} criterion {} ({name}): {} [{secs:.1}s, limit {limit}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail
        );
    }
    if red == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{red} criterion(s) red");
        ExitCode::FAILURE
    }
}
