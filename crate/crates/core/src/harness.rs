//! Experiment configs, ablation grids, parallel execution and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::controller::ControllerConfig;
use crate::env::{
    run_family_a, run_family_b, run_family_c, run_family_d, CAgentFlags, DMode, FamilyAConfig, FamilyBConfig,
    FamilyCConfig, FamilyDConfig, RunOutput, VerifierSettings,
};
use crate::error::{Error, Result};
use crate::ledger::{aggregate_lenient, constraint_check, known_metrics, ConstraintReport, LedgerConfig, RunRecord, RunStatus, Summary};
use crate::memory::MemoryVariant;
use crate::rng::{RunStreams, Substream};
use crate::state::Family;
use crate::verifier::Placement;

pub const VERSION: &str = concat!("scrat ", env!("CARGO_PKG_VERSION"));
pub const BASELINE: &str = "baseline";
const WORST_RUNS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoFeedback,
    NoCompensator,
    FlatArchive,
    NoObserverModel,
    EndOnlyChecking,
    SingleAgent,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoFeedback => "no_feedback",
            Ablation::NoCompensator => "no_compensator",
            Ablation::FlatArchive => "flat_archive",
            Ablation::NoObserverModel => "no_observer_model",
            Ablation::EndOnlyChecking => "end_only_checking",
            Ablation::SingleAgent => "single_agent",
        }
    }

    pub fn applies_to(self, family: Family) -> bool {
        use Ablation::*;
        match family {
            Family::A => matches!(self, NoFeedback | NoCompensator | EndOnlyChecking),
            Family::B => matches!(self, FlatArchive),
            Family::C => matches!(self, NoObserverModel | EndOnlyChecking | FlatArchive),
            Family::D => matches!(self, SingleAgent | EndOnlyChecking),
        }
    }

    /// The config key the switch flips.
    pub fn key(self) -> &'static str {
        match self {
            Ablation::NoFeedback => "agent.controller.feedback_enabled",
            Ablation::NoCompensator => "agent.controller.compensator_enabled",
            Ablation::FlatArchive => "agent.memory",
            Ablation::NoObserverModel => "agent.observer.observer_aware",
            Ablation::EndOnlyChecking => "agent.verifier.placement",
            Ablation::SingleAgent => "agent.mode",
        }
    }

    fn apply(self, agent: &AgentConfig) -> AgentConfig {
        let mut a = agent.clone();
        match self {
            Ablation::NoFeedback => a.controller.feedback_enabled = false,
            Ablation::NoCompensator => a.controller.compensator_enabled = false,
            Ablation::FlatArchive => a.memory = MemoryVariant::FlatArchive,
            Ablation::NoObserverModel => a.observer.observer_aware = false,
            Ablation::EndOnlyChecking => a.verifier.placement = Placement::EndOnly,
            Ablation::SingleAgent => a.mode = DMode::SingleAgent,
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub controller: ControllerConfig,
    pub memory: MemoryVariant,
    pub observer: CAgentFlags,
    pub mode: DMode,
    pub verifier: VerifierSettings,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::default(),
            memory: MemoryVariant::ClusteredIndex,
            observer: CAgentFlags::default(),
            mode: DMode::Differentiated,
            verifier: VerifierSettings::default(),
        }
    }
}

/// Half-open seed range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn seeds(self) -> impl Iterator<Item = u64> {
        self.start..self.end
    }

    pub fn len(self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(self) -> bool {
        self.end <= self.start
    }

    /// Parses `a..b`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("seeds must look like `a..b` with a < b, got `{text}`"));
        let (a, b) = text.split_once("..").ok_or_else(bad)?;
        let range = SeedRange {
            start: a.trim().parse().map_err(|_| bad())?,
            end: b.trim().parse().map_err(|_| bad())?,
        };
        if range.is_empty() {
            return Err(bad());
        }
        Ok(range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EnvConfig {
    A(FamilyAConfig),
    B(FamilyBConfig),
    C(FamilyCConfig),
    D(FamilyDConfig),
}

impl EnvConfig {
    fn defaults(family: Family) -> Self {
        match family {
            Family::A => EnvConfig::A(Default::default()),
            Family::B => EnvConfig::B(Default::default()),
            Family::C => EnvConfig::C(Default::default()),
            Family::D => EnvConfig::D(Default::default()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::A(c) => c.validate(),
            EnvConfig::B(c) => c.validate(),
            EnvConfig::C(c) => c.validate(),
            EnvConfig::D(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub family: Family,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub ablations: Vec<Ablation>,
    pub seeds: SeedRange,
    pub ledger: LedgerConfig,
    pub output_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    family: Family,
    #[serde(default)]
    env: Option<Value>,
    #[serde(default)]
    agent: AgentConfig,
    #[serde(default)]
    ablations: Vec<Ablation>,
    seeds: SeedRange,
    #[serde(default)]
    ledger: LedgerConfig,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn path_error<E: std::fmt::Display>(prefix: &str, e: serde_path_to_error::Error<E>) -> Error {
    let path = e.path().to_string();
    let at = match (prefix.is_empty(), path.as_str()) {
        (true, ".") => String::new(),
        (true, p) => format!(" at `{p}`"),
        (false, ".") => format!(" at `{prefix}`"),
        (false, p) => format!(" at `{prefix}.{p}`"),
    };
    Error::Config(format!("{}{at}", e.into_inner()))
}

fn decode<T: for<'de> Deserialize<'de>>(value: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| path_error(prefix, e))
}

/// Parses and fully validates an experiment document. Missing blocks take
/// their defaults.
pub fn parse_config(document: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| path_error("", e))?;
    let env = match raw.env {
        None => EnvConfig::defaults(raw.family),
        Some(v) => match raw.family {
            Family::A => EnvConfig::A(decode(v, "env")?),
            Family::B => EnvConfig::B(decode(v, "env")?),
            Family::C => EnvConfig::C(decode(v, "env")?),
            Family::D => EnvConfig::D(decode(v, "env")?),
        },
    };
    let cfg = ExperimentConfig {
        family: raw.family,
        env,
        agent: raw.agent,
        ablations: raw.ablations,
        seeds: raw.seeds,
        ledger: raw.ledger,
        output_dir: raw.output_dir,
    };
    validate(&cfg)?;
    Ok(cfg)
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.env.validate()?;
    cfg.agent.controller.validate()?;
    cfg.agent.verifier.validate()?;
    cfg.ledger.ledger(1)?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config(format!(
            "seeds.end must be > seeds.start, got {}..{}",
            cfg.seeds.start, cfg.seeds.end
        )));
    }
    for (i, &a) in cfg.ablations.iter().enumerate() {
        if !a.applies_to(cfg.family) {
            return Err(Error::Config(format!(
                "ablations[{i}]: `{}` does not apply to family {}; allowed: {}",
                a.name(),
                cfg.family,
                allowed(cfg.family)
            )));
        }
        if cfg.ablations[..i].contains(&a) {
            return Err(Error::Config(format!("ablations[{i}]: `{}` is listed twice", a.name())));
        }
        if a.apply(&cfg.agent) == cfg.agent {
            return Err(Error::Config(format!(
                "ablations[{i}]: `{}` has no effect because {} already has the ablated value",
                a.name(),
                a.key()
            )));
        }
    }
    Ok(())
}

fn allowed(family: Family) -> String {
    use Ablation::*;
    [NoFeedback, NoCompensator, FlatArchive, NoObserverModel, EndOnlyChecking, SingleAgent]
        .into_iter()
        .filter(|a| a.applies_to(family))
        .map(Ablation::name)
        .collect::<Vec<_>>()
        .join(", ")
}

/// The resolved config as pretty JSON; `parse_config` reads it back to an
/// equal value.
pub fn echo(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub agent: AgentConfig,
}

/// Baseline first, then one variant per listed ablation.
pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let mut out = vec![Variant {
        name: BASELINE.into(),
        agent: cfg.agent.clone(),
    }];
    out.extend(cfg.ablations.iter().map(|a| Variant {
        name: a.name().into(),
        agent: a.apply(&cfg.agent),
    }));
    out
}

/// Runs one cell, returning the full output including its trace.
pub fn run_cell(cfg: &ExperimentConfig, agent: &AgentConfig, seed: u64) -> Result<RunOutput> {
    let v = &agent.verifier;
    let l = &cfg.ledger;
    match &cfg.env {
        EnvConfig::A(env) => run_family_a(env, &agent.controller, v, l, seed),
        EnvConfig::B(env) => run_family_b(env, agent.memory, v, l, seed),
        EnvConfig::C(env) => run_family_c(env, agent.observer, agent.memory, v, l, seed),
        EnvConfig::D(env) => run_family_d(env, agent.mode, v, l, seed),
    }
}

fn guarded_cell(cfg: &ExperimentConfig, variant: &Variant, seed: u64) -> (RunRecord, f64) {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(|| run_cell(cfg, &variant.agent, seed)));
    let record = match out {
        Ok(Ok(o)) => RunRecord {
            variant: variant.name.clone(),
            ..o.record
        },
        Ok(Err(e)) => RunRecord::failed(&variant.name, seed, e.to_string()),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            RunRecord::failed(&variant.name, seed, format!("panic: {msg}"))
        }
    };
    (record, t.elapsed().as_secs_f64())
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub records: Vec<RunRecord>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct ResultSet {
    pub config: ExperimentConfig,
    pub variants: Vec<VariantResult>,
}

impl ResultSet {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.variants.iter().flat_map(|v| v.records.iter())
    }

    pub fn failed_cells(&self) -> usize {
        self.records().filter(|r| r.status == RunStatus::Failed).count()
    }
}

/// Runs every (variant, seed) cell on `jobs` workers. Results come back in
/// (variant, seed) order whatever the completion order.
pub fn run_grid(cfg: &ExperimentConfig, jobs: usize) -> Result<ResultSet> {
    validate(cfg)?;
    let vs = variants(cfg);
    let cells: Vec<(usize, u64)> = (0..vs.len()).flat_map(|v| cfg.seeds.seeds().map(move |s| (v, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("jobs: cannot start worker pool: {e}")))?;
    let done: Vec<(RunRecord, f64)> = pool.install(|| cells.par_iter().map(|&(v, s)| guarded_cell(cfg, &vs[v], s)).collect());
    let mut done = done.into_iter();
    let variants = vs
        .into_iter()
        .map(|variant| {
            let (records, times): (Vec<_>, Vec<_>) = done.by_ref().take(cfg.seeds.len()).unzip();
            VariantResult {
                variant,
                records,
                wall_clock_s: times.iter().sum(),
            }
        })
        .collect();
    Ok(ResultSet {
        config: cfg.clone(),
        variants,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantConstraint {
    pub variant: String,
    #[serde(flatten)]
    pub report: Option<ConstraintReport>,
    pub completed: usize,
    pub failed: usize,
}

/// One summary row per (variant, metric); effect sizes are against the
/// baseline variant.
pub fn summarize(results: &ResultSet) -> Result<Vec<(String, Summary)>> {
    let base = &results.variants[0].records;
    let mut rows = Vec::new();
    for v in &results.variants {
        let completed: Vec<RunRecord> = v.records.iter().filter(|r| r.status != RunStatus::Failed).cloned().collect();
        let mut metrics = known_metrics(&completed);
        if completed.is_empty() {
            metrics = vec!["success".into()];
        }
        let is_base = v.variant.name == BASELINE;
        for m in metrics {
            let mut rng = RunStreams::new(results.config.seeds.start).child(Substream::Bootstrap, &format!("{}/{m}", v.variant.name));
            let baseline = if is_base || !known_metrics(base).contains(&m) {
                None
            } else {
                Some(base.as_slice())
            };
            rows.push((v.variant.name.clone(), aggregate_lenient(&v.records, &m, baseline, &mut rng)?));
        }
    }
    Ok(rows)
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

pub fn summary_csv(rows: &[(String, Summary)]) -> String {
    let mut out = String::from("variant,metric,mean,median,p95,ci_lo,ci_hi,n_seeds,effect_size_vs_baseline,low_confidence\n");
    for (variant, s) in rows {
        let _ = writeln!(
            out,
            "{variant},{},{},{},{},{},{},{},{},{}",
            s.metric,
            num(s.mean),
            num(s.median),
            num(s.p95),
            num(s.ci_lo),
            num(s.ci_hi),
            s.n_seeds,
            s.effect_size_vs_baseline.map(num).unwrap_or_default(),
            s.low_confidence
        );
    }
    out
}

pub fn constraint_reports(results: &ResultSet) -> Result<Vec<VariantConstraint>> {
    results
        .variants
        .iter()
        .map(|v| {
            let outcomes: Vec<bool> = v.records.iter().filter(|r| r.status != RunStatus::Failed).map(|r| r.success).collect();
            Ok(VariantConstraint {
                variant: v.variant.name.clone(),
                report: if outcomes.is_empty() {
                    None
                } else {
                    Some(constraint_check(&outcomes, results.config.ledger.delta)?)
                },
                completed: outcomes.len(),
                failed: v.records.len() - outcomes.len(),
            })
        })
        .collect()
}

/// Worst runs first: failed cells, then by descending objective.
pub fn worst_runs(records: &[RunRecord], k: usize) -> Vec<&RunRecord> {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        let key = |r: &RunRecord| r.objective().unwrap_or(f64::INFINITY);
        key(b).total_cmp(&key(a)).then(a.seed.cmp(&b.seed))
    });
    sorted.truncate(k);
    sorted
}

fn trace_file(variant: &str, seed: u64) -> String {
    format!("traces/{variant}_seed{seed}.jsonl")
}

/// Mean of every curve column per (variant, n), over completed runs.
pub fn degradation_csv(results: &ResultSet) -> Option<String> {
    let mut columns: Vec<String> = Vec::new();
    for r in results.records() {
        for row in &r.curve {
            for k in row.keys().filter(|k| *k != "n") {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
    }
    if columns.is_empty() {
        return None;
    }
    columns.sort();
    let mut out = format!("variant,n,{},n_seeds\n", columns.join(","));
    for v in &results.variants {
        let mut by_n: BTreeMap<u64, Vec<&BTreeMap<String, f64>>> = BTreeMap::new();
        for r in v.records.iter().filter(|r| r.status != RunStatus::Failed) {
            for row in &r.curve {
                by_n.entry(row.get("n").copied().unwrap_or(0.0) as u64).or_default().push(row);
            }
        }
        for (n, rows) in by_n {
            let cells: Vec<String> = columns
                .iter()
                .map(|c| num(rows.iter().filter_map(|r| r.get(c)).sum::<f64>() / rows.len() as f64))
                .collect();
            let _ = writeln!(out, "{},{n},{},{}", v.variant.name, cells.join(","), rows.len());
        }
    }
    Some(out)
}

fn failures_md(results: &ResultSet, worst: &[(String, Vec<RunRecord>)]) -> String {
    let mut out = String::from("# Representative failures\n\nThe worst runs per variant by objective, failed cells first.\n");
    for (variant, runs) in worst {
        let _ = write!(out, "\n## {variant}\n\n");
        if runs.is_empty() {
            out.push_str("No runs.\n");
            continue;
        }
        out.push_str("| seed | status | success | objective | trace | error |\n|---|---|---|---|---|---|\n");
        for r in runs {
            let _ = writeln!(
                out,
                "| {} | {:?} | {} | {} | {} | {} |",
                r.seed,
                r.status,
                r.success,
                r.objective().map(num).unwrap_or_else(|| "n/a".into()),
                r.trace_path.as_deref().unwrap_or("n/a"),
                r.error.as_deref().unwrap_or("").replace('|', "/"),
            );
        }
    }
    let _ = write!(out, "\n{} failed cell(s) in total.\n", results.failed_cells());
    out
}

/// Writes the full report set into `dir`. Traces for the worst runs are
/// regenerated by re-running those cells.
pub fn write_report(results: &mut ResultSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("traces"))?;
    let cfg = results.config.clone();
    let mut worst = Vec::new();
    for v in &mut results.variants {
        let picks: Vec<u64> = worst_runs(&v.records, WORST_RUNS).iter().map(|r| r.seed).collect();
        for &seed in &picks {
            if let Ok(out) = run_cell(&cfg, &v.variant.agent, seed) {
                let rel = trace_file(&v.variant.name, seed);
                fs::write(dir.join(&rel), out.trace.to_jsonl()?)?;
                if let Some(r) = v.records.iter_mut().find(|r| r.seed == seed) {
                    r.trace_path = Some(rel);
                }
            }
        }
        let picked = picks
            .iter()
            .filter_map(|s| v.records.iter().find(|r| r.seed == *s).cloned())
            .collect();
        worst.push((v.variant.name.clone(), picked));
    }

    fs::write(dir.join("resolved_config.json"), echo(&cfg)? + "\n")?;
    fs::write(dir.join("VERSION"), format!("{VERSION}\n"))?;
    let mut runs = String::new();
    for r in results.records() {
        runs.push_str(&serde_json::to_string(r)?);
        runs.push('\n');
    }
    fs::write(dir.join("runs.jsonl"), runs)?;
    fs::write(dir.join("summary.csv"), summary_csv(&summarize(results)?))?;
    fs::write(
        dir.join("constraint_report.json"),
        serde_json::to_string_pretty(&constraint_reports(results)?)? + "\n",
    )?;
    fs::write(dir.join("failures.md"), failures_md(results, &worst))?;
    if let Some(csv) = degradation_csv(results) {
        fs::write(dir.join("degradation.csv"), csv)?;
    }

    let mut timing = BTreeMap::new();
    for v in &results.variants {
        let mut kappa: BTreeMap<String, f64> = BTreeMap::new();
        for r in &v.records {
            for (m, k) in &r.kappa_by_module {
                *kappa.entry(m.clone()).or_default() += k;
            }
        }
        timing.insert(
            v.variant.name.clone(),
            serde_json::json!({
                "wall_clock_s": v.wall_clock_s,
                "cells": v.records.len(),
                "kappa_total": kappa.values().sum::<f64>(),
                "kappa_by_module": kappa,
            }),
        );
    }
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(())
}

/// Rebuilds a result set from a report directory.
pub fn load_results(dir: &Path) -> Result<ResultSet> {
    let config = parse_config(&fs::read_to_string(dir.join("resolved_config.json"))?)?;
    let mut by_variant: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for line in fs::read_to_string(dir.join("runs.jsonl"))?.lines().filter(|l| !l.trim().is_empty()) {
        let r: RunRecord = serde_json::from_str(line)?;
        by_variant.entry(r.variant.clone()).or_default().push(r);
    }
    let timing: BTreeMap<String, Value> = fs::read_to_string(dir.join("timing.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let variants = variants(&config)
        .into_iter()
        .map(|variant| {
            let records = by_variant.remove(&variant.name).unwrap_or_default();
            let wall_clock_s = timing.get(&variant.name).and_then(|t| t["wall_clock_s"].as_f64()).unwrap_or(0.0);
            VariantResult {
                variant,
                records,
                wall_clock_s,
            }
        })
        .collect();
    if let Some(name) = by_variant.keys().next() {
        return Err(Error::Config(format!("runs.jsonl has records for unknown variant `{name}`")));
    }
    Ok(ResultSet { config, variants })
}
