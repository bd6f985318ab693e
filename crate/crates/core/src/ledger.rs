//! Cost accounting for the weighted objective and the compute budget, the
//! success-probability constraint check, and the seed-level summary battery.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Weights {
    pub lambda_tau: f64,
    pub lambda_l: f64,
    pub lambda_r: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            lambda_tau: 0.01,
            lambda_l: 1.0,
            lambda_r: 0.1,
        }
    }
}

/// Ledger block of an experiment: weights, compute budget and the
/// allowed failure probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LedgerConfig {
    pub weights: Weights,
    pub budget: f64,
    pub delta: f64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            weights: Weights::default(),
            budget: 1e9,
            delta: 0.1,
        }
    }
}

impl LedgerConfig {
    pub fn ledger(&self, horizon: u64) -> Result<CostLedger> {
        CostLedger::new(self.weights, self.budget, horizon, self.delta)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCosts {
    pub task: f64,
    pub latency: f64,
    pub leak: f64,
    pub repair: f64,
    pub compute: f64,
}

impl StepCosts {
    pub fn new(task: f64, latency: f64, leak: f64, repair: f64, compute: f64) -> Self {
        Self {
            task,
            latency,
            leak,
            repair,
            compute,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 5] {
        [
            ("task", self.task),
            ("latency", self.latency),
            ("leak", self.leak),
            ("repair", self.repair),
            ("compute", self.compute),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accrual {
    Accepted,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub task_cost: f64,
    pub latency_cost: f64,
    pub leak_cost: f64,
    pub repair_cost: f64,
    pub compute_used: f64,
    pub weights: Weights,
    pub budget: f64,
    pub horizon: u64,
    pub delta: f64,
    pub exhausted: bool,
}

impl CostLedger {
    pub fn new(weights: Weights, budget: f64, horizon: u64, delta: f64) -> Result<Self> {
        for (k, v) in [("lambda_tau", weights.lambda_tau), ("lambda_l", weights.lambda_l), ("lambda_r", weights.lambda_r)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("ledger.weights.{k} must be finite and >= 0")));
            }
        }
        if !(budget > 0.0) {
            return Err(Error::Config("ledger.budget must be > 0".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config("ledger.delta must be in (0, 1)".into()));
        }
        Ok(Self {
            task_cost: 0.0,
            latency_cost: 0.0,
            leak_cost: 0.0,
            repair_cost: 0.0,
            compute_used: 0.0,
            weights,
            budget,
            horizon,
            delta,
            exhausted: false,
        })
    }

    /// Adds one step of costs. A step whose compute would cross the budget
    /// is refused as a whole and the ledger is marked exhausted.
    pub fn accrue(&mut self, step: StepCosts) -> Result<Accrual> {
        for (k, v) in step.fields() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!("step cost `{k}` must be finite and >= 0, got {v}")));
            }
        }
        if self.exhausted || self.compute_used + step.compute > self.budget {
            self.exhausted = true;
            return Ok(Accrual::BudgetExhausted);
        }
        self.task_cost += step.task;
        self.latency_cost += step.latency;
        self.leak_cost += step.leak;
        self.repair_cost += step.repair;
        self.compute_used += step.compute;
        Ok(Accrual::Accepted)
    }

    pub fn objective_value(&self) -> f64 {
        let w = &self.weights;
        self.task_cost + w.lambda_tau * self.latency_cost + w.lambda_l * self.leak_cost + w.lambda_r * self.repair_cost
    }
}

/// Ledger plus the per-module split of compute, kept in step so the two
/// always agree.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAccounting {
    pub ledger: CostLedger,
    pub kappa_by_module: BTreeMap<String, f64>,
}

impl RunAccounting {
    pub fn new(ledger: CostLedger) -> Self {
        Self {
            ledger,
            kappa_by_module: BTreeMap::new(),
        }
    }

    /// Accrues `costs` with `compute` replaced by the sum of `kappa`.
    pub fn accrue(&mut self, mut costs: StepCosts, kappa: &[(&str, f64)]) -> Result<Accrual> {
        costs.compute = kappa.iter().map(|(_, k)| k).sum();
        let accrual = self.ledger.accrue(costs)?;
        if accrual == Accrual::Accepted {
            for (module, k) in kappa {
                *self.kappa_by_module.entry(module.to_string()).or_default() += k;
            }
        }
        Ok(accrual)
    }

    pub fn exhausted(&self) -> bool {
        self.ledger.exhausted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub n: usize,
    pub successes: usize,
    pub frequency: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub target: f64,
    pub verdict: Verdict,
}

pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn constraint_check(outcomes: &[bool], delta: f64) -> Result<ConstraintReport> {
    if outcomes.is_empty() {
        return Err(Error::Input("constraint check needs at least one outcome".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta must be in (0, 1), got {delta}")));
    }
    let n = outcomes.len();
    let successes = outcomes.iter().filter(|&&v| v).count();
    let (lo, hi) = wilson_interval(successes, n, Z95);
    let target = 1.0 - delta;
    let verdict = if lo >= target {
        Verdict::Satisfied
    } else if hi < target {
        Verdict::Violated
    } else {
        Verdict::Inconclusive
    };
    Ok(ConstraintReport {
        n,
        successes,
        frequency: successes as f64 / n as f64,
        wilson_lo: lo,
        wilson_hi: hi,
        target,
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    BudgetExhausted,
    Failed,
}

/// Outcome of one (variant, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub status: RunStatus,
    /// `v_T`: every postcondition on the final goal passed.
    pub success: bool,
    pub metrics: BTreeMap<String, f64>,
    pub ledger: Option<CostLedger>,
    pub kappa_by_module: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<BTreeMap<String, f64>>,
}

impl RunRecord {
    pub fn failed(variant: &str, seed: u64, error: String) -> Self {
        Self {
            variant: variant.to_string(),
            seed,
            status: RunStatus::Failed,
            success: false,
            metrics: BTreeMap::new(),
            ledger: None,
            kappa_by_module: BTreeMap::new(),
            error: Some(error),
            trace_path: None,
            curve: Vec::new(),
        }
    }

    pub fn objective(&self) -> Option<f64> {
        self.ledger.as_ref().map(CostLedger::objective_value)
    }

    /// Value of a named metric; `success` and `objective` are always known.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "success" => Some(if self.success { 1.0 } else { 0.0 }),
            "objective" => self.objective(),
            _ => self.metrics.get(name).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_seeds: usize,
    pub effect_size_vs_baseline: Option<f64>,
    pub low_confidence: bool,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Cohen's d with pooled standard deviation; `None` when undefined.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0)).sqrt();
    if pooled > 0.0 {
        Some((mean(a) - mean(b)) / pooled)
    } else if mean(a) == mean(b) {
        Some(0.0)
    } else {
        None
    }
}

/// Percentile bootstrap of the mean.
pub fn bootstrap_mean_ci<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> (f64, f64) {
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    (quantile(&means, 0.025), quantile(&means, 0.975))
}

/// Bootstrap of the difference in means between two independent samples.
pub fn bootstrap_diff_ci<R: Rng + ?Sized>(a: &[f64], b: &[f64], resamples: usize, rng: &mut R) -> (f64, f64) {
    let resample_mean = |v: &[f64], rng: &mut R| (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).sum::<f64>() / v.len() as f64;
    let mut diffs: Vec<f64> = (0..resamples)
        .map(|_| {
            let ma = resample_mean(a, rng);
            ma - resample_mean(b, rng)
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    (quantile(&diffs, 0.025), quantile(&diffs, 0.975))
}

pub fn known_metrics(records: &[RunRecord]) -> Vec<String> {
    let mut names: Vec<String> = vec!["objective".into(), "success".into()];
    for r in records {
        names.extend(r.metrics.keys().cloned());
    }
    names.sort();
    names.dedup();
    names
}

fn metric_values(records: &[RunRecord], metric: &str) -> Result<Vec<f64>> {
    let known = known_metrics(records);
    if !known.iter().any(|k| k == metric) {
        return Err(Error::UnknownMetric {
            name: metric.to_string(),
            known: known.join(", "),
        });
    }
    Ok(records
        .iter()
        .filter(|r| r.status != RunStatus::Failed)
        .filter_map(|r| r.metric(metric))
        .filter(|v| v.is_finite())
        .collect())
}

fn summarize<R: Rng + ?Sized>(metric: &str, values: &[f64], baseline: Option<&[f64]>, rng: &mut R) -> Summary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (ci_lo, ci_hi) = if values.len() >= 2 {
        bootstrap_mean_ci(values, BOOTSTRAP_RESAMPLES, rng)
    } else {
        let m = sorted.first().copied().unwrap_or(f64::NAN);
        (m, m)
    };
    Summary {
        metric: metric.to_string(),
        mean: if values.is_empty() { f64::NAN } else { mean(values) },
        median: quantile(&sorted, 0.5),
        p95: quantile(&sorted, 0.95),
        ci_lo,
        ci_hi,
        n_seeds: values.len(),
        effect_size_vs_baseline: baseline.and_then(|b| cohens_d(values, b)),
        low_confidence: values.len() < 2,
    }
}

/// Seed-level summary of one metric. `rng` should be the bootstrap
/// substream.
pub fn aggregate<R: Rng + ?Sized>(records: &[RunRecord], metric: &str, baseline: Option<&[RunRecord]>, rng: &mut R) -> Result<Summary> {
    if records.len() < 2 {
        return Err(Error::Input(format!("aggregate needs at least 2 records, got {}", records.len())));
    }
    let values = metric_values(records, metric)?;
    let base = baseline.map(|b| metric_values(b, metric)).transpose()?;
    Ok(summarize(metric, &values, base.as_deref(), rng))
}

/// Like `aggregate` but accepts any record count; fewer than two usable
/// values produce a zero-width, low-confidence row.
pub fn aggregate_lenient<R: Rng + ?Sized>(records: &[RunRecord], metric: &str, baseline: Option<&[RunRecord]>, rng: &mut R) -> Result<Summary> {
    let values = metric_values(records, metric)?;
    let base = baseline.map(|b| metric_values(b, metric)).transpose()?;
    Ok(summarize(metric, &values, base.as_deref(), rng))
}
