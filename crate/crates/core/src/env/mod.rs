//! Benchmark families A–D. Each is a seeded generator plus a step loop that
//! owns the ground truth, feeds the agent observations, runs the verifier
//! pipeline and accounts every cost.

pub mod family_a;
pub mod family_b;
pub mod family_c;
pub mod family_d;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{RunAccounting, RunRecord, RunStatus};
use crate::state::{Trace, TraceSegment};
use crate::verifier::{score_verifier, GroundTruth, Placement, Verdict, VerifierSignal};

pub use family_a::{run_family_a, FamilyAConfig};
pub use family_b::{run_family_b, FamilyBConfig};
pub use family_c::{run_family_c, CAgentFlags, FamilyCConfig};
pub use family_d::{run_family_d, DMode, FamilyDConfig};

/// Noise, delay and placement shared by a run's verifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierSettings {
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub delay: u64,
    pub placement: Placement,
}

impl Default for VerifierSettings {
    fn default() -> Self {
        Self {
            fp_rate: 0.0,
            fn_rate: 0.0,
            delay: 2,
            placement: Placement::InLoop,
        }
    }
}

impl VerifierSettings {
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..1.0).contains(&v);
        if !rate(self.fp_rate) || !rate(self.fn_rate) || self.fp_rate + self.fn_rate >= 1.0 {
            return Err(Error::Config(
                "agent.verifier.fp_rate and fn_rate must lie in [0, 1) with fp_rate + fn_rate < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth given by a closure over the environment's hidden state.
pub struct TruthFn<F>(pub F);

impl<F> GroundTruth for TruthFn<F>
where
    F: Fn(&str, &TraceSegment<'_>) -> Result<bool>,
{
    fn evaluate(&self, predicate_id: &str, segment: &TraceSegment<'_>) -> Result<bool> {
        (self.0)(predicate_id, segment)
    }
}

/// A finished run: its record, its full trace and every verifier signal.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub trace: Trace,
    pub signals: Vec<VerifierSignal>,
}

/// `v_T`: every emitted postcondition on the final-goal predicate passed.
/// No emitted signal counts as failure.
pub fn final_verdict(signals: &[VerifierSignal], predicate: &str) -> bool {
    let mut any = false;
    for s in signals.iter().filter(|s| s.predicate_id == predicate) {
        match s.verdict {
            Some(Verdict::Pass) => any = true,
            Some(Verdict::Fail) => return false,
            None => {}
        }
    }
    any
}

pub(crate) fn finish(
    seed: u64,
    accounting: RunAccounting,
    trace: Trace,
    signals: Vec<VerifierSignal>,
    mut metrics: BTreeMap<String, f64>,
    final_predicate: &str,
) -> RunOutput {
    let success = final_verdict(&signals, final_predicate);
    let v = score_verifier(&signals);
    metrics.insert("verifier_miss_rate".into(), v.miss_rate);
    metrics.insert("verifier_fp_rate".into(), v.fp_rate);
    metrics.insert("verifier_fn_rate".into(), v.fn_rate);
    metrics.insert("detection_latency".into(), v.mean_detection_latency);
    let l = &accounting.ledger;
    metrics.insert("task_cost".into(), l.task_cost);
    metrics.insert("latency_cost".into(), l.latency_cost);
    metrics.insert("leak_cost".into(), l.leak_cost);
    metrics.insert("repair_cost".into(), l.repair_cost);
    metrics.insert("compute_used".into(), l.compute_used);
    let status = if l.exhausted {
        RunStatus::BudgetExhausted
    } else {
        RunStatus::Completed
    };
    RunOutput {
        record: RunRecord {
            variant: String::new(),
            seed,
            status,
            success,
            metrics,
            ledger: Some(accounting.ledger),
            kappa_by_module: accounting.kappa_by_module,
            error: None,
            trace_path: None,
            curve: Vec::new(),
        },
        trace,
        signals,
    }
}

pub(crate) fn check(ok: bool, key: &str, rule: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("env.{key} must be {rule}")))
    }
}
