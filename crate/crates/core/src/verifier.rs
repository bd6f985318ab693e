//! Delayed, noisy checks over executed trace segments.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::TraceSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Precondition,
    RuntimeMonitor,
    Postcondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    fn flipped(self) -> Self {
        match self {
            Verdict::Pass => Verdict::Fail,
            Verdict::Fail => Verdict::Pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalTarget {
    Episode(u64),
    Plan(u64),
    Cache(u64),
    Trial(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierSpec {
    kind: VerifierKind,
    predicate_id: String,
    fp_rate: f64,
    fn_rate: f64,
    delay: u64,
    coverage_set: BTreeSet<String>,
}

impl VerifierSpec {
    /// Rejects uninformative verifiers (`fp + fn >= 1`) and rates outside [0, 1).
    pub fn new(
        kind: VerifierKind,
        predicate_id: impl Into<String>,
        fp_rate: f64,
        fn_rate: f64,
        delay: u64,
        coverage_set: BTreeSet<String>,
    ) -> Result<Self> {
        for (name, r) in [("fp_rate", fp_rate), ("fn_rate", fn_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {r}")));
            }
        }
        if fp_rate + fn_rate >= 1.0 {
            return Err(Error::Config(format!(
                "fp_rate + fn_rate must be < 1 for an informative verifier, got {}",
                fp_rate + fn_rate
            )));
        }
        Ok(Self {
            kind,
            predicate_id: predicate_id.into(),
            fp_rate,
            fn_rate,
            delay,
            coverage_set,
        })
    }

    /// Convenience for a verifier whose coverage is just its own predicate.
    pub fn covering(kind: VerifierKind, predicate_id: &str, fp_rate: f64, fn_rate: f64, delay: u64) -> Result<Self> {
        Self::new(kind, predicate_id, fp_rate, fn_rate, delay, BTreeSet::from([predicate_id.to_string()]))
    }

    pub fn kind(&self) -> VerifierKind {
        self.kind
    }

    pub fn predicate_id(&self) -> &str {
        &self.predicate_id
    }

    pub fn fp_rate(&self) -> f64 {
        self.fp_rate
    }

    pub fn fn_rate(&self) -> f64 {
        self.fn_rate
    }

    pub fn delay(&self) -> u64 {
        self.delay
    }

    pub fn coverage_set(&self) -> &BTreeSet<String> {
        &self.coverage_set
    }

    pub fn with_predicate(&self, predicate_id: impl Into<String>) -> Self {
        Self {
            predicate_id: predicate_id.into(),
            ..self.clone()
        }
    }
}

/// Per-environment predicate registry. Each predicate is a pure function of
/// the segment and the environment's hidden truth.
pub trait GroundTruth {
    fn evaluate(&self, predicate_id: &str, segment: &TraceSegment<'_>) -> Result<bool>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierSignal {
    pub kind: VerifierKind,
    pub predicate_id: String,
    /// `None` when the predicate lies outside the verifier's coverage.
    pub emitted_at: Option<u64>,
    pub about_segment: (u64, u64),
    pub verdict: Option<Verdict>,
    ground_truth_verdict: Verdict,
    pub target: Option<SignalTarget>,
    /// Latest step at which the signal is still actionable.
    pub deadline: Option<u64>,
}

/// What an agent may see of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSignal {
    pub predicate_id: String,
    pub emitted_at: u64,
    pub about_segment: (u64, u64),
    pub verdict: Verdict,
    pub target: Option<SignalTarget>,
}

impl VerifierSignal {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: VerifierKind,
        predicate_id: impl Into<String>,
        emitted_at: Option<u64>,
        about_segment: (u64, u64),
        verdict: Option<Verdict>,
        ground_truth_verdict: Verdict,
        target: Option<SignalTarget>,
    ) -> Self {
        Self {
            kind,
            predicate_id: predicate_id.into(),
            emitted_at,
            about_segment,
            verdict,
            ground_truth_verdict,
            target,
            deadline: None,
        }
    }

    /// Hidden truth, for scoring and offline reports only.
    pub fn ground_truth_verdict(&self) -> Verdict {
        self.ground_truth_verdict
    }

    pub fn with_deadline(mut self, deadline: Option<u64>) -> Self {
        self.deadline = deadline;
        self
    }

    pub fn agent_view(&self) -> Option<AgentSignal> {
        Some(AgentSignal {
            predicate_id: self.predicate_id.clone(),
            emitted_at: self.emitted_at?,
            about_segment: self.about_segment,
            verdict: self.verdict?,
            target: self.target,
        })
    }

    fn timely(&self) -> bool {
        match (self.emitted_at, self.deadline) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(at), Some(deadline)) => at <= deadline,
        }
    }
}

/// Evaluates `spec` on `segment`. Exactly one noise word is consumed per call,
/// covered or not, so coverage and placement never shift later draws.
pub fn evaluate<R: Rng + ?Sized>(
    spec: &VerifierSpec,
    segment: &TraceSegment<'_>,
    env_truth: &dyn GroundTruth,
    target: Option<SignalTarget>,
    noise_stream: &mut R,
) -> Result<VerifierSignal> {
    let u: f64 = noise_stream.random();
    let truth = Verdict::from_bool(env_truth.evaluate(&spec.predicate_id, segment)?);
    let about = (segment.start(), segment.end());
    if !spec.coverage_set.contains(&spec.predicate_id) {
        return Ok(VerifierSignal::new(spec.kind, spec.predicate_id.clone(), None, about, None, truth, target));
    }
    let flip = match truth {
        Verdict::Pass => u < spec.fp_rate,
        Verdict::Fail => u < spec.fn_rate,
    };
    let verdict = if flip { truth.flipped() } else { truth };
    let emitted_at = match spec.kind {
        VerifierKind::Precondition => about.0 + spec.delay,
        _ => about.1 + spec.delay,
    };
    Ok(VerifierSignal::new(
        spec.kind,
        spec.predicate_id.clone(),
        Some(emitted_at),
        about,
        Some(verdict),
        truth,
        target,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    InLoop,
    EndOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierPipeline {
    specs: Vec<VerifierSpec>,
    placement: Placement,
}

impl VerifierPipeline {
    pub fn new(specs: Vec<VerifierSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("verifier pipeline needs at least one spec".into()));
        }
        Ok(Self {
            specs,
            placement: Placement::InLoop,
        })
    }

    pub fn specs(&self) -> &[VerifierSpec] {
        &self.specs
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn spec(&self, kind: VerifierKind) -> Option<&VerifierSpec> {
        self.specs.iter().find(|s| s.kind == kind)
    }

    pub fn spec_for(&self, predicate_id: &str) -> Option<&VerifierSpec> {
        self.specs.iter().find(|s| s.predicate_id == predicate_id)
    }

    /// Evaluates a spec and applies this pipeline's timing. The final step
    /// is the run's last step `T`.
    pub fn run<R: Rng + ?Sized>(
        &self,
        spec: &VerifierSpec,
        segment: &TraceSegment<'_>,
        env_truth: &dyn GroundTruth,
        target: Option<SignalTarget>,
        final_step: u64,
        noise_stream: &mut R,
    ) -> Result<VerifierSignal> {
        let mut signal = evaluate(spec, segment, env_truth, target, noise_stream)?;
        if self.placement == Placement::EndOnly {
            signal.emitted_at = signal.emitted_at.map(|at| at.max(final_step));
        }
        Ok(signal)
    }
}

/// Sets where checks fire. In-loop keeps each spec's natural trigger;
/// end-only defers every emission to the final step.
pub fn schedule(pipeline: VerifierPipeline, placement: Placement) -> VerifierPipeline {
    VerifierPipeline { placement, ..pipeline }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifierMetrics {
    pub samples: u64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub miss_rate: f64,
    pub mean_detection_latency: f64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub misses: u64,
    pub violations: u64,
}

pub fn score_verifier(signals: &[VerifierSignal]) -> VerifierMetrics {
    if signals.is_empty() {
        return VerifierMetrics::default();
    }
    let mut m = VerifierMetrics {
        samples: signals.len() as u64,
        ..Default::default()
    };
    let (mut passes_seen, mut fails_seen) = (0u64, 0u64);
    let mut latency_sum = 0.0;
    let mut detections = 0u64;
    for s in signals {
        let truth = s.ground_truth_verdict;
        if truth == Verdict::Fail {
            m.violations += 1;
            if !s.timely() || s.verdict != Some(Verdict::Fail) {
                m.misses += 1;
            }
        }
        let (Some(at), Some(verdict)) = (s.emitted_at, s.verdict) else {
            continue;
        };
        match truth {
            Verdict::Pass => {
                passes_seen += 1;
                if verdict == Verdict::Fail {
                    m.false_positives += 1;
                }
            }
            Verdict::Fail => {
                fails_seen += 1;
                if verdict == Verdict::Pass {
                    m.false_negatives += 1;
                } else {
                    detections += 1;
                    latency_sum += at.saturating_sub(s.about_segment.1) as f64;
                }
            }
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    m.fp_rate = ratio(m.false_positives, passes_seen);
    m.fn_rate = ratio(m.false_negatives, fails_seen);
    m.miss_rate = ratio(m.misses, m.violations);
    m.mean_detection_latency = if detections == 0 { 0.0 } else { latency_sum / detections as f64 };
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RunStreams, Substream};
    use crate::state::{Action, Observation, OptionChoice, OptionKind, Trace, TraceRecord};
    use proptest::prelude::*;

    struct Const(bool);

    impl GroundTruth for Const {
        fn evaluate(&self, _: &str, _: &TraceSegment<'_>) -> Result<bool> {
            Ok(self.0)
        }
    }

    fn trace(n: u64) -> Trace {
        let mut t = Trace::new();
        for step in 0..n {
            t.push(TraceRecord {
                step,
                observation: Observation::default(),
                action: Action::Idle,
                option_active: OptionChoice::new(OptionKind::Stabilize, &[]),
                observed_by_adversary: false,
            })
            .unwrap();
        }
        t
    }

    fn post(fp: f64, fn_: f64, delay: u64) -> VerifierSpec {
        VerifierSpec::covering(VerifierKind::Postcondition, "landed", fp, fn_, delay).unwrap()
    }

    #[test]
    fn noiseless_pass() {
        let t = trace(4);
        let mut rng = RunStreams::new(1).stream(Substream::VerifierNoise);
        let s = evaluate(&post(0.0, 0.0, 2), &t.segment(0, 3).unwrap(), &Const(true), None, &mut rng).unwrap();
        assert_eq!(s.verdict, Some(Verdict::Pass));
        assert_eq!(s.ground_truth_verdict(), Verdict::Pass);
        assert_eq!(s.emitted_at, Some(5));
    }

    #[test]
    fn uninformative_verifiers_are_rejected() {
        assert!(VerifierSpec::covering(VerifierKind::Postcondition, "p", 0.0, 1.0, 0).is_err());
        assert!(VerifierSpec::covering(VerifierKind::Postcondition, "p", 0.6, 0.4, 0).is_err());
        assert!(VerifierSpec::covering(VerifierKind::Postcondition, "p", -0.1, 0.0, 0).is_err());
    }

    #[test]
    fn false_positive_rate_is_calibrated() {
        let t = trace(1);
        let seg = t.segment(0, 0).unwrap();
        let spec = post(0.1, 0.0, 0);
        let mut rng = RunStreams::new(42).stream(Substream::VerifierNoise);
        let n = 10_000;
        let flips = (0..n)
            .filter(|_| evaluate(&spec, &seg, &Const(true), None, &mut rng).unwrap().verdict == Some(Verdict::Fail))
            .count();
        let rate = flips as f64 / n as f64;
        assert!((rate - 0.1).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn uncovered_predicates_are_withheld_but_still_draw() {
        let t = trace(3);
        let seg = t.segment(0, 2).unwrap();
        let spec = VerifierSpec::new(VerifierKind::Postcondition, "c1", 0.0, 0.0, 0, BTreeSet::from(["c2".to_string()])).unwrap();
        let streams = RunStreams::new(3);
        let mut a = streams.stream(Substream::VerifierNoise);
        let mut b = streams.stream(Substream::VerifierNoise);
        let s = evaluate(&spec, &seg, &Const(false), None, &mut a).unwrap();
        evaluate(&post(0.0, 0.0, 0), &seg, &Const(false), None, &mut b).unwrap();
        assert_eq!(s.emitted_at, None);
        assert_eq!(s.verdict, None);
        assert_eq!(a.words_drawn(), b.words_drawn());
        let m = score_verifier(&[s]);
        assert_eq!(m.miss_rate, 1.0);
    }

    #[test]
    fn placement_moves_timing_not_truth() {
        let t = trace(20);
        let pre = VerifierSpec::covering(VerifierKind::Precondition, "launch_feasible", 0.0, 0.0, 0).unwrap();
        let mon = VerifierSpec::covering(VerifierKind::RuntimeMonitor, "bounded", 0.2, 0.2, 1).unwrap();
        let specs = vec![pre.clone(), mon.clone()];
        let segs = [(0, 0), (3, 7), (8, 12), (13, 19)];
        let mut out = Vec::new();
        for placement in [Placement::InLoop, Placement::EndOnly] {
            let p = schedule(VerifierPipeline::new(specs.clone()).unwrap(), placement);
            let mut rng = RunStreams::new(9).stream(Substream::VerifierNoise);
            let signals: Vec<VerifierSignal> = segs
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| {
                    let spec = if i == 0 { &pre } else { &mon };
                    p.run(spec, &t.segment(a, b).unwrap(), &Const(i % 2 == 0), None, 25, &mut rng).unwrap()
                })
                .collect();
            out.push(signals);
        }
        let (in_loop, end_only) = (&out[0], &out[1]);
        assert_eq!(in_loop[0].emitted_at, Some(0));
        assert!(end_only.iter().all(|s| s.emitted_at == Some(25)));
        for (a, b) in in_loop.iter().zip(end_only) {
            assert_eq!(a.ground_truth_verdict(), b.ground_truth_verdict());
            assert_eq!(a.verdict, b.verdict);
        }
    }

    #[test]
    fn injected_flips_are_counted_exactly() {
        let mut signals = Vec::new();
        for i in 0..100u64 {
            let truth = if i < 40 { Verdict::Fail } else { Verdict::Pass };
            let flipped = matches!(i, 0..=2 | 50..=53);
            let verdict = if flipped { truth.flipped() } else { truth };
            signals.push(VerifierSignal::new(VerifierKind::RuntimeMonitor, "p", Some(i + 1), (i, i), Some(verdict), truth, None));
        }
        let m = score_verifier(&signals);
        assert_eq!((m.false_negatives, m.false_positives), (3, 4));
        assert_eq!(m.fn_rate, 3.0 / 40.0);
        assert_eq!(m.fp_rate, 4.0 / 60.0);
        assert_eq!(m.miss_rate, 3.0 / 40.0);
        assert_eq!(m.mean_detection_latency, 1.0);
    }

    #[test]
    fn all_correct_signals_score_zero() {
        let signals: Vec<VerifierSignal> = (0..10)
            .map(|i| {
                let v = Verdict::from_bool(i % 3 != 0);
                VerifierSignal::new(VerifierKind::Postcondition, "p", Some(i), (0, i), Some(v), v, None)
            })
            .collect();
        let m = score_verifier(&signals);
        assert_eq!((m.fp_rate, m.fn_rate, m.miss_rate), (0.0, 0.0, 0.0));
    }

    #[test]
    fn late_detection_counts_as_a_miss() {
        let s = VerifierSignal::new(VerifierKind::RuntimeMonitor, "p", Some(30), (0, 5), Some(Verdict::Fail), Verdict::Fail, None)
            .with_deadline(Some(10));
        let m = score_verifier(&[s]);
        assert_eq!((m.fn_rate, m.miss_rate), (0.0, 1.0));
    }

    proptest! {
        #[test]
        fn never_emitted_before_segment_end_plus_delay(
            start in 0u64..30, len in 0u64..10, delay in 0u64..5, fp in 0.0f64..0.5, truth: bool, seed: u64,
            end_only: bool, monitor: bool,
        ) {
            let t = trace(start + len + 1);
            let seg = t.segment(start, start + len).unwrap();
            let kind = if monitor { VerifierKind::RuntimeMonitor } else { VerifierKind::Postcondition };
            let spec = VerifierSpec::covering(kind, "p", fp, 0.1, delay).unwrap();
            let placement = if end_only { Placement::EndOnly } else { Placement::InLoop };
            let p = schedule(VerifierPipeline::new(vec![spec.clone()]).unwrap(), placement);
            let mut rng = RunStreams::new(seed).stream(Substream::VerifierNoise);
            let s = p.run(&spec, &seg, &Const(truth), None, start + len, &mut rng).unwrap();
            prop_assert!(s.emitted_at.unwrap() >= start + len + delay);
        }
    }
}
