//! Family D: a proposer, executor, checker and adversary over a universe of
//! plan constraints. Each role only knows part of the universe; violations
//! outside every role's knowledge reach release unnoticed.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check, finish, RunOutput, TruthFn, VerifierSettings};
use crate::error::Result;
use crate::ledger::{LedgerConfig, RunAccounting, StepCosts};
use crate::policy::RolePolicy;
use crate::rng::{RunStreams, StreamRng, Substream};
use crate::state::{
    select_option, Action, Belief, EmbodiedState, Family, Goal, Observation, OptionKind, Trace, TraceRecord,
    TraceSegment,
};
use crate::verifier::{schedule, Placement, SignalTarget, Verdict, VerifierKind, VerifierPipeline, VerifierSignal, VerifierSpec};

pub const PRED_PLAN_VALID: &str = "plan_valid";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyDConfig {
    pub n_constraints: usize,
    pub plan_length: usize,
    pub alphabet_size: u8,
    pub rho: f64,
    pub shared_knowledge: bool,
    pub knowledge_fraction: f64,
    pub adversary_probes: u32,
    pub max_rounds: u32,
    pub hill_climb_iters: u32,
}

impl Default for FamilyDConfig {
    fn default() -> Self {
        Self {
            n_constraints: 40,
            plan_length: 12,
            alphabet_size: 8,
            rho: 0.25,
            shared_knowledge: false,
            knowledge_fraction: 0.6,
            adversary_probes: 5,
            max_rounds: 5,
            hill_climb_iters: 200,
        }
    }
}

impl FamilyDConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.n_constraints >= 1, "n_constraints", ">= 1")?;
        check(self.plan_length >= 2, "plan_length", ">= 2")?;
        check(self.alphabet_size >= 2, "alphabet_size", ">= 2")?;
        check((0.0..=1.0).contains(&self.rho), "rho", "in [0, 1]")?;
        check((0.0..=1.0).contains(&self.knowledge_fraction), "knowledge_fraction", "in [0, 1]")?;
        check(self.max_rounds >= 1, "max_rounds", ">= 1")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DMode {
    SingleAgent,
    Differentiated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    ForbiddenSymbol(u8),
    ForbiddenPair(u8, u8),
    RequiredSymbol(u8),
    Parity { position: usize, odd: bool },
}

impl Constraint {
    pub fn holds(&self, plan: &[u8]) -> bool {
        match *self {
            Constraint::ForbiddenSymbol(s) => !plan.contains(&s),
            Constraint::ForbiddenPair(a, b) => !plan.windows(2).any(|w| w[0] == a && w[1] == b),
            Constraint::RequiredSymbol(s) => plan.contains(&s),
            Constraint::Parity { position, odd } => plan.get(position).is_some_and(|&s| (s % 2 == 1) == odd),
        }
    }

    /// Whether executing step `t` of `plan` breaks the constraint. Required
    /// symbols can only be judged once the last step has run.
    fn broken_at(&self, plan: &[u8], t: usize) -> bool {
        match *self {
            Constraint::ForbiddenSymbol(s) => plan[t] == s,
            Constraint::ForbiddenPair(a, b) => t > 0 && plan[t - 1] == a && plan[t] == b,
            Constraint::RequiredSymbol(s) => t + 1 == plan.len() && !plan.contains(&s),
            Constraint::Parity { position, odd } => t == position && (plan[t] % 2 == 1) != odd,
        }
    }
}

fn constraint_id(i: usize) -> String {
    format!("c{i}")
}

/// Draws `n` constraints, each satisfied by a hidden witness plan.
pub fn generate_universe<R: Rng + ?Sized>(cfg: &FamilyDConfig, rng: &mut R) -> (Vec<u8>, Vec<Constraint>) {
    let s = cfg.alphabet_size;
    let witness: Vec<u8> = (0..cfg.plan_length).map(|_| rng.random_range(0..s)).collect();
    let mut universe = Vec::with_capacity(cfg.n_constraints);
    while universe.len() < cfg.n_constraints {
        let c = match rng.random_range(0..4u8) {
            0 => Constraint::ForbiddenSymbol(rng.random_range(0..s)),
            1 => Constraint::ForbiddenPair(rng.random_range(0..s), rng.random_range(0..s)),
            2 => Constraint::RequiredSymbol(witness[rng.random_range(0..witness.len())]),
            _ => {
                let position = rng.random_range(0..cfg.plan_length);
                Constraint::Parity {
                    position,
                    odd: witness[position] % 2 == 1,
                }
            }
        };
        if c.holds(&witness) {
            universe.push(c);
        }
    }
    (witness, universe)
}

fn sample_set<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> BTreeSet<usize> {
    (0..n).filter(|_| rng.random::<f64>() < fraction).collect()
}

fn score(plan: &[u8], universe: &[Constraint], known: &BTreeSet<usize>) -> usize {
    known.iter().filter(|&&i| universe[i].holds(plan)).count()
}

/// Single-site hill climb on the number of satisfied known constraints.
/// Sideways moves are accepted.
pub fn hill_climb<R: Rng + ?Sized>(
    start: &[u8],
    universe: &[Constraint],
    known: &BTreeSet<usize>,
    alphabet: u8,
    iters: u32,
    rng: &mut R,
) -> Vec<u8> {
    let mut plan = start.to_vec();
    let mut best = score(&plan, universe, known);
    for _ in 0..iters {
        let pos = rng.random_range(0..plan.len());
        let sym = rng.random_range(0..alphabet);
        let old = plan[pos];
        plan[pos] = sym;
        let s = score(&plan, universe, known);
        if s >= best {
            best = s;
        } else {
            plan[pos] = old;
        }
    }
    plan
}

struct Knowledge {
    proposer: BTreeSet<usize>,
    executor: BTreeSet<usize>,
    checker: BTreeSet<usize>,
}

fn knowledge(cfg: &FamilyDConfig, mode: DMode, streams: &RunStreams) -> Knowledge {
    let n = cfg.n_constraints;
    let f = cfg.knowledge_fraction;
    let draw = |role: &str| sample_set(n, f, &mut streams.child(Substream::Env, &format!("family_d/knowledge/{role}")));
    let proposer = draw("proposer");
    if mode == DMode::SingleAgent || cfg.shared_knowledge {
        return Knowledge {
            executor: proposer.clone(),
            checker: proposer.clone(),
            proposer,
        };
    }
    Knowledge {
        proposer,
        executor: draw("executor"),
        checker: draw("checker"),
    }
}

struct Session {
    belief: Belief,
    policy: RolePolicy,
    trace: Trace,
    accounting: RunAccounting,
}

impl Session {
    fn record(&mut self, role: OptionKind, action: Action, kappa: &[(&str, f64)]) -> Result<u64> {
        let step = self.trace.next_step();
        self.belief.goal = Some(Goal::Role(role));
        let option = select_option(&self.policy, &self.belief)?;
        self.trace.push(TraceRecord {
            step,
            observation: Observation::default(),
            action,
            option_active: option,
            observed_by_adversary: role == OptionKind::Probe,
        })?;
        self.accounting.accrue(StepCosts::default(), kappa)?;
        Ok(step)
    }
}

/// Runs every constraint through the checker. Each call emits one signal per
/// constraint; ids outside the coverage set come back withheld.
#[allow(clippy::too_many_arguments)]
fn run_checker(
    pipeline: &VerifierPipeline,
    spec: &VerifierSpec,
    universe: &[Constraint],
    plan: &[u8],
    seg: &TraceSegment<'_>,
    round: u64,
    final_step: u64,
    noise: &mut StreamRng,
) -> Result<Vec<VerifierSignal>> {
    let truth = TruthFn(|id: &str, _: &TraceSegment<'_>| {
        let i: usize = id[1..].parse().expect("constraint ids are c<index>");
        Ok(universe[i].holds(plan))
    });
    (0..universe.len())
        .map(|i| pipeline.run(&spec.with_predicate(constraint_id(i)), seg, &truth, Some(SignalTarget::Plan(round)), final_step, noise))
        .collect()
}

pub fn run_family_d(
    cfg: &FamilyDConfig,
    mode: DMode,
    verifier: &VerifierSettings,
    ledger: &LedgerConfig,
    seed: u64,
) -> Result<RunOutput> {
    cfg.validate()?;
    verifier.validate()?;
    let streams = RunStreams::new(seed);
    let n = cfg.n_constraints;
    let (_witness, universe) = generate_universe(cfg, &mut streams.child(Substream::Env, "family_d/constraints"));
    let k = knowledge(cfg, mode, &streams);
    let mut spot = streams.child(Substream::Env, "family_d/coverage");
    let coverage: BTreeSet<usize> = k.checker.union(&sample_set(n, cfg.rho, &mut spot)).copied().collect();
    let coverage_ids: BTreeSet<String> = coverage.iter().map(|&i| constraint_id(i)).collect();

    let checker = VerifierSpec::new(VerifierKind::Postcondition, "c0", verifier.fp_rate, verifier.fn_rate, verifier.delay, coverage_ids)?;
    let audit = VerifierSpec::covering(VerifierKind::Postcondition, PRED_PLAN_VALID, verifier.fp_rate, verifier.fn_rate, verifier.delay)?;
    let pipeline = schedule(VerifierPipeline::new(vec![checker.clone(), audit.clone()])?, verifier.placement);
    let in_loop = pipeline.placement() == Placement::InLoop;

    let round_len = cfg.plan_length as u64 + verifier.delay + 2;
    let horizon = cfg.max_rounds as u64 * round_len + cfg.adversary_probes as u64 + verifier.delay + 2;
    let mut s = Session {
        belief: Belief::new(Family::D, vec![], vec![], EmbodiedState::default())?,
        policy: RolePolicy {
            adversary_probes: cfg.adversary_probes,
        },
        trace: Trace::new(),
        accounting: RunAccounting::new(ledger.ledger(horizon)?),
    };
    let mut proposer_rng = streams.child(Substream::Agent, "family_d/proposer");
    let mut adversary = streams.stream(Substream::Adversary);
    let mut noise = streams.stream(Substream::VerifierNoise);

    let mut working = k.proposer.clone();
    let mut plan: Vec<u8> = (0..cfg.plan_length).map(|_| proposer_rng.random_range(0..cfg.alphabet_size)).collect();
    let mut flagged: BTreeSet<usize> = BTreeSet::new();
    let mut signals = Vec::new();
    let mut pending: Vec<VerifierSignal> = Vec::new();
    let (mut rounds, mut vetoes, mut rejections) = (0u32, 0u64, 0u64);
    let mut last_round = (0u64, 0u64);
    let executor_local: Vec<usize> = k.executor.iter().copied().collect();

    for round in 0..cfg.max_rounds {
        rounds += 1;
        let last = round + 1 == cfg.max_rounds;
        plan = hill_climb(&plan, &universe, &working, cfg.alphabet_size, cfg.hill_climb_iters, &mut proposer_rng);
        let start = s.record(
            OptionKind::Propose,
            Action::Propose { plan: plan.clone() },
            &[("proposer", cfg.hill_climb_iters as f64)],
        )?;

        let mut vetoed = Vec::new();
        for t in 0..plan.len() {
            vetoed.extend(executor_local.iter().copied().filter(|&i| universe[i].broken_at(&plan, t)));
            let veto = !vetoed.is_empty();
            s.record(OptionKind::Execute, Action::Execute { veto }, &[("executor", executor_local.len() as f64)])?;
            if veto {
                break;
            }
        }
        let exec_end = s.trace.next_step() - 1;
        last_round = (start, exec_end);
        if !vetoed.is_empty() {
            vetoes += 1;
            flagged.extend(vetoed.iter().copied());
            working.extend(vetoed);
            if !last {
                continue;
            }
        }

        if in_loop {
            for _ in 0..verifier.delay {
                s.record(OptionKind::Check, Action::Wait, &[])?;
            }
            let seg = s.trace.segment(start, exec_end)?;
            let round_signals = run_checker(&pipeline, &checker, &universe, &plan, &seg, round as u64, 0, &mut noise)?;
            let failed: Vec<usize> = round_signals
                .iter()
                .enumerate()
                .filter(|(_, sig)| sig.verdict == Some(Verdict::Fail))
                .map(|(i, _)| i)
                .collect();
            let reject = !failed.is_empty();
            s.record(OptionKind::Check, Action::Check { reject }, &[("checker", coverage.len() as f64)])?;
            pending.extend(round_signals);
            if reject {
                rejections += 1;
                flagged.extend(failed.iter().copied());
                working.extend(failed);
                if !last {
                    s.accounting.accrue(
                        StepCosts {
                            repair: 1.0,
                            ..Default::default()
                        },
                        &[],
                    )?;
                    continue;
                }
            }
        }
        break;
    }

    let release_step = s.record(OptionKind::Propose, Action::Release { plan: plan.clone() }, &[])?;
    let violated: BTreeSet<usize> = (0..n).filter(|&i| !universe[i].holds(&plan)).collect();
    let silent = violated.iter().any(|i| !flagged.contains(i));

    let mut discovered = false;
    for _ in 0..cfg.adversary_probes {
        let i = adversary.random_range(0..n);
        discovered |= violated.contains(&i);
        s.record(OptionKind::Probe, Action::Probe { constraint: i as u32 }, &[("adversary", 1.0)])?;
    }

    if !in_loop {
        let seg = s.trace.segment(last_round.0, last_round.1)?;
        let final_guess = s.trace.next_step();
        let late = run_checker(&pipeline, &checker, &universe, &plan, &seg, rounds as u64 - 1, final_guess, &mut noise)?;
        let reject = late.iter().any(|sig| sig.verdict == Some(Verdict::Fail));
        s.record(OptionKind::Check, Action::Check { reject }, &[("checker", coverage.len() as f64)])?;
        pending.extend(late);
    }
    for sig in &mut pending {
        sig.deadline = Some(release_step);
    }
    signals.extend(pending);

    let final_step = s.trace.next_step() - 1;
    let valid = violated.is_empty();
    let truth = TruthFn(move |_: &str, _: &TraceSegment<'_>| Ok(valid));
    let seg = s.trace.segment(0, release_step)?;
    signals.push(pipeline.run(&audit, &seg, &truth, Some(SignalTarget::Plan(rounds as u64 - 1)), final_step, &mut noise)?);
    s.accounting.accrue(
        StepCosts {
            task: if valid { 0.0 } else { 1.0 },
            ..Default::default()
        },
        &[],
    )?;

    let blind = |set: &BTreeSet<usize>, i: usize| !set.contains(&i);
    let overlap = (0..n).filter(|&i| blind(&k.proposer, i) && blind(&k.checker, i)).count();
    let correlated_violations = violated.iter().filter(|&&i| blind(&k.proposer, i) && blind(&k.checker, i)).count();
    let kappa = &s.accounting.kappa_by_module;
    let total: f64 = kappa.values().sum();
    let verification = kappa.get("executor").unwrap_or(&0.0) + kappa.get("checker").unwrap_or(&0.0);

    let mut metrics = BTreeMap::new();
    metrics.insert("correlated_error".into(), overlap as f64 / n as f64);
    metrics.insert("correlated_violations".into(), correlated_violations as f64);
    metrics.insert("silent_failure".into(), silent as u8 as f64);
    metrics.insert("violations".into(), violated.len() as f64);
    metrics.insert("adversary_discovered".into(), discovered as u8 as f64);
    metrics.insert("repair_rounds".into(), (rounds - 1) as f64);
    metrics.insert("vetoes".into(), vetoes as f64);
    metrics.insert("rejections".into(), rejections as f64);
    metrics.insert("checker_coverage".into(), coverage.len() as f64 / n as f64);
    metrics.insert("kappa_overhead".into(), if total > 0.0 { verification / total } else { 0.0 });
    Ok(finish(seed, s.accounting, s.trace, signals, metrics, PRED_PLAN_VALID))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(cfg: &FamilyDConfig, mode: DMode, v: VerifierSettings, seed: u64) -> RunOutput {
        run_family_d(cfg, mode, &v, &LedgerConfig::default(), seed).unwrap()
    }

    #[test]
    fn universe_is_satisfiable_by_its_witness() {
        let cfg = FamilyDConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (w, u) = generate_universe(&cfg, &mut rng);
            assert_eq!(u.len(), 40);
            assert!(u.iter().all(|c| c.holds(&w)));
        }
    }

    #[test]
    fn step_checks_agree_with_whole_plan_checks() {
        let cfg = FamilyDConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (_, u) = generate_universe(&cfg, &mut rng);
            let plan: Vec<u8> = (0..12).map(|_| rng.random_range(0..8)).collect();
            for c in &u {
                let stepwise = (0..plan.len()).any(|t| c.broken_at(&plan, t));
                assert_eq!(stepwise, !c.holds(&plan), "{c:?} on {plan:?}");
            }
        }
    }

    #[test]
    fn full_coverage_noiseless_checker_leaves_no_silent_failure() {
        let cfg = FamilyDConfig {
            rho: 1.0,
            ..Default::default()
        };
        for mode in [DMode::SingleAgent, DMode::Differentiated] {
            for seed in 0..40 {
                let out = run(&cfg, mode, VerifierSettings::default(), seed);
                assert_eq!(out.record.metrics["silent_failure"], 0.0, "{mode:?} seed {seed}");
            }
        }
    }

    #[test]
    fn omniscient_roles_have_no_blind_spots() {
        let cfg = FamilyDConfig {
            knowledge_fraction: 1.0,
            ..Default::default()
        };
        for seed in 0..10 {
            let out = run(&cfg, DMode::Differentiated, VerifierSettings::default(), seed);
            assert_eq!(out.record.metrics["correlated_error"], 0.0);
            assert_eq!(out.record.metrics["violations"], 0.0);
            assert!(out.record.success);
        }
    }

    #[test]
    fn single_agent_blind_spot_is_its_own_complement() {
        let cfg = FamilyDConfig::default();
        for seed in 0..20 {
            let out = run(&cfg, DMode::SingleAgent, VerifierSettings::default(), seed);
            let m = &out.record.metrics;
            assert_eq!(m["vetoes"], 0.0, "seed {seed}");
            assert!(m["correlated_error"] > 0.0);
        }
    }

    #[test]
    fn end_only_checker_cannot_trigger_repairs() {
        let v = VerifierSettings {
            placement: Placement::EndOnly,
            ..Default::default()
        };
        for seed in 0..20 {
            let out = run(&FamilyDConfig::default(), DMode::Differentiated, v, seed);
            assert_eq!(out.record.metrics["rejections"], 0.0);
            let last = out.trace.records().last().unwrap();
            assert!(matches!(last.action, Action::Check { .. }));
        }
    }
}
