//! Family A: a launch onto a compliant support of unknown stiffness, then
//! stabilization of the landing error under delayed, noisy observation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controller::{self, ControllerConfig};
use crate::env::{check, finish, RunOutput, TruthFn, VerifierSettings};
use crate::error::{Error, Result};
use crate::ledger::{Accrual, LedgerConfig, RunAccounting, StepCosts};
use crate::memory::Retrieval;
use crate::policy::JumpPolicy;
use crate::rng::{RunStreams, Substream};
use crate::state::{
    act, select_option, update_belief, Action, ActiveOption, Belief, BeliefConfig, Dynamics, EmbodiedState, Family,
    Goal, LatentEvidence, Observation, Trace, TraceRecord, TraceSegment,
};
use crate::verifier::{schedule, SignalTarget, VerifierKind, VerifierPipeline, VerifierSpec};

pub const PRED_LAUNCH: &str = "launch_feasible";
pub const PRED_VELOCITY: &str = "velocity_bounded";
pub const PRED_STABILIZED: &str = "stabilized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyAConfig {
    /// Gap scale `D0`.
    pub gap: f64,
    pub z_range: (f64, f64),
    pub delay: usize,
    pub sigma: f64,
    pub perturb_step: Option<u64>,
    pub perturb_magnitude: f64,
    pub trials: u32,
    pub eps_p: f64,
    pub eps_v: f64,
    pub horizon: u64,
    pub hold_steps: u64,
    pub impulse: f64,
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub dt: f64,
    pub gain_slope: f64,
    /// Largest landing error that still counts as reaching the support.
    pub landing_limit: f64,
    pub velocity_limit: f64,
    pub monitor_window: u64,
    /// Per-step standard deviation of a random walk on the true stiffness,
    /// clamped to `z_range`. Zero keeps `z` fixed within a trial.
    pub z_drift: f64,
}

impl Default for FamilyAConfig {
    fn default() -> Self {
        Self {
            gap: 1.0,
            z_range: (0.2, 0.8),
            delay: 2,
            sigma: 0.02,
            perturb_step: Some(100),
            perturb_magnitude: 0.5,
            trials: 3,
            eps_p: 0.03,
            eps_v: 0.05,
            horizon: 250,
            hold_steps: 5,
            impulse: 0.5,
            prior_mean: 0.5,
            prior_variance: 1e12,
            dt: 0.05,
            gain_slope: 0.5,
            landing_limit: 0.5,
            velocity_limit: 0.5,
            monitor_window: 25,
            z_drift: 0.0,
        }
    }
}

impl FamilyAConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.z_range;
        check(self.gap > 0.0, "gap", "> 0")?;
        check((0.0..=1.0).contains(&lo) && lo <= hi && hi <= 1.0, "z_range", "an interval inside [0, 1]")?;
        check(self.sigma >= 0.0 && self.sigma.is_finite(), "sigma", ">= 0")?;
        check(self.perturb_magnitude.is_finite(), "perturb_magnitude", "finite")?;
        check(self.trials >= 1, "trials", ">= 1")?;
        check(self.eps_p > 0.0, "eps_p", "> 0")?;
        check(self.eps_v > 0.0, "eps_v", "> 0")?;
        check(self.horizon >= 1, "horizon", ">= 1")?;
        check(self.hold_steps >= 1 && self.hold_steps <= self.horizon, "hold_steps", "in [1, horizon]")?;
        check(self.impulse >= 0.0 && self.impulse.is_finite(), "impulse", ">= 0")?;
        check((0.0..=1.0).contains(&self.prior_mean), "prior_mean", "in [0, 1]")?;
        check(self.prior_variance > 0.0 && self.prior_variance.is_finite(), "prior_variance", "> 0")?;
        check(self.dt > 0.0, "dt", "> 0")?;
        check((0.0..1.0).contains(&self.gain_slope), "gain_slope", "in [0, 1)")?;
        check(self.landing_limit > 0.0, "landing_limit", "> 0")?;
        check(self.velocity_limit > 0.0, "velocity_limit", "> 0")?;
        check(self.monitor_window >= 1, "monitor_window", ">= 1")?;
        check(self.z_drift >= 0.0 && self.z_drift.is_finite(), "z_drift", ">= 0")
    }

    pub fn dynamics(&self) -> Dynamics {
        Dynamics::CompliantDoubleIntegrator {
            dt: self.dt,
            gain_slope: self.gain_slope,
        }
    }

    fn in_tolerance(&self, s: &EmbodiedState) -> bool {
        s.position[0].abs() < self.eps_p && s.velocity[0].abs() < self.eps_v
    }
}

/// Per-trial summary kept alongside the run record.
#[derive(Debug, Clone, PartialEq)]
struct TrialOutcome {
    success: bool,
    time_to_stabilization: u64,
    landing_error: f64,
}

/// Start index of the final in-tolerance run if it covers at least `hold`
/// trailing states.
fn settled_from(states: &[EmbodiedState], cfg: &FamilyAConfig) -> Option<u64> {
    let tail = states.iter().rev().take_while(|s| cfg.in_tolerance(s)).count() as u64;
    (tail >= cfg.hold_steps).then(|| states.len() as u64 - tail)
}

pub fn run_family_a(
    cfg: &FamilyAConfig,
    agent: &ControllerConfig,
    verifier: &VerifierSettings,
    ledger: &LedgerConfig,
    seed: u64,
) -> Result<RunOutput> {
    cfg.validate()?;
    agent.validate()?;
    verifier.validate()?;
    let streams = RunStreams::new(seed);
    let mut env_rng = streams.child(Substream::Env, "family_a");
    let mut drift_rng = streams.child(Substream::Env, "family_a_drift");
    let mut noise_rng = streams.stream(Substream::VerifierNoise);
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(format!("env.sigma: {e}")))?;

    let dynamics = cfg.dynamics();
    let belief_cfg = BeliefConfig {
        family: Family::A,
        observation_dim: 2,
        delay: cfg.delay,
        dynamics,
        rls_enabled: agent.rls_enabled,
        forgetting: agent.forgetting,
    };
    let mut belief = Belief::new(Family::A, vec![cfg.prior_mean], vec![cfg.prior_variance], EmbodiedState::default())?;
    let mut policy = JumpPolicy {
        controller: *agent,
        dynamics,
        delay: cfg.delay,
        schedule: Default::default(),
    };
    let total_steps = cfg.trials as u64 * (cfg.horizon + 1);
    let mut accounting = RunAccounting::new(ledger.ledger(total_steps)?);
    let pipeline = schedule(
        VerifierPipeline::new(vec![
            VerifierSpec::covering(VerifierKind::Precondition, PRED_LAUNCH, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
            VerifierSpec::covering(VerifierKind::RuntimeMonitor, PRED_VELOCITY, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
            VerifierSpec::covering(VerifierKind::Postcondition, PRED_STABILIZED, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
        ])?,
        verifier.placement,
    );
    let final_step = total_steps - 1;

    let mut trace = Trace::new();
    // True state after each step's action, indexed by step.
    let mut truth: Vec<EmbodiedState> = Vec::with_capacity(total_steps as usize);
    let mut launch_ok: Vec<bool> = Vec::new();
    let mut pending = Vec::new();
    let mut trials = Vec::new();
    let (mut interventions, mut clamps, mut fallbacks) = (0u64, 0u64, 0u64);
    let mut last_z = cfg.prior_mean;
    let mut exhausted = false;

    'trials: for trial in 0..cfg.trials {
        let (lo, hi) = cfg.z_range;
        let mut z = lo + (hi - lo) * env_rng.random::<f64>();
        last_z = z;

        let launch_step = trace.next_step();
        belief.goal = Some(Goal::Launch {
            gap: cfg.gap,
            impulse: cfg.impulse,
        });
        let option = ActiveOption::start(select_option(&policy, &belief)?, launch_step);
        let out = act(&policy, &belief, &Retrieval::empty(0), &option)?;
        let Action::Launch { offset, impulse } = out.action else {
            return Err(Error::Invariant(format!("launch option produced {:?}", out.action)));
        };
        let e0 = controller::predicted_landing_error(z, offset, impulse, cfg.gap);
        let mut x = EmbodiedState {
            position: [e0, 0.0],
            velocity: [0.0; 2],
        };
        trace.push(TraceRecord {
            step: launch_step,
            observation: Observation::default(),
            action: out.action.clone(),
            option_active: option.choice.clone(),
            observed_by_adversary: false,
        })?;
        truth.push(x);
        launch_ok.push(e0.abs() <= cfg.landing_limit);
        if accounting.accrue(StepCosts::default(), &[("planner", out.compute as f64)])? == Accrual::BudgetExhausted {
            exhausted = true;
            break 'trials;
        }
        {
            let ok = e0.abs() <= cfg.landing_limit;
            let seg = trace.segment(launch_step, launch_step)?;
            let t = TruthFn(move |_: &str, _: &TraceSegment<'_>| Ok(ok));
            let spec = pipeline.spec(VerifierKind::Precondition).expect("registered");
            pending.push(pipeline.run(spec, &seg, &t, Some(SignalTarget::Trial(trial as u64)), final_step, &mut noise_rng)?);
        }

        let predicted = controller::predicted_landing_error(belief.latent_estimate(0), offset, impulse, cfg.gap);
        belief.reset_embodied(EmbodiedState {
            position: [predicted, 0.0],
            velocity: [0.0; 2],
        });
        belief.goal = Some(Goal::Stabilize);
        if !agent.feedback_enabled {
            let start = belief.reconstructed_embodied;
            let target = if cfg.in_tolerance(&start) { start } else { EmbodiedState::default() };
            policy.schedule = controller::open_loop_plan(&belief, target, &dynamics, agent.action_bound)?;
        }
        let mut option = ActiveOption::start(select_option(&policy, &belief)?, launch_step + 1);

        let trial_start = launch_step + 1;
        let mut prev_action = out.action;
        let mut states = Vec::with_capacity(cfg.horizon as usize);
        let mut in_tol_run = 0u64;
        let mut settled_once = false;
        for t in 0..cfg.horizon {
            let step = trace.next_step();
            let n_e = normal.sample(&mut env_rng);
            let n_v = normal.sample(&mut env_rng);
            let mut obs = Observation::new(vec![x.position[0] + n_e, x.velocity[0] + n_v]);
            if t == 0 {
                obs.evidence = Some(LatentEvidence {
                    latent: 0,
                    regressor: impulse * offset * offset,
                    response: impulse - cfg.gap * (1.0 - offset) - obs.values[0],
                });
            }
            belief = update_belief(&belief, &obs, &prev_action, &belief_cfg)?;
            if !option.is_live() {
                option = ActiveOption::start(select_option(&policy, &belief)?, step);
            }
            let out = act(&policy, &belief, &Retrieval::empty(0), &option)?;
            option.advance();
            let force = out.action.force().unwrap_or(0.0);
            let w = if cfg.perturb_step == Some(t) { cfg.perturb_magnitude } else { 0.0 };
            let mut next = dynamics.step(x, force, z);
            next.velocity[0] += w * cfg.dt;
            if cfg.z_drift > 0.0 {
                let dz: f64 = drift_rng.sample(rand_distr::StandardNormal);
                z = (z + cfg.z_drift * dz).clamp(lo, hi);
                last_z = z;
            }

            interventions += u64::from(force != 0.0);
            clamps += u64::from(out.clamped);
            fallbacks += u64::from(out.fallback);
            let after_perturb = cfg.perturb_step.is_some_and(|p| t >= p);
            let latency = if settled_once { 0.0 } else { 1.0 };
            trace.push(TraceRecord {
                step,
                observation: obs,
                action: out.action.clone(),
                option_active: option.choice.clone(),
                observed_by_adversary: false,
            })?;
            truth.push(next);
            states.push(next);
            in_tol_run = if cfg.in_tolerance(&next) { in_tol_run + 1 } else { 0 };
            settled_once |= in_tol_run >= cfg.hold_steps;
            let costs = StepCosts {
                latency,
                repair: if after_perturb { force.abs() } else { 0.0 },
                ..Default::default()
            };
            if accounting.accrue(costs, &[("compensator", out.compute as f64)])? == Accrual::BudgetExhausted {
                exhausted = true;
                break 'trials;
            }
            x = next;
            prev_action = out.action;
        }
        let trial_end = trace.next_step() - 1;
        let settled = settled_from(&states, cfg);
        trials.push(TrialOutcome {
            success: settled.is_some(),
            time_to_stabilization: settled.unwrap_or(cfg.horizon),
            landing_error: e0.abs(),
        });
        accounting.accrue(
            StepCosts {
                task: if settled.is_some() { 0.0 } else { 1.0 },
                ..Default::default()
            },
            &[],
        )?;

        let truth_ref = &truth;
        let t = TruthFn(|pred: &str, seg: &TraceSegment<'_>| {
            let states = &truth_ref[seg.start() as usize..=seg.end() as usize];
            match pred {
                PRED_VELOCITY => Ok(states.iter().all(|s| s.velocity[0].abs() <= cfg.velocity_limit)),
                PRED_STABILIZED => Ok(settled_from(states, cfg).is_some()),
                other => Err(Error::Invariant(format!("family A has no predicate `{other}`"))),
            }
        });
        let monitor = pipeline.spec(VerifierKind::RuntimeMonitor).expect("registered");
        let mut w0 = trial_start;
        while w0 <= trial_end {
            let w1 = (w0 + cfg.monitor_window - 1).min(trial_end);
            let seg = trace.segment(w0, w1)?;
            let s = pipeline.run(monitor, &seg, &t, Some(SignalTarget::Trial(trial as u64)), final_step, &mut noise_rng)?;
            pending.push(s.with_deadline(Some(trial_end)));
            w0 = w1 + 1;
        }
        let post = pipeline.spec(VerifierKind::Postcondition).expect("registered");
        let seg = trace.segment(trial_start, trial_end)?;
        pending.push(pipeline.run(post, &seg, &t, Some(SignalTarget::Trial(trial as u64)), final_step, &mut noise_rng)?);
    }

    let n = trials.len().max(1) as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("trial_success_rate".into(), trials.iter().filter(|t| t.success).count() as f64 / n);
    metrics.insert(
        "final_trial_success".into(),
        f64::from(u8::from(trials.last().is_some_and(|t| t.success))),
    );
    metrics.insert(
        "time_to_stabilization".into(),
        trials.iter().map(|t| t.time_to_stabilization as f64).sum::<f64>() / n,
    );
    metrics.insert("landing_error".into(), trials.iter().map(|t| t.landing_error).sum::<f64>() / n);
    metrics.insert("interventions".into(), interventions as f64);
    metrics.insert("clamp_events".into(), clamps as f64);
    metrics.insert("compensator_fallbacks".into(), fallbacks as f64);
    metrics.insert("latent_estimate".into(), belief.latent_estimate(0));
    metrics.insert("latent_error".into(), (belief.latent_estimate(0) - last_z).abs());
    metrics.insert("trials_completed".into(), trials.len() as f64);
    if exhausted {
        metrics.insert("budget_exhausted_at".into(), trace.next_step() as f64);
    }
    Ok(finish(seed, accounting, trace, pending, metrics, PRED_STABILIZED))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge() -> FamilyAConfig {
        FamilyAConfig {
            z_range: (0.8, 0.8),
            ..Default::default()
        }
    }

    fn run(cfg: &FamilyAConfig, agent: &ControllerConfig, seed: u64) -> RunOutput {
        run_family_a(cfg, agent, &VerifierSettings::default(), &LedgerConfig::default(), seed).unwrap()
    }

    #[test]
    fn matched_model_open_loop_succeeds_without_corrections() {
        let cfg = FamilyAConfig {
            z_range: (0.5, 0.5),
            sigma: 0.0,
            delay: 0,
            perturb_step: None,
            ..Default::default()
        };
        let out = run(&cfg, &ControllerConfig::open_loop(), 3);
        assert!(out.record.success);
        assert_eq!(out.record.metrics["interventions"], 0.0);
    }

    #[test]
    fn perturbation_without_control_fails_and_conserves_velocity() {
        let cfg = FamilyAConfig {
            z_range: (0.5, 0.5),
            sigma: 0.0,
            trials: 1,
            ..Default::default()
        };
        let out = run(&cfg, &ControllerConfig::open_loop(), 1);
        assert!(!out.record.success);
        let records = out.trace.records();
        // Every force after launch is zero, so velocity stays at w·dt.
        assert!(records[1..].iter().all(|r| r.action == Action::Force { value: 0.0 }));
    }

    #[test]
    fn edge_compliance_separates_feedback_from_open_loop() {
        let cfg = edge();
        for seed in 0..10 {
            assert!(run(&cfg, &ControllerConfig::default(), seed).record.success, "seed {seed}");
            assert!(!run(&cfg, &ControllerConfig::open_loop(), seed).record.success, "seed {seed}");
        }
    }

    #[test]
    fn d0_sigma0_belief_tracks_truth_exactly() {
        let cfg = FamilyAConfig {
            delay: 0,
            sigma: 0.0,
            trials: 1,
            horizon: 40,
            ..Default::default()
        };
        let out = run(&cfg, &ControllerConfig::default(), 11);
        // With no delay, every force is computed from the exact current
        // error: check it against the PD law on the recorded observations.
        let c = ControllerConfig::default();
        for r in &out.trace.records()[1..] {
            let expect = controller::pd_feedback(&c, r.observation.values[0], r.observation.values[1]).force;
            assert_eq!(r.action, Action::Force { value: expect });
        }
    }

    #[test]
    fn kappa_is_conserved() {
        let out = run(&FamilyAConfig::default(), &ControllerConfig::default(), 5);
        let sum: f64 = out.record.kappa_by_module.values().sum();
        assert_eq!(sum, out.record.ledger.as_ref().unwrap().compute_used);
        assert!(sum > 0.0);
    }

    #[test]
    fn ablations_do_not_shift_env_draws() {
        let cfg = FamilyAConfig::default();
        let a = run(&cfg, &ControllerConfig::default(), 9);
        let b = run(&cfg, &ControllerConfig { compensator_enabled: false, ..Default::default() }, 9);
        let obs = |o: &RunOutput| -> Vec<f64> {
            o.trace.records().iter().filter(|r| r.step == 1).flat_map(|r| r.observation.values.clone()).collect()
        };
        assert_eq!(obs(&a), obs(&b));
    }

    #[test]
    fn stiffness_drift_is_clamped_to_range() {
        let pinned = edge();
        let drifting = FamilyAConfig { z_drift: 0.05, ..edge() };
        let a = run(&pinned, &ControllerConfig::default(), 4);
        let b = run(&drifting, &ControllerConfig::default(), 4);
        let states = |o: &RunOutput| -> Vec<Action> { o.trace.records().iter().map(|r| r.action.clone()).collect() };
        assert_eq!(states(&a), states(&b));
    }

    #[test]
    fn stiffness_drift_changes_the_rollout() {
        let base = FamilyAConfig { sigma: 0.0, ..Default::default() };
        let drifting = FamilyAConfig { z_drift: 0.02, ..base.clone() };
        let a = run(&base, &ControllerConfig::default(), 6);
        let b = run(&drifting, &ControllerConfig::default(), 6);
        assert_eq!(a.trace.records()[1].observation, b.trace.records()[1].observation);
        assert_ne!(a.trace.records(), b.trace.records());
        assert!(FamilyAConfig { z_drift: -1.0, ..base }.validate().is_err());
    }
}
