//! Open-loop plans, PD feedback, delay compensation by forward simulation,
//! and recursive least-squares latent estimation. Each piece is switchable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{Action, Belief, Dynamics, EmbodiedState};

/// Number of offsets scanned when choosing a launch.
pub const LAUNCH_GRID: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub feedback_enabled: bool,
    pub compensator_enabled: bool,
    pub rls_enabled: bool,
    pub kp: f64,
    pub kd: f64,
    pub action_bound: f64,
    pub forgetting: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            feedback_enabled: true,
            compensator_enabled: true,
            rls_enabled: true,
            kp: 3.0,
            kd: 2.5,
            action_bound: 2.0,
            forgetting: 0.98,
        }
    }
}

impl ControllerConfig {
    pub fn open_loop() -> Self {
        Self {
            feedback_enabled: false,
            compensator_enabled: false,
            rls_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, rule: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("agent.controller.{key} must be {rule}")))
            }
        };
        check(self.kp.is_finite() && self.kp >= 0.0, "kp", ">= 0")?;
        check(self.kd.is_finite() && self.kd >= 0.0, "kd", ">= 0")?;
        check(self.action_bound.is_finite() && self.action_bound > 0.0, "action_bound", "> 0")?;
        check(self.forgetting > 0.9 && self.forgetting <= 1.0, "forgetting", "in (0.9, 1]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub force: f64,
    pub clamped: bool,
}

impl Feedback {
    pub fn action(&self) -> Action {
        Action::Force { value: self.force }
    }
}

/// `clamp(−kp·e − kd·ė, ±bound)`; identically zero when feedback is off.
pub fn pd_feedback(config: &ControllerConfig, error: f64, error_rate: f64) -> Feedback {
    if !config.feedback_enabled {
        return Feedback {
            force: 0.0,
            clamped: false,
        };
    }
    let raw = -config.kp * error - config.kd * error_rate;
    let force = raw.clamp(-config.action_bound, config.action_bound);
    Feedback {
        force,
        clamped: force != raw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compensated {
    pub error: f64,
    pub error_rate: f64,
    /// Forward-simulation steps spent (κ).
    pub compute: u64,
    /// Set when the log was too short and the raw delayed state was used.
    pub fallback: bool,
}

/// Smith-predictor estimate of the present error: forward-simulates the
/// belief-mean dynamics from the delayed observation through the last `d`
/// logged forces.
pub fn predictive_compensate(belief: &Belief, action_log: &[f64], d: usize, dynamics: &Dynamics) -> Compensated {
    let raw = belief.delayed_embodied;
    if d == 0 || action_log.len() < d {
        return Compensated {
            error: raw.position[0],
            error_rate: raw.velocity[0],
            compute: 0,
            fallback: d > 0,
        };
    }
    let z = belief.latent_estimate(0);
    let now = action_log[action_log.len() - d..]
        .iter()
        .fold(raw, |s, &f| dynamics.step(s, f, z));
    Compensated {
        error: now.position[0],
        error_rate: now.velocity[0],
        compute: d as u64,
        fallback: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub estimate: f64,
    pub variance: f64,
    pub forgetting: f64,
    pub samples: u64,
}

impl RlsState {
    pub fn new(estimate: f64, variance: f64, forgetting: f64) -> Self {
        Self {
            estimate,
            variance,
            forgetting,
            samples: 0,
        }
    }
}

/// Scalar recursive least squares with exponential forgetting.
pub fn rls_update(state: &RlsState, regressor: f64, response: f64) -> RlsState {
    if regressor == 0.0 || !regressor.is_finite() {
        return *state;
    }
    let p = state.variance / state.forgetting;
    let gain = p * regressor / (1.0 + regressor * regressor * p);
    RlsState {
        estimate: state.estimate + gain * (response - regressor * state.estimate),
        variance: (1.0 - gain * regressor) * p,
        forgetting: state.forgetting,
        samples: state.samples + 1,
    }
}

/// Landing error of a launch: `u·(1 − z·ℓ²) − D0·(1 − ℓ)`.
pub fn predicted_landing_error(z: f64, offset: f64, impulse: f64, gap: f64) -> f64 {
    impulse * (1.0 - z * offset * offset) - gap * (1.0 - offset)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaunchChoice {
    pub offset: f64,
    pub predicted_error: f64,
    pub compute: u64,
}

/// Scans `LAUNCH_GRID` offsets in `[0, 1]` and keeps the smallest predicted
/// |error|; ties go to the smaller offset.
pub fn best_launch_offset(z: f64, impulse: f64, gap: f64) -> LaunchChoice {
    let mut best = LaunchChoice {
        offset: 0.0,
        predicted_error: predicted_landing_error(z, 0.0, impulse, gap),
        compute: LAUNCH_GRID as u64,
    };
    for i in 1..LAUNCH_GRID {
        let offset = i as f64 / (LAUNCH_GRID - 1) as f64;
        let e = predicted_landing_error(z, offset, impulse, gap);
        if e.abs() < best.predicted_error.abs() {
            best.offset = offset;
            best.predicted_error = e;
        }
    }
    best
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionSchedule {
    forces: Vec<f64>,
}

impl ActionSchedule {
    pub fn forces(&self) -> &[f64] {
        &self.forces
    }

    pub fn len(&self) -> usize {
        self.forces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forces.is_empty()
    }

    /// Force for step `i`; zero once the schedule is exhausted.
    pub fn force_at(&self, i: usize) -> f64 {
        self.forces.get(i).copied().unwrap_or(0.0)
    }
}

const MAX_PLAN_HALF: usize = 400;

/// Two-phase constant-force plan from the belief's reconstructed state to
/// `target` under belief-mean dynamics. The phase length grows until both
/// forces fit inside `bound`.
pub fn open_loop_plan(belief: &Belief, target: EmbodiedState, dynamics: &Dynamics, bound: f64) -> Result<ActionSchedule> {
    if belief.latent_mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::Input("belief latent mean is not finite".into()));
    }
    let start = belief.reconstructed_embodied;
    let (x0, v0) = (start.position[0], start.velocity[0]);
    let (xt, vt) = (target.position[0], target.velocity[0]);
    if x0 == xt && v0 == vt {
        return Ok(ActionSchedule::default());
    }
    let Dynamics::CompliantDoubleIntegrator { dt, .. } = *dynamics else {
        return Ok(ActionSchedule::default());
    };
    let g = dynamics.actuation_gain(belief.latent_estimate(0));
    for n in 1..=MAX_PLAN_HALF {
        let nf = n as f64;
        let tri = nf * (nf - 1.0) / 2.0;
        // Two phases of n steps with forces a0 then a1:
        //   v_2n = v0 + n·g·dt·(a0 + a1)
        //   x_2n = x0 + 2n·dt·v0 + g·dt²·(a0·(n² + tri) + a1·tri)
        let (m11, m12) = (g * dt * dt * (nf * nf + tri), g * dt * dt * tri);
        let (m21, m22) = (nf * g * dt, nf * g * dt);
        let r1 = xt - x0 - 2.0 * nf * dt * v0;
        let r2 = vt - v0;
        let det = m11 * m22 - m12 * m21;
        if det.abs() < 1e-15 {
            continue;
        }
        let a0 = (r1 * m22 - m12 * r2) / det;
        let a1 = (m11 * r2 - m21 * r1) / det;
        if a0.abs() <= bound && a1.abs() <= bound {
            let mut forces = vec![a0; n];
            forces.extend(std::iter::repeat_n(a1, n));
            return Ok(ActionSchedule { forces });
        }
    }
    Err(Error::Input(format!(
        "no open-loop plan within {} steps fits action bound {bound}",
        2 * MAX_PLAN_HALF
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Family;

    const DYN: Dynamics = Dynamics::CompliantDoubleIntegrator {
        dt: 0.05,
        gain_slope: 0.5,
    };

    fn belief_at(z: f64, e: f64, v: f64) -> Belief {
        let s = EmbodiedState {
            position: [e, 0.0],
            velocity: [v, 0.0],
        };
        Belief::new(Family::A, vec![z], vec![1.0], s).unwrap()
    }

    #[test]
    fn pd_equilibrium_and_arithmetic() {
        let c = ControllerConfig::default();
        assert_eq!(pd_feedback(&c, 0.0, 0.0).force, 0.0);
        let c = ControllerConfig {
            kp: 2.0,
            kd: 1.0,
            action_bound: 10.0,
            ..c
        };
        let f = pd_feedback(&c, 0.5, -0.1);
        assert!((f.force - -0.9).abs() < 1e-15);
        assert!(!f.clamped);
    }

    #[test]
    fn pd_clamps_to_bound() {
        let c = ControllerConfig::default();
        let hi = pd_feedback(&c, -100.0, 0.0);
        let lo = pd_feedback(&c, 100.0, 0.0);
        assert_eq!(hi.force, c.action_bound);
        assert_eq!(lo.force, -c.action_bound);
        assert!(hi.clamped && lo.clamped);
    }

    #[test]
    fn pd_disabled_is_identically_zero() {
        let c = ControllerConfig::open_loop();
        for e in [-5.0, 0.3, 7.0] {
            assert_eq!(pd_feedback(&c, e, 1.0).force, 0.0);
        }
    }

    #[test]
    fn compensate_d0_is_identity() {
        let b = belief_at(0.5, 0.12, -0.3);
        let c = predictive_compensate(&b, &[1.0, 2.0], 0, &DYN);
        assert_eq!((c.error, c.error_rate, c.compute, c.fallback), (0.12, -0.3, 0, false));
    }

    #[test]
    fn compensate_short_log_falls_back() {
        let b = belief_at(0.5, 0.12, -0.3);
        let c = predictive_compensate(&b, &[1.0], 3, &DYN);
        assert!(c.fallback);
        assert_eq!((c.error, c.error_rate, c.compute), (0.12, -0.3, 0));
    }

    #[test]
    fn compensate_matches_stepwise_simulation() {
        let z = 0.37;
        let log = [0.4, -1.2, 0.7, 1.9];
        let b = belief_at(z, 0.05, 0.2);
        let c = predictive_compensate(&b, &log, 4, &DYN);
        let (mut e, mut v) = (0.05, 0.2);
        for a in log {
            let e_next = e + v * 0.05;
            v += (1.0 - 0.5 * z) * a * 0.05;
            e = e_next;
        }
        assert!((c.error - e).abs() < 1e-9);
        assert!((c.error_rate - v).abs() < 1e-9);
        assert_eq!(c.compute, 4);
    }

    #[test]
    fn compensate_bias_follows_analytic_propagation() {
        // Constant force a from rest: a gain error δg gives a velocity bias of
        // δg·a·dt·k after k steps and a position bias of δg·a·dt²·k(k−1)/2.
        let (z_true, dz, a, dt, d) = (0.6, 0.1, 1.5, 0.05, 5usize);
        let log = vec![a; d];
        let truth = predictive_compensate(&belief_at(z_true, 0.0, 0.0), &log, d, &DYN);
        let biased = predictive_compensate(&belief_at(z_true + dz, 0.0, 0.0), &log, d, &DYN);
        let dg = -0.5 * dz;
        let k = d as f64;
        let pos_bias = dg * a * dt * dt * k * (k - 1.0) / 2.0;
        let vel_bias = dg * a * dt * k;
        assert!((biased.error - truth.error - pos_bias).abs() < 1e-12);
        assert!((biased.error_rate - truth.error_rate - vel_bias).abs() < 1e-12);
        let bias_at = |d: usize| {
            let log = vec![a; d];
            let t = predictive_compensate(&belief_at(z_true, 0.0, 0.0), &log, d, &DYN);
            let b = predictive_compensate(&belief_at(z_true + dz, 0.0, 0.0), &log, d, &DYN);
            (b.error_rate - t.error_rate).abs()
        };
        assert!(bias_at(1) < bias_at(3) && bias_at(3) < bias_at(5));
    }

    #[test]
    fn rls_zero_regressor_is_noop() {
        let s = RlsState::new(0.3, 2.0, 0.98);
        assert_eq!(rls_update(&s, 0.0, 5.0), s);
    }

    #[test]
    fn rls_noiseless_three_updates_match_least_squares() {
        let theta = 0.731;
        let xs = [0.4, -1.3, 2.2];
        let mut s = RlsState::new(0.0, 1e12, 1.0);
        for x in xs {
            s = rls_update(&s, x, theta * x);
        }
        // Batch least squares: θ̂ = Σxy / Σx².
        let sxy: f64 = xs.iter().map(|x| x * theta * x).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        assert!((s.estimate - sxy / sxx).abs() < 1e-9);
        assert!((s.estimate - theta).abs() < 1e-9);
    }

    #[test]
    fn rls_noise_trajectory_inside_monte_carlo_envelope() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let theta = 0.8;
        let noise = Normal::new(0.0, 0.05).unwrap();
        let trials = 50;
        let reps = 400;
        let run = |seed: u64| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = RlsState::new(0.5, 1e12, 0.98);
            let mut out = Vec::with_capacity(trials);
            for t in 0..trials {
                let x = 0.2 + 0.3 * ((t % 5) as f64) / 4.0;
                s = rls_update(&s, x, theta * x + noise.sample(&mut rng));
                out.push(s.estimate - theta);
            }
            out
        };
        let mc: Vec<Vec<f64>> = (0..reps).map(|r| run(1000 + r)).collect();
        let probe = run(7);
        let mut outside = 0;
        for t in 0..trials {
            let col: Vec<f64> = mc.iter().map(|r| r[t]).collect();
            let mean = col.iter().sum::<f64>() / reps as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            if (probe[t] - mean).abs() > 3.0 * sd {
                outside += 1;
            }
        }
        assert!(outside <= 1, "{outside} of {trials} steps outside the 3σ envelope");
    }

    #[test]
    fn rls_variance_strictly_decreases_without_forgetting() {
        let mut s = RlsState::new(0.0, 4.0, 1.0);
        for x in [0.1, -0.5, 3.0, 0.01] {
            let next = rls_update(&s, x, 1.0);
            assert!(next.variance < s.variance);
            s = next;
        }
    }

    #[test]
    fn launch_scan_matches_brute_force() {
        for z in [0.2, 0.5, 0.8] {
            let pick = best_launch_offset(z, 0.5, 1.0);
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..=100 {
                let l = i as f64 * 0.01;
                let e = (0.5 * (1.0 - z * l * l) - (1.0 - l)).abs();
                if e < best.0 {
                    best = (e, l);
                }
            }
            assert!((pick.offset - best.1).abs() < 1e-12);
            assert_eq!(pick.compute, 101);
        }
    }

    #[test]
    fn open_loop_empty_at_target() {
        let b = belief_at(0.5, 0.2, -0.1);
        let target = b.reconstructed_embodied;
        assert!(open_loop_plan(&b, target, &DYN, 2.0).unwrap().is_empty());
    }

    #[test]
    fn open_loop_reaches_target_when_model_is_true() {
        let z = 0.5;
        let b = belief_at(z, 0.25, 0.1);
        let plan = open_loop_plan(&b, EmbodiedState::default(), &DYN, 2.0).unwrap();
        assert!(plan.forces().iter().all(|f| f.abs() <= 2.0));
        let (mut e, mut v) = (0.25, 0.1);
        for &a in plan.forces() {
            let e_next = e + v * 0.05;
            v += (1.0 - 0.5 * z) * a * 0.05;
            e = e_next;
        }
        assert!(e.abs() < 1e-9 && v.abs() < 1e-9, "e={e} v={v}");
    }

    #[test]
    fn open_loop_misses_when_gain_is_wrong() {
        let b = belief_at(0.2, 0.3, 0.0);
        let plan = open_loop_plan(&b, EmbodiedState::default(), &DYN, 2.0).unwrap();
        let z_true = 0.8;
        let (mut e, mut v) = (0.3, 0.0);
        for &a in plan.forces() {
            let e_next = e + v * 0.05;
            v += (1.0 - 0.5 * z_true) * a * 0.05;
            e = e_next;
        }
        // Every force is scaled by g(0.8)/g(0.2) = 2/3, so a third of the
        // planned displacement is missing and velocity does not cancel.
        assert!((e - 0.1).abs() < 1e-9, "e={e}");
        assert!(v.abs() < 1e-9);
    }
}
