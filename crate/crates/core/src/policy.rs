//! Concrete option and primitive policies. Everything here is a function of
//! the belief, the retrieval result and the active option.

use crate::controller::{self, ActionSchedule, ControllerConfig, LAUNCH_GRID};
use crate::error::Result;
use crate::memory::Retrieval;
use crate::observer::Cell;
use crate::state::{ActOutcome, Action, Belief, Dynamics, Family, Goal, OptionChoice, OptionKind, OptionPolicy, PrimitivePolicy};

/// Family A agent: grid-searched launch, then stabilization by PD feedback
/// on a compensated or raw delayed error, or by a fixed open-loop schedule
/// when feedback is off.
#[derive(Debug, Clone)]
pub struct JumpPolicy {
    pub controller: ControllerConfig,
    pub dynamics: Dynamics,
    pub delay: usize,
    pub schedule: ActionSchedule,
}

impl OptionPolicy for JumpPolicy {
    fn family(&self) -> Family {
        Family::A
    }

    fn choose(&self, belief: &Belief) -> OptionChoice {
        match belief.goal {
            Some(Goal::Launch { gap, impulse }) => {
                let pick = controller::best_launch_offset(belief.latent_estimate(0), impulse, gap);
                OptionChoice::new(OptionKind::Launch, &[("impulse", impulse), ("offset", pick.offset)])
            }
            _ => OptionChoice::new(OptionKind::Stabilize, &[]),
        }
    }
}

impl PrimitivePolicy for JumpPolicy {
    fn act(&self, belief: &Belief, _retrieved: &Retrieval, option: &OptionChoice) -> Result<ActOutcome> {
        if option.kind == OptionKind::Launch {
            let offset = option.param("offset")?.clamp(0.0, 1.0);
            let impulse = option.param("impulse")?.max(0.0);
            return Ok(ActOutcome {
                compute: LAUNCH_GRID as u64,
                ..ActOutcome::plain(Action::Launch { offset, impulse })
            });
        }
        if !self.controller.feedback_enabled {
            let i = belief.updates.saturating_sub(1) as usize;
            return Ok(ActOutcome::plain(Action::Force {
                value: self.schedule.force_at(i),
            }));
        }
        let (e, rate, compute, fallback) = if self.controller.compensator_enabled {
            let log: Vec<f64> = belief.action_log.iter().copied().collect();
            let c = controller::predictive_compensate(belief, &log, self.delay, &self.dynamics);
            (c.error, c.error_rate, c.compute, c.fallback)
        } else {
            let raw = belief.delayed_embodied;
            (raw.position[0], raw.velocity[0], 0, false)
        };
        let fb = controller::pd_feedback(&self.controller, e, rate);
        Ok(ActOutcome {
            action: fb.action(),
            compute,
            clamped: fb.clamped,
            fallback,
        })
    }
}

/// Caching and retrieval agent for families B and C. When observer-aware,
/// it defers a cache while its own estimate of the observer's belief puts
/// more than `conceal_threshold` mass on the current cell.
#[derive(Debug, Clone)]
pub struct ForagerPolicy {
    pub family: Family,
    pub observer_aware: bool,
    pub conceal_threshold: f64,
    pub conceal_wait: u32,
}

impl ForagerPolicy {
    fn exposed(&self, belief: &Belief) -> bool {
        if !self.observer_aware {
            return false;
        }
        let Some(obs) = &belief.observer_estimate else {
            return false;
        };
        obs.mass(Cell::containing(belief.reconstructed_embodied.position)) > self.conceal_threshold
    }
}

impl OptionPolicy for ForagerPolicy {
    fn family(&self) -> Family {
        self.family
    }

    fn choose(&self, belief: &Belief) -> OptionChoice {
        match &belief.goal {
            Some(Goal::Cache {
                location,
                item_type,
                value,
            }) => {
                let here = belief.reconstructed_embodied.position == *location;
                if self.family == Family::C && here && self.exposed(belief) {
                    return OptionChoice::new(OptionKind::Conceal, &[("wait", self.conceal_wait as f64)]);
                }
                match self.family {
                    Family::C => OptionChoice::new(OptionKind::Cache, &[("x", location[0]), ("y", location[1])]),
                    _ => OptionChoice::new(
                        OptionKind::Cache,
                        &[
                            ("item_type", *item_type as f64),
                            ("value", *value),
                            ("x", location[0]),
                            ("y", location[1]),
                        ],
                    ),
                }
            }
            Some(Goal::Decoy { location }) if self.family == Family::C => {
                OptionChoice::new(OptionKind::Probe, &[("x", location[0]), ("y", location[1])])
            }
            Some(Goal::Retrieve { item_type }) => OptionChoice::new(OptionKind::Retrieve, &[("item_type", *item_type as f64)]),
            _ => OptionChoice::new(OptionKind::Retrieve, &[("item_type", 0.0)]),
        }
    }
}

impl PrimitivePolicy for ForagerPolicy {
    fn act(&self, belief: &Belief, retrieved: &Retrieval, option: &OptionChoice) -> Result<ActOutcome> {
        let action = match option.kind {
            OptionKind::Cache => {
                let location = [option.param("x")?, option.param("y")?];
                if belief.reconstructed_embodied.position == location {
                    Action::Dig { location }
                } else {
                    Action::Move { location }
                }
            }
            OptionKind::Conceal => Action::Wait,
            OptionKind::Probe => Action::Decoy {
                location: [option.param("x")?, option.param("y")?],
            },
            OptionKind::Retrieve => {
                return Ok(ActOutcome {
                    compute: retrieved.probes_used + 1,
                    ..ActOutcome::plain(match retrieved.decoded_location {
                        Some(location) => Action::Dig { location },
                        None => Action::Idle,
                    })
                });
            }
            _ => Action::Idle,
        };
        Ok(ActOutcome::plain(action))
    }
}

/// Family D role selector: the option is whatever role the protocol has
/// handed to the agent.
#[derive(Debug, Clone, Copy)]
pub struct RolePolicy {
    pub adversary_probes: u32,
}

impl OptionPolicy for RolePolicy {
    fn family(&self) -> Family {
        Family::D
    }

    fn choose(&self, belief: &Belief) -> OptionChoice {
        match belief.goal {
            Some(Goal::Role(OptionKind::Probe)) => {
                OptionChoice::new(OptionKind::Probe, &[("count", self.adversary_probes as f64)])
            }
            Some(Goal::Role(kind @ (OptionKind::Execute | OptionKind::Check))) => OptionChoice::new(kind, &[]),
            _ => OptionChoice::new(OptionKind::Propose, &[]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{Landmark, LandmarkSet, Query};
    use crate::observer::{observer_update, ObservedEvent, ObserverBelief, ObserverParams};
    use crate::state::{form_query, select_option, EmbodiedState};

    fn forager(aware: bool) -> ForagerPolicy {
        ForagerPolicy {
            family: Family::C,
            observer_aware: aware,
            conceal_threshold: 0.005,
            conceal_wait: 3,
        }
    }

    #[test]
    fn family_b_retrieval_goal_selects_retrieve() {
        let mut b = Belief::new(Family::B, vec![], vec![], EmbodiedState::default()).unwrap();
        b.goal = Some(Goal::Retrieve { item_type: 2 });
        let p = ForagerPolicy {
            family: Family::B,
            ..forager(false)
        };
        let o = select_option(&p, &b).unwrap();
        assert_eq!(o.kind, OptionKind::Retrieve);
        assert_eq!(o.param("item_type").unwrap(), 2.0);
    }

    #[test]
    fn exposed_cell_triggers_conceal() {
        let cell = Cell::new(4, 7);
        let loc = cell.center();
        let mut b = Belief::new(Family::C, vec![], vec![], EmbodiedState::at(loc)).unwrap();
        b.goal = Some(Goal::Cache {
            location: loc,
            item_type: 1,
            value: 1.0,
        });
        let uniform = ObserverBelief::uniform(0.0, ObserverParams::default()).unwrap();
        b.observer_estimate = Some(uniform.clone());
        // Uniform mass 1/400 is below the threshold.
        assert_eq!(select_option(&forager(true), &b).unwrap().kind, OptionKind::Cache);
        let seen = observer_update(&uniform, ObservedEvent::SawPresence(cell)).unwrap();
        // 0.5/25 + 0.5/400 relative to a total of 1: well above 0.005.
        assert!(seen.mass(cell) > 0.005);
        b.observer_estimate = Some(seen);
        assert_eq!(select_option(&forager(true), &b).unwrap().kind, OptionKind::Conceal);
        assert_eq!(select_option(&forager(false), &b).unwrap().kind, OptionKind::Cache);
    }

    #[test]
    fn launch_option_matches_grid_scan() {
        let mut b = Belief::new(Family::A, vec![0.5], vec![1.0], EmbodiedState::default()).unwrap();
        b.goal = Some(Goal::Launch { gap: 1.0, impulse: 0.5 });
        let p = JumpPolicy {
            controller: ControllerConfig::default(),
            dynamics: Dynamics::Static,
            delay: 0,
            schedule: ActionSchedule::default(),
        };
        let o = select_option(&p, &b).unwrap();
        assert_eq!(o.kind, OptionKind::Launch);
        // Hand scan: the root of ℓ − 0.5 − 0.25ℓ² is 2 − √2 ≈ 0.5858.
        assert!((o.param("offset").unwrap() - 0.59).abs() < 1e-12);
    }

    #[test]
    fn policy_family_mismatch_is_config_error() {
        let b = Belief::new(Family::A, vec![0.5], vec![1.0], EmbodiedState::default()).unwrap();
        assert!(matches!(select_option(&forager(true), &b), Err(crate::Error::Config(_))));
    }

    #[test]
    fn retrieve_act_passes_through_location() {
        let b = Belief::new(Family::B, vec![], vec![], EmbodiedState::default()).unwrap();
        let r = Retrieval {
            episode: None,
            decoded_location: Some([0.3, 0.4]),
            probes_used: 6,
            confidence: 1.0,
        };
        let o = OptionChoice::new(OptionKind::Retrieve, &[("item_type", 1.0)]);
        let out = forager(false).act(&b, &r, &o).unwrap();
        assert_eq!(out.action, Action::Dig { location: [0.3, 0.4] });
        assert_eq!(out.compute, 7);
    }

    #[test]
    fn query_for_launch_is_empty_and_retrieve_carries_cue() {
        let lm = LandmarkSet::new(vec![
            Landmark { id: 0, position: [0.0, 0.0] },
            Landmark { id: 1, position: [1.0, 0.0] },
            Landmark { id: 2, position: [0.0, 1.0] },
        ]);
        let mut b = Belief::new(Family::B, vec![], vec![], EmbodiedState::at([0.25, 0.5])).unwrap();
        b.landmark_estimates = lm.clone();
        let launch = OptionChoice::new(OptionKind::Launch, &[("impulse", 0.5), ("offset", 0.2)]);
        assert_eq!(form_query(&b, &launch).unwrap(), Query::Empty);
        let q = form_query(&b, &OptionChoice::new(OptionKind::Retrieve, &[("item_type", 2.0)])).unwrap();
        let Query::Lookup(q) = q else { panic!() };
        assert_eq!(q.item_type, 2);
        let e = q.cue.entries();
        assert!((e[0].distance - (0.25f64.powi(2) + 0.25).sqrt()).abs() < 1e-12);
        let cache = OptionChoice::new(OptionKind::Cache, &[("item_type", 3.0), ("value", 2.0), ("x", 0.9), ("y", 0.1)]);
        let Query::Lookup(cq) = form_query(&b, &cache).unwrap() else { panic!() };
        assert_eq!(cq.cue, crate::memory::CueVector::encode([0.9, 0.1], &lm).unwrap());
        assert_eq!(cq.value_band, Some((2.0, 2.0)));
    }
}
