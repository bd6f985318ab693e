//! Family C: caching under observation. Visible actions feed an adversary's
//! grid belief; after caching, the adversary raids its most likely cells and
//! the agent recovers what survives from memory.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check, finish, RunOutput, TruthFn, VerifierSettings};
use crate::error::{Error, Result};
use crate::ledger::{LedgerConfig, RunAccounting, StepCosts};
use crate::memory::{Landmark, MemoryStore, MemoryVariant, Retrieval, WriteOutcome};
use crate::observer::{leakage_score, observer_update, pilfer_select, Cell, ObservedEvent, ObserverBelief, ObserverParams, GRID_SIDE};
use crate::policy::ForagerPolicy;
use crate::rng::{RunStreams, StreamRng, Substream};
use crate::state::{
    act, form_query, select_option, update_belief, Action, ActiveOption, Belief, BeliefConfig, Dynamics, EmbodiedState,
    Family, Goal, ItemObservation, Observation, OptionChoice, OptionKind, Trace, TraceRecord, TraceSegment,
};
use crate::verifier::{schedule, Placement, SignalTarget, Verdict, VerifierKind, VerifierPipeline, VerifierSignal, VerifierSpec};

pub const PRED_OBSERVED: &str = "cache_while_observed";
pub const PRED_ZONE: &str = "outside_no_cache_zone";
pub const PRED_RECOVERY: &str = "recovery_target_met";

const UNSCHEDULED: u64 = u64::MAX;
const NEST: [f64; 2] = [0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyCConfig {
    pub caches: usize,
    pub pilfer_budget: usize,
    pub visibility: f64,
    pub conceal_threshold: f64,
    pub decoy_cost: f64,
    pub conceal_wait: u32,
    pub max_decoys: u32,
    pub max_relocations: u32,
    pub max_recaches: u32,
    pub pilfer_delay: u64,
    pub recovery_horizon: u64,
    pub diffusion: f64,
    pub zone_side: usize,
    pub min_spacing: usize,
    pub landmarks: usize,
    pub recovery_target: f64,
    pub observer: ObserverParams,
}

impl Default for FamilyCConfig {
    fn default() -> Self {
        Self {
            caches: 10,
            pilfer_budget: 3,
            visibility: 0.5,
            conceal_threshold: 0.005,
            decoy_cost: 2.0,
            conceal_wait: 3,
            max_decoys: 2,
            max_relocations: 2,
            max_recaches: 2,
            pilfer_delay: 5,
            recovery_horizon: 20,
            diffusion: 0.02,
            zone_side: 4,
            min_spacing: 3,
            landmarks: 12,
            recovery_target: 0.6,
            observer: ObserverParams::default(),
        }
    }
}

impl FamilyCConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.caches >= 1, "caches", ">= 1")?;
        check(self.pilfer_budget >= 1, "pilfer_budget", ">= 1")?;
        check((0.0..=1.0).contains(&self.visibility), "visibility", "in [0, 1]")?;
        check(self.conceal_threshold >= 0.0, "conceal_threshold", ">= 0")?;
        check(self.decoy_cost >= 0.0 && self.decoy_cost.is_finite(), "decoy_cost", ">= 0")?;
        check((0.0..=1.0).contains(&self.diffusion), "diffusion", "in [0, 1]")?;
        check(self.zone_side <= GRID_SIDE, "zone_side", "<= 20")?;
        check(self.landmarks >= 3, "landmarks", ">= 3")?;
        check((0.0..=1.0).contains(&self.recovery_target), "recovery_target", "in [0, 1]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CAgentFlags {
    pub observer_aware: bool,
    pub decoys_enabled: bool,
}

impl Default for CAgentFlags {
    fn default() -> Self {
        Self {
            observer_aware: true,
            decoys_enabled: true,
        }
    }
}

#[derive(Debug, Clone)]
struct CacheSlot {
    cell: Cell,
    episode: u64,
    recaches: u32,
}

struct Game<'a> {
    cfg: &'a FamilyCConfig,
    flags: CAgentFlags,
    policy: ForagerPolicy,
    belief_cfg: BeliefConfig,
    belief: Belief,
    adversary: ObserverBelief,
    memory: MemoryStore,
    landmarks: Vec<Landmark>,
    zone: (usize, usize),
    trace: Trace,
    accounting: RunAccounting,
    pipeline: VerifierPipeline,
    signals: Vec<VerifierSignal>,
    undelivered: Vec<usize>,
    noise: StreamRng,
    targets: StreamRng,
    streams: &'a RunStreams,
    slots: Vec<CacheSlot>,
    recache_queue: Vec<usize>,
    prev: Action,
    visible_digs: u64,
    conceals: u64,
    decoys: u64,
    recaches: u64,
}

impl<'a> Game<'a> {
    fn in_zone(&self, cell: Cell) -> bool {
        let (r, c) = self.zone;
        (r..r + self.cfg.zone_side).contains(&cell.row) && (c..c + self.cfg.zone_side).contains(&cell.col)
    }

    fn see(&mut self, event: ObservedEvent) -> Result<()> {
        self.adversary = observer_update(&self.adversary, event)?;
        if let Some(est) = &self.belief.observer_estimate {
            self.belief.observer_estimate = Some(observer_update(est, event)?);
        }
        Ok(())
    }

    /// One agent step: observe `position`, let the policy act under `goal`,
    /// and record the step. Returns the action and the step index.
    fn step(&mut self, position: [f64; 2], goal: Goal, retrieved: Option<&Retrieval>, item: Option<ItemObservation>, visible: bool) -> Result<(Action, u64, OptionChoice)> {
        let step = self.trace.next_step();
        let obs = Observation {
            values: position.to_vec(),
            landmarks: self.landmarks.clone(),
            item,
            ..Default::default()
        };
        self.belief = update_belief(&self.belief, &obs, &self.prev, &self.belief_cfg)?;
        self.belief.goal = Some(goal);
        let option = ActiveOption::start(select_option(&self.policy, &self.belief)?, step);
        let empty = Retrieval::empty(0);
        let out = act(&self.policy, &self.belief, retrieved.unwrap_or(&empty), &option)?;
        self.trace.push(TraceRecord {
            step,
            observation: obs,
            action: out.action.clone(),
            option_active: option.choice.clone(),
            observed_by_adversary: visible,
        })?;
        self.prev = out.action.clone();
        Ok((out.action, step, option.choice))
    }

    fn idle(&mut self, goal: Goal) -> Result<()> {
        let here = self.belief.reconstructed_embodied.position;
        let step = self.trace.next_step();
        let obs = Observation::new(here.to_vec());
        self.belief = update_belief(&self.belief, &obs, &self.prev, &self.belief_cfg)?;
        let option = match goal {
            Goal::Retrieve { item_type } => OptionChoice::new(OptionKind::Retrieve, &[("item_type", item_type as f64)]),
            _ => OptionChoice::new(OptionKind::Conceal, &[("wait", 0.0)]),
        };
        self.trace.push(TraceRecord {
            step,
            observation: obs,
            action: Action::Wait,
            option_active: option,
            observed_by_adversary: false,
        })?;
        self.prev = Action::Wait;
        self.see(ObservedEvent::SawNothing)?;
        self.accounting.accrue(StepCosts::default(), &[])?;
        Ok(())
    }

    fn pick_target(&mut self, avoid: Option<Cell>) -> Cell {
        for _ in 0..1000 {
            let cell = Cell::new(self.targets.random_range(0..GRID_SIDE), self.targets.random_range(0..GRID_SIDE));
            let spaced = self.slots.iter().all(|s| s.cell.chebyshev(cell) >= self.cfg.min_spacing);
            if spaced && avoid.is_none_or(|a| a.chebyshev(cell) >= self.cfg.min_spacing) {
                return cell;
            }
        }
        Cell::new(self.targets.random_range(0..GRID_SIDE), self.targets.random_range(0..GRID_SIDE))
    }

    /// Places cache `k` (new or re-cached), including concealment and decoys.
    fn place(&mut self, k: usize, vis: &mut StreamRng) -> Result<()> {
        let item_type = k as u32 + 1;
        let mut target = self.pick_target(self.slots.get(k).map(|s| s.cell));
        let mut relocations = 0;
        let start = self.trace.next_step();
        loop {
            let loc = target.center();
            let goal = Goal::Cache {
                location: loc,
                item_type,
                value: 1.0,
            };
            // Travel to the target; the move may be seen.
            let seen = vis.random::<f64>() < self.cfg.visibility;
            let here = self.belief.reconstructed_embodied.position;
            if here != loc {
                let (action, _, _) = self.step(here, goal.clone(), None, None, seen)?;
                if !matches!(action, Action::Move { .. }) {
                    return Err(Error::Invariant(format!("expected a move, got {action:?}")));
                }
                self.see(if seen { ObservedEvent::SawPresence(target) } else { ObservedEvent::SawNothing })?;
                self.accounting.accrue(StepCosts::default(), &[])?;
            }

            // At the target: the policy either digs or conceals.
            let item = ItemObservation { item_type, value: 1.0 };
            let seen = vis.random::<f64>() < self.cfg.visibility;
            let step = self.trace.next_step();
            let obs = Observation {
                values: loc.to_vec(),
                landmarks: self.landmarks.clone(),
                item: Some(item),
                ..Default::default()
            };
            self.belief = update_belief(&self.belief, &obs, &self.prev, &self.belief_cfg)?;
            self.belief.goal = Some(goal.clone());
            let option = ActiveOption::start(select_option(&self.policy, &self.belief)?, step);
            if option.choice.kind == OptionKind::Conceal && relocations < self.cfg.max_relocations {
                self.conceals += 1;
                let out = act(&self.policy, &self.belief, &Retrieval::empty(0), &option)?;
                self.trace.push(TraceRecord {
                    step,
                    observation: obs,
                    action: out.action.clone(),
                    option_active: option.choice.clone(),
                    observed_by_adversary: false,
                })?;
                self.prev = out.action;
                self.see(ObservedEvent::SawNothing)?;
                self.accounting.accrue(StepCosts::default(), &[])?;
                for _ in 1..self.cfg.conceal_wait {
                    self.idle(goal.clone())?;
                }
                relocations += 1;
                target = self.pick_target(Some(target));
                continue;
            }
            // Dig regardless of exposure once relocations are spent.
            let choice = OptionChoice::new(OptionKind::Cache, &[("x", loc[0]), ("y", loc[1])]);
            let option = ActiveOption::start(choice, step);
            let out = act(&self.policy, &self.belief, &Retrieval::empty(0), &option)?;
            let episode = match self.memory.write(step, &obs, &out.action, None)? {
                WriteOutcome::Appended(id) => id,
                other => return Err(Error::Invariant(format!("write produced {other:?}"))),
            };
            form_query(&self.belief, &option.choice)?;
            self.trace.push(TraceRecord {
                step,
                observation: obs,
                action: out.action.clone(),
                option_active: option.choice.clone(),
                observed_by_adversary: seen,
            })?;
            self.prev = out.action;
            self.see(if seen { ObservedEvent::SawCache(target) } else { ObservedEvent::SawNothing })?;
            self.accounting.accrue(StepCosts::default(), &[])?;
            self.visible_digs += u64::from(seen);

            let old = if k < self.slots.len() {
                let old = self.slots[k].episode;
                self.slots[k].cell = target;
                self.slots[k].episode = episode;
                Some(old)
            } else {
                self.slots.push(CacheSlot {
                    cell: target,
                    episode,
                    recaches: 0,
                });
                None
            };
            let _ = old;

            // Verifiers over the dig and over the whole placement.
            let in_zone = self.in_zone(target);
            let truth = TruthFn(move |pred: &str, _: &TraceSegment<'_>| match pred {
                PRED_OBSERVED => Ok(!seen),
                PRED_ZONE => Ok(!in_zone),
                other => Err(Error::Invariant(format!("family C has no predicate `{other}`"))),
            });
            let monitor = self.pipeline.spec_for(PRED_OBSERVED).expect("registered").clone();
            let post = self.pipeline.spec_for(PRED_ZONE).expect("registered").clone();
            let seg = self.trace.segment(step, step)?;
            let s1 = self.pipeline.run(&monitor, &seg, &truth, Some(SignalTarget::Episode(episode)), UNSCHEDULED, &mut self.noise)?;
            let seg = self.trace.segment(start, step)?;
            let s2 = self.pipeline.run(&post, &seg, &truth, Some(SignalTarget::Episode(episode)), UNSCHEDULED, &mut self.noise)?;
            for s in [s1, s2] {
                self.undelivered.push(self.signals.len());
                self.signals.push(s);
            }

            if seen && self.flags.observer_aware && self.flags.decoys_enabled {
                self.place_decoys(target, vis)?;
            }
            return Ok(());
        }
    }

    fn place_decoys(&mut self, near: Cell, vis: &mut StreamRng) -> Result<()> {
        for _ in 0..self.cfg.max_decoys {
            let cell = self.pick_target(Some(near));
            let loc = cell.center();
            let seen = vis.random::<f64>() < self.cfg.visibility;
            let here = self.belief.reconstructed_embodied.position;
            let (action, _, _) = self.step(here, Goal::Decoy { location: loc }, None, None, seen)?;
            if action != (Action::Decoy { location: loc }) {
                return Err(Error::Invariant(format!("expected a decoy, got {action:?}")));
            }
            self.decoys += 1;
            self.see(if seen { ObservedEvent::SawCache(cell) } else { ObservedEvent::SawNothing })?;
            self.accounting.accrue(StepCosts::default(), &[("decoy", self.cfg.decoy_cost)])?;
            if seen {
                break;
            }
        }
        Ok(())
    }

    /// Delivers in-loop signals that are due; failures queue a re-cache.
    fn deliver(&mut self, now: u64) -> Result<()> {
        let mut due = Vec::new();
        let signals = &self.signals;
        self.undelivered.retain(|&i| match signals[i].emitted_at {
            Some(at) if at <= now => {
                due.push(i);
                false
            }
            _ => true,
        });
        for i in due {
            let s = &self.signals[i];
            if s.verdict != Some(Verdict::Fail) {
                continue;
            }
            let Some(SignalTarget::Episode(id)) = s.target else { continue };
            let Some(k) = self.slots.iter().position(|slot| slot.episode == id) else {
                continue;
            };
            self.memory.apply_feedback(s)?;
            if self.slots[k].recaches < self.cfg.max_recaches && !self.recache_queue.contains(&k) {
                self.recache_queue.push(k);
            }
        }
        Ok(())
    }

    fn drain(&mut self, vis: &mut StreamRng) -> Result<()> {
        loop {
            self.deliver(self.trace.next_step())?;
            let Some(k) = (!self.recache_queue.is_empty()).then(|| self.recache_queue.remove(0)) else {
                return Ok(());
            };
            self.slots[k].recaches += 1;
            self.recaches += 1;
            self.accounting.accrue(
                StepCosts {
                    repair: 1.0,
                    ..Default::default()
                },
                &[],
            )?;
            self.place(k, vis)?;
        }
    }
}

pub fn run_family_c(
    cfg: &FamilyCConfig,
    flags: CAgentFlags,
    memory_variant: MemoryVariant,
    verifier: &VerifierSettings,
    ledger: &LedgerConfig,
    seed: u64,
) -> Result<RunOutput> {
    cfg.validate()?;
    verifier.validate()?;
    let streams = RunStreams::new(seed);
    let mut layout = streams.child(Substream::Env, "family_c/layout");
    let landmarks: Vec<Landmark> = (0..cfg.landmarks)
        .map(|i| Landmark {
            id: i as u32,
            position: [layout.random::<f64>(), layout.random::<f64>()],
        })
        .collect();
    let span = GRID_SIDE - cfg.zone_side + 1;
    let zone = (layout.random_range(0..span), layout.random_range(0..span));

    let uniform = ObserverBelief::uniform(cfg.diffusion, cfg.observer)?;
    let mut belief = Belief::new(Family::C, vec![], vec![], EmbodiedState::at(NEST))?;
    if flags.observer_aware {
        belief.observer_estimate = Some(uniform.clone());
    }
    let horizon = (cfg.caches as u64) * 40 + cfg.pilfer_delay + cfg.pilfer_budget as u64 + cfg.recovery_horizon;
    let mut game = Game {
        cfg,
        flags,
        policy: ForagerPolicy {
            family: Family::C,
            observer_aware: flags.observer_aware,
            conceal_threshold: cfg.conceal_threshold,
            conceal_wait: cfg.conceal_wait,
        },
        belief_cfg: BeliefConfig {
            family: Family::C,
            observation_dim: 2,
            delay: 0,
            dynamics: Dynamics::Static,
            rls_enabled: false,
            forgetting: 1.0,
        },
        belief,
        adversary: uniform,
        memory: MemoryStore::new(memory_variant),
        landmarks,
        zone,
        trace: Trace::new(),
        accounting: RunAccounting::new(ledger.ledger(horizon)?),
        pipeline: schedule(
            VerifierPipeline::new(vec![
                VerifierSpec::covering(VerifierKind::RuntimeMonitor, PRED_OBSERVED, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
                VerifierSpec::covering(VerifierKind::Postcondition, PRED_ZONE, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
                VerifierSpec::covering(VerifierKind::Postcondition, PRED_RECOVERY, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
            ])?,
            verifier.placement,
        ),
        signals: Vec::new(),
        undelivered: Vec::new(),
        noise: streams.stream(Substream::VerifierNoise),
        targets: streams.child(Substream::Agent, "family_c/targets"),
        streams: &streams,
        slots: Vec::new(),
        recache_queue: Vec::new(),
        prev: Action::Idle,
        visible_digs: 0,
        conceals: 0,
        decoys: 0,
        recaches: 0,
    };

    // Caching phase.
    for k in 0..cfg.caches {
        let mut vis = game.streams.child(Substream::Env, &format!("family_c/visibility/{k}"));
        game.place(k, &mut vis)?;
        game.drain(&mut vis)?;
    }
    // Let outstanding in-loop checks land before the adversary moves.
    let mut vis = game.streams.child(Substream::Env, "family_c/visibility/late");
    if game.pipeline.placement() == Placement::InLoop {
        while !game.undelivered.is_empty() {
            game.idle(Goal::Retrieve { item_type: 0 })?;
            game.drain(&mut vis)?;
        }
    }

    // Pilfer phase.
    if let Some(est) = &game.belief.observer_estimate {
        if est != &game.adversary {
            return Err(Error::Invariant("agent observer estimate diverged from the adversary belief".into()));
        }
    }
    let pilfer_start = game.trace.next_step();
    let live: Vec<Cell> = game.slots.iter().map(|s| s.cell).collect();
    let leak = leakage_score(&game.adversary, &live)?;
    game.accounting.accrue(
        StepCosts {
            leak,
            ..Default::default()
        },
        &[],
    )?;
    for _ in 0..cfg.pilfer_delay {
        game.idle(Goal::Retrieve { item_type: 0 })?;
    }
    let mut pilfered = vec![false; game.slots.len()];
    let mut raids_hit = 0u64;
    for _ in 0..cfg.pilfer_budget {
        let cell = pilfer_select(&game.adversary, 1)?[0];
        // The raider digs the 3×3 patch. A find makes it abandon the whole
        // sighting neighbourhood of that cache; a miss only the patch.
        match game.slots.iter().position(|s| s.cell.chebyshev(cell) <= 1) {
            Some(k) => {
                if !pilfered[k] {
                    pilfered[k] = true;
                    raids_hit += 1;
                }
                let radius = cfg.observer.presence_radius.max(cfg.observer.cache_radius);
                game.adversary.clear_patch(game.slots[k].cell, radius);
            }
            None => game.adversary.clear_patch(cell, 1),
        }
        game.idle(Goal::Retrieve { item_type: 0 })?;
    }

    // Recovery phase.
    let mut recovered = 0.0;
    let mut detected_pilferage = 0u64;
    let mut steps_left = cfg.recovery_horizon;
    for k in 0..game.slots.len() {
        if steps_left == 0 {
            break;
        }
        steps_left -= 1;
        let item_type = k as u32 + 1;
        game.belief.reconstructed_embodied = EmbodiedState::at(NEST);
        let choice = OptionChoice::new(OptionKind::Retrieve, &[("item_type", item_type as f64)]);
        game.belief.goal = Some(Goal::Retrieve { item_type });
        let query = form_query(&game.belief, &choice)?;
        let current = crate::memory::LandmarkSet::new(game.landmarks.clone());
        let retrieved = game.memory.retrieve(&query, &current)?;
        let (action, _, _) = game.step(NEST, Goal::Retrieve { item_type }, Some(&retrieved), None, false)?;
        let slot = &game.slots[k];
        let found = match action {
            Action::Dig { location } => Cell::containing(location) == slot.cell && !pilfered[k] && !game.in_zone(slot.cell),
            _ => false,
        };
        let expected_here = matches!(action, Action::Dig { .. });
        if found {
            recovered += 1.0;
        } else if expected_here {
            detected_pilferage += 1;
        }
        let costs = StepCosts {
            repair: if !found && expected_here { 1.0 } else { 0.0 },
            ..Default::default()
        };
        game.accounting.accrue(costs, &[("memory", (retrieved.probes_used + 1) as f64)])?;
    }
    let final_step = game.trace.next_step() - 1;
    let k_total = cfg.caches as f64;
    game.accounting.accrue(
        StepCosts {
            task: 1.0 - recovered / k_total,
            ..Default::default()
        },
        &[],
    )?;
    let target_met = recovered >= cfg.recovery_target * k_total;
    let post = game.pipeline.spec_for(PRED_RECOVERY).expect("registered").clone();
    let truth = TruthFn(move |_: &str, _: &TraceSegment<'_>| Ok(target_met));
    let seg = game.trace.segment(pilfer_start, final_step)?;
    let s = game.pipeline.run(&post, &seg, &truth, Some(SignalTarget::Trial(0)), final_step, &mut game.noise)?;
    game.signals.push(s);
    for s in &mut game.signals {
        if s.emitted_at == Some(UNSCHEDULED) {
            s.emitted_at = Some(final_step);
        }
        if s.predicate_id != PRED_RECOVERY {
            s.deadline = Some(pilfer_start);
        }
    }

    let in_zone = game.slots.iter().filter(|s| game.in_zone(s.cell)).count();
    let mut metrics = BTreeMap::new();
    metrics.insert("recovered_value".into(), recovered);
    metrics.insert("leakage".into(), leak);
    metrics.insert("pilfered".into(), raids_hit as f64);
    metrics.insert("detected_pilferage".into(), detected_pilferage as f64);
    metrics.insert("recaches".into(), game.recaches as f64);
    metrics.insert("correction_cost".into(), (game.recaches + detected_pilferage) as f64);
    metrics.insert("conceals".into(), game.conceals as f64);
    metrics.insert("decoys".into(), game.decoys as f64);
    metrics.insert("visible_digs".into(), game.visible_digs as f64);
    metrics.insert("caches_in_zone".into(), in_zone as f64);
    let Game {
        accounting, trace, signals, ..
    } = game;
    Ok(finish(seed, accounting, trace, signals, metrics, PRED_RECOVERY))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: &FamilyCConfig, flags: CAgentFlags, placement: Placement, seed: u64) -> RunOutput {
        let v = VerifierSettings {
            placement,
            ..Default::default()
        };
        run_family_c(cfg, flags, MemoryVariant::ClusteredIndex, &v, &LedgerConfig::default(), seed).unwrap()
    }

    const UNAWARE: CAgentFlags = CAgentFlags {
        observer_aware: false,
        decoys_enabled: false,
    };

    #[test]
    fn invisible_agent_leaks_uniform_baseline() {
        let cfg = FamilyCConfig {
            visibility: 0.0,
            ..Default::default()
        };
        for flags in [UNAWARE, CAgentFlags::default()] {
            let out = run(&cfg, flags, Placement::InLoop, 3);
            assert!((out.record.metrics["leakage"] - 10.0 / 400.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_visibility_full_budget_loses_everything() {
        let cfg = FamilyCConfig {
            visibility: 1.0,
            pilfer_budget: 10,
            ..Default::default()
        };
        for seed in 0..20 {
            let out = run(&cfg, UNAWARE, Placement::EndOnly, seed);
            assert_eq!(out.record.metrics["recovered_value"], 0.0, "seed {seed}");
            assert_eq!(out.record.metrics["pilfered"], 10.0, "seed {seed}");
        }
    }

    #[test]
    fn awareness_lowers_leakage() {
        let cfg = FamilyCConfig::default();
        let (mut aware, mut unaware) = (0.0, 0.0);
        for seed in 0..30 {
            aware += run(&cfg, CAgentFlags::default(), Placement::InLoop, seed).record.metrics["leakage"];
            unaware += run(&cfg, UNAWARE, Placement::EndOnly, seed).record.metrics["leakage"];
        }
        assert!(aware < unaware, "{aware} vs {unaware}");
    }

    #[test]
    fn end_only_checks_arrive_after_the_deadline() {
        let out = run(&FamilyCConfig::default(), UNAWARE, Placement::EndOnly, 7);
        let m = &out.record.metrics;
        assert!(m["visible_digs"] > 0.0);
        assert_eq!(m["verifier_miss_rate"], 1.0);
        assert_eq!(m["recaches"], 0.0);
    }
}
