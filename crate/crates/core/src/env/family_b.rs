//! Family B: thousands of one-shot caching events, a delay, landmark drift,
//! then one retrieval per true cache.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{check, finish, RunOutput, TruthFn, VerifierSettings};
use crate::error::{Error, Result};
use crate::ledger::{quantile, Accrual, LedgerConfig, RunAccounting, StepCosts};
use crate::memory::{Landmark, MemoryStore, MemoryVariant, Retrieval};
use crate::policy::ForagerPolicy;
use crate::rng::{RunStreams, StreamRng, Substream};
use crate::state::{
    act, form_query, select_option, update_belief, Action, ActiveOption, Belief, BeliefConfig, Dynamics, EmbodiedState,
    Family, Goal, ItemObservation, Observation, OptionChoice, OptionKind, Trace, TraceRecord, TraceSegment,
};
use crate::verifier::{schedule, Placement, SignalTarget, VerifierKind, VerifierPipeline, VerifierSignal, VerifierSpec};

pub const PRED_RECORDED: &str = "cache_recorded";
pub const PRED_RECALL: &str = "recall_precision";
pub const PRED_PROVENANCE: &str = "retrieval_cites_written_episode";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyBConfig {
    pub n_events: usize,
    pub item_types: u32,
    pub landmarks: usize,
    pub delay_steps: u64,
    pub sigma_d: f64,
    pub conflict_rate: f64,
    pub r_dig: f64,
    pub distractor_radius: f64,
    /// Store sizes for the degradation curve; empty disables it.
    pub n_ladder: Vec<usize>,
    pub precision_target: f64,
}

impl Default for FamilyBConfig {
    fn default() -> Self {
        Self {
            n_events: 1024,
            item_types: 8,
            landmarks: 12,
            delay_steps: 100,
            sigma_d: 0.02,
            conflict_rate: 0.5,
            r_dig: 0.05,
            distractor_radius: 0.05,
            n_ladder: Vec::new(),
            precision_target: 0.8,
        }
    }
}

impl FamilyBConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.n_events >= 1, "n_events", ">= 1")?;
        check(self.item_types >= 1, "item_types", ">= 1")?;
        check(self.landmarks >= 3, "landmarks", ">= 3")?;
        check(self.sigma_d >= 0.0 && self.sigma_d.is_finite(), "sigma_d", ">= 0")?;
        check((0.0..=1.0).contains(&self.conflict_rate), "conflict_rate", "in [0, 1]")?;
        check(self.r_dig > 0.0, "r_dig", "> 0")?;
        check(self.distractor_radius >= 0.0, "distractor_radius", ">= 0")?;
        check(self.n_ladder.iter().all(|&n| n >= 1), "n_ladder", "a list of sizes >= 1")?;
        check((0.0..=1.0).contains(&self.precision_target), "precision_target", "in [0, 1]")
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    location: [f64; 2],
    item_type: u32,
    value: f64,
    distractor: bool,
}

/// World layout drawn from dedicated child streams so that drift and
/// conflict settings move independently of each other and of the layout.
struct World {
    landmarks: Vec<Landmark>,
    drifted: Vec<Landmark>,
    events: Vec<Event>,
    /// Index into `events` of each true (non-distractor) event, in query order.
    queries: Vec<usize>,
}

fn unit(rng: &mut StreamRng) -> [f64; 2] {
    [rng.random::<f64>(), rng.random::<f64>()]
}

fn build_world(cfg: &FamilyBConfig, n: usize, streams: &RunStreams, label: &str) -> World {
    let mut layout = streams.child(Substream::Env, &format!("{label}/layout"));
    let mut conflict = streams.child(Substream::Env, &format!("{label}/conflict"));
    let mut drift = streams.child(Substream::Env, &format!("{label}/drift"));
    let mut order = streams.child(Substream::Env, &format!("{label}/query_order"));

    let landmarks: Vec<Landmark> = (0..cfg.landmarks)
        .map(|i| Landmark {
            id: i as u32,
            position: unit(&mut layout),
        })
        .collect();
    let mut events = Vec::with_capacity(n * 2);
    let mut truth_idx = Vec::with_capacity(n);
    for _ in 0..n {
        let location = unit(&mut layout);
        let item_type = 1 + layout.random_range(0..cfg.item_types);
        let value = layout.random::<f64>();
        truth_idx.push(events.len());
        events.push(Event {
            location,
            item_type,
            value,
            distractor: false,
        });
        let u: f64 = conflict.random();
        let r = cfg.distractor_radius * conflict.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * conflict.random::<f64>();
        let dvalue = conflict.random::<f64>();
        if u < cfg.conflict_rate {
            events.push(Event {
                location: [
                    (location[0] + r * theta.cos()).clamp(0.0, 1.0),
                    (location[1] + r * theta.sin()).clamp(0.0, 1.0),
                ],
                item_type,
                value: dvalue,
                distractor: true,
            });
        }
    }
    let drifted = landmarks
        .iter()
        .map(|l| {
            let dx: f64 = drift.sample(StandardNormal);
            let dy: f64 = drift.sample(StandardNormal);
            Landmark {
                id: l.id,
                position: [l.position[0] + cfg.sigma_d * dx, l.position[1] + cfg.sigma_d * dy],
            }
        })
        .collect();
    truth_idx.shuffle(&mut order);
    World {
        landmarks,
        drifted,
        events,
        queries: truth_idx,
    }
}

#[derive(Debug, Clone, Default)]
struct Battery {
    hits: u64,
    confusions: u64,
    probes: Vec<f64>,
    confidence: f64,
}

impl Battery {
    fn precision(&self) -> f64 {
        self.hits as f64 / self.probes.len().max(1) as f64
    }

    fn confusion(&self) -> f64 {
        self.confusions as f64 / self.probes.len().max(1) as f64
    }

    fn mean_probes(&self) -> f64 {
        self.probes.iter().sum::<f64>() / self.probes.len().max(1) as f64
    }
}

/// Outcome of one full write / delay / query battery.
struct BatteryRun {
    battery: Battery,
    trace: Trace,
    signals: Vec<VerifierSignal>,
    accounting: RunAccounting,
    exhausted: bool,
    max_bucket: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_battery(
    cfg: &FamilyBConfig,
    world: &World,
    variant: MemoryVariant,
    verifier: &VerifierSettings,
    ledger: &LedgerConfig,
    noise: &mut StreamRng,
) -> Result<BatteryRun> {
    let policy = ForagerPolicy {
        family: Family::B,
        observer_aware: false,
        conceal_threshold: 1.0,
        conceal_wait: 0,
    };
    let belief_cfg = BeliefConfig {
        family: Family::B,
        observation_dim: 2,
        delay: 0,
        dynamics: Dynamics::Static,
        rls_enabled: false,
        forgetting: 1.0,
    };
    let mut belief = Belief::new(Family::B, vec![], vec![], EmbodiedState::default())?;
    let mut memory = MemoryStore::new(variant);
    let mut trace = Trace::new();
    let total = (world.events.len() + world.queries.len()) as u64 + cfg.delay_steps;
    let final_step = total - 1;
    let mut accounting = RunAccounting::new(ledger.ledger(total)?);
    let pipeline = schedule(
        VerifierPipeline::new(vec![
            VerifierSpec::covering(VerifierKind::Postcondition, PRED_RECORDED, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
            VerifierSpec::covering(VerifierKind::Postcondition, PRED_RECALL, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
            VerifierSpec::covering(VerifierKind::Postcondition, PRED_PROVENANCE, verifier.fp_rate, verifier.fn_rate, verifier.delay)?,
        ])?,
        verifier.placement,
    );
    let recorded_spec = pipeline.spec_for(PRED_RECORDED).expect("registered").clone();
    let recall_spec = pipeline.spec_for(PRED_RECALL).expect("registered").clone();
    let provenance_spec = pipeline.spec_for(PRED_PROVENANCE).expect("registered").clone();
    let mut signals: Vec<VerifierSignal> = Vec::new();
    let mut undelivered: Vec<usize> = Vec::new();
    let mut exhausted = false;
    let write_landmarks = crate::memory::LandmarkSet::new(world.landmarks.clone());

    let deliver = |now: u64, undelivered: &mut Vec<usize>, signals: &[VerifierSignal], memory: &mut MemoryStore| -> Result<()> {
        let mut due = Vec::new();
        undelivered.retain(|&i| match signals[i].emitted_at {
            Some(at) if at <= now => {
                due.push(i);
                false
            }
            _ => true,
        });
        for i in due {
            memory.apply_feedback(&signals[i])?;
        }
        Ok(())
    };

    // Phase 1: one-shot writes.
    let mut ids = BTreeMap::new();
    let mut prev = Action::Idle;
    let mut last_option = OptionChoice::new(OptionKind::Retrieve, &[("item_type", 0.0)]);
    for (i, ev) in world.events.iter().enumerate() {
        let step = trace.next_step();
        let obs = Observation {
            values: ev.location.to_vec(),
            landmarks: world.landmarks.clone(),
            item: Some(ItemObservation {
                item_type: ev.item_type,
                value: ev.value,
            }),
            ..Default::default()
        };
        belief = update_belief(&belief, &obs, &prev, &belief_cfg)?;
        belief.goal = Some(Goal::Cache {
            location: ev.location,
            item_type: ev.item_type,
            value: ev.value,
        });
        let option = ActiveOption::start(select_option(&policy, &belief)?, step);
        form_query(&belief, &option.choice)?;
        let out = act(&policy, &belief, &Retrieval::empty(0), &option)?;
        let id = match memory.write(step, &obs, &out.action, None)? {
            crate::memory::WriteOutcome::Appended(id) => id,
            other => return Err(Error::Invariant(format!("write produced {other:?}"))),
        };
        if !ev.distractor {
            ids.insert(i, id);
        }
        trace.push(TraceRecord {
            step,
            observation: obs,
            action: out.action.clone(),
            option_active: option.choice.clone(),
            observed_by_adversary: false,
        })?;
        let signal = {
            let memory = &memory;
            let landmarks = &write_landmarks;
            let truth = TruthFn(move |_: &str, _: &TraceSegment<'_>| {
                let rec = memory.episode(id).ok_or_else(|| Error::Invariant(format!("episode {id} missing")))?;
                let d = crate::memory::decode_location(rec, landmarks)?.location;
                Ok((d[0] - ev.location[0]).hypot(d[1] - ev.location[1]) <= cfg.r_dig)
            });
            let seg = trace.segment(step, step)?;
            pipeline.run(&recorded_spec, &seg, &truth, Some(SignalTarget::Episode(id)), final_step, noise)?
        };
        undelivered.push(signals.len());
        signals.push(signal);
        deliver(step, &mut undelivered, &signals, &mut memory)?;
        if accounting.accrue(StepCosts::default(), &[])? == Accrual::BudgetExhausted {
            exhausted = true;
        }
        prev = out.action;
        last_option = option.choice;
    }

    // Phase 2: delay, then drift.
    for _ in 0..cfg.delay_steps {
        let step = trace.next_step();
        let here = belief.reconstructed_embodied.position;
        let obs = Observation::new(here.to_vec());
        belief = update_belief(&belief, &obs, &prev, &belief_cfg)?;
        trace.push(TraceRecord {
            step,
            observation: obs,
            action: Action::Idle,
            option_active: last_option.clone(),
            observed_by_adversary: false,
        })?;
        deliver(step, &mut undelivered, &signals, &mut memory)?;
        accounting.accrue(StepCosts::default(), &[])?;
        prev = Action::Idle;
    }

    // Phase 3: one query per true event, issued from its true location.
    let query_start = trace.next_step();
    let mut battery = Battery::default();
    for &i in &world.queries {
        let ev = world.events[i];
        let step = trace.next_step();
        let obs = Observation {
            values: ev.location.to_vec(),
            landmarks: world.drifted.clone(),
            ..Default::default()
        };
        belief = update_belief(&belief, &obs, &prev, &belief_cfg)?;
        belief.goal = Some(Goal::Retrieve { item_type: ev.item_type });
        let option = ActiveOption::start(select_option(&policy, &belief)?, step);
        let query = form_query(&belief, &option.choice)?;
        let retrieved = memory.retrieve(&query, &belief.landmark_estimates)?;
        let out = act(&policy, &belief, &retrieved, &option)?;
        let confused = retrieved.episode.as_ref().is_some_and(|e| Some(&e.id) != ids.get(&i));
        // Recovering a neighbouring distractor is a different item, not a hit.
        let hit = !confused
            && match out.action {
                Action::Dig { location } => (location[0] - ev.location[0]).hypot(location[1] - ev.location[1]) <= cfg.r_dig,
                _ => false,
            };
        battery.hits += u64::from(hit);
        battery.confusions += u64::from(confused);
        battery.probes.push(retrieved.probes_used as f64);
        battery.confidence += retrieved.confidence;
        trace.push(TraceRecord {
            step,
            observation: obs,
            action: out.action.clone(),
            option_active: option.choice.clone(),
            observed_by_adversary: false,
        })?;
        let cited = retrieved.episode.as_ref().map(|e| e.id);
        let truth = TruthFn(|_: &str, _: &TraceSegment<'_>| {
            Ok(cited.is_none_or(|id| {
                memory
                    .episode(id)
                    .is_some_and(|rec| rec.written_at < step && rec.provenance.contains(&rec.written_at))
            }))
        });
        signals.push(pipeline.run(&provenance_spec, &trace.segment(step, step)?, &truth, None, final_step, noise)?);
        deliver(step, &mut undelivered, &signals, &mut memory)?;
        let costs = StepCosts {
            latency: retrieved.probes_used as f64,
            ..Default::default()
        };
        if accounting.accrue(costs, &[("memory", out.compute as f64)])? == Accrual::BudgetExhausted {
            exhausted = true;
        }
        prev = out.action;
    }
    let precision = battery.precision();
    accounting.accrue(
        StepCosts {
            task: 1.0 - precision,
            ..Default::default()
        },
        &[],
    )?;
    let seg = trace.segment(query_start, final_step)?;
    let truth = TruthFn(|_: &str, _: &TraceSegment<'_>| Ok(precision >= cfg.precision_target));
    signals.push(pipeline.run(&recall_spec, &seg, &truth, Some(SignalTarget::Trial(0)), final_step, noise)?);
    if pipeline.placement() == Placement::EndOnly {
        deliver(final_step, &mut undelivered, &signals, &mut memory)?;
    }
    Ok(BatteryRun {
        battery,
        trace,
        signals,
        accounting,
        exhausted,
        max_bucket: memory.max_bucket(),
    })
}

pub fn run_family_b(
    cfg: &FamilyBConfig,
    variant: MemoryVariant,
    verifier: &VerifierSettings,
    ledger: &LedgerConfig,
    seed: u64,
) -> Result<RunOutput> {
    cfg.validate()?;
    verifier.validate()?;
    let streams = RunStreams::new(seed);
    let mut noise = streams.stream(Substream::VerifierNoise);
    let world = build_world(cfg, cfg.n_events, &streams, "main");
    let run = run_battery(cfg, &world, variant, verifier, ledger, &mut noise)?;

    let mut curve = Vec::new();
    for &n in &cfg.n_ladder {
        let world = build_world(cfg, n, &streams, &format!("ladder/{n}"));
        let mut ladder_noise = streams.child(Substream::VerifierNoise, &format!("ladder/{n}"));
        let r = run_battery(cfg, &world, variant, verifier, ledger, &mut ladder_noise)?;
        let mut row = BTreeMap::new();
        row.insert("n".to_string(), n as f64);
        row.insert("precision".to_string(), r.battery.precision());
        row.insert("mean_probes".to_string(), r.battery.mean_probes());
        row.insert("confusion_rate".to_string(), r.battery.confusion());
        curve.push(row);
    }

    let b = &run.battery;
    let mut sorted = b.probes.clone();
    sorted.sort_by(f64::total_cmp);
    let mut metrics = BTreeMap::new();
    metrics.insert("precision".into(), b.precision());
    metrics.insert("confusion_rate".into(), b.confusion());
    metrics.insert("mean_probes".into(), b.mean_probes());
    metrics.insert("median_probes".into(), quantile(&sorted, 0.5));
    metrics.insert("p95_probes".into(), quantile(&sorted, 0.95));
    metrics.insert("mean_confidence".into(), b.confidence / b.probes.len().max(1) as f64);
    metrics.insert("stored_events".into(), world.events.len() as f64);
    metrics.insert("max_bucket".into(), run.max_bucket as f64);
    if run.exhausted {
        metrics.insert("budget_exhausted".into(), 1.0);
    }
    let mut out = finish(seed, run.accounting, run.trace, run.signals, metrics, PRED_RECALL);
    out.record.curve = curve;
    Ok(out)
}
