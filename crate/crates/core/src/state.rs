//! State decomposition, belief, options, actions and traces shared by every
//! environment and agent, plus the generic control-loop operators.
//!
//! Ground truth (`AgentState::embodied`, `LatentParams`) and the agent-side
//! view (`Belief`) are separate types. Policies only ever receive a `Belief`,
//! a `Retrieval` and an `OptionChoice`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::controller::{self, RlsState};
use crate::error::{Error, Result};
use crate::memory::{CueVector, LandmarkSet, LookupQuery, Query, Retrieval};
use crate::observer::ObserverBelief;

/// Options run until their own termination or this many steps.
pub const OPTION_MAX_STEPS: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
    C,
    D,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::A => "A",
            Family::B => "B",
            Family::C => "C",
            Family::D => "D",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbodiedState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl EmbodiedState {
    pub fn at(position: [f64; 2]) -> Self {
        Self {
            position,
            velocity: [0.0; 2],
        }
    }
}

/// Hidden environment parameters with their declared closed ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    values: Vec<f64>,
    ranges: Vec<(f64, f64)>,
}

impl LatentParams {
    pub fn new(values: Vec<f64>, ranges: Vec<(f64, f64)>) -> Result<Self> {
        if values.len() != ranges.len() {
            return Err(Error::Schema("latent values and ranges differ in length".into()));
        }
        for (i, (v, (lo, hi))) in values.iter().zip(&ranges).enumerate() {
            if !(lo <= v && v <= hi) {
                return Err(Error::Input(format!("latent[{i}] = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(Self { values, ranges })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub remaining_steps: u64,
    pub resources: Vec<f64>,
    pub permissions: BTreeSet<String>,
}

impl TaskState {
    pub fn new(horizon: u64) -> Self {
        Self {
            remaining_steps: horizon,
            ..Default::default()
        }
    }

    pub fn tick(&mut self) {
        self.remaining_steps = self.remaining_steps.saturating_sub(1);
    }
}

/// Full state of one agent in one environment. Environments own this;
/// agents only see the `Belief` derived from observations.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub embodied: EmbodiedState,
    pub latent: LatentParams,
    pub memory_ref: u64,
    pub observer_estimate: Option<ObserverBelief>,
    pub task: TaskState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentEvidence {
    pub latent: usize,
    pub regressor: f64,
    pub response: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemObservation {
    pub item_type: u32,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<LatentEvidence>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub landmarks: Vec<crate::memory::Landmark>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemObservation>,
}

impl Observation {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Idle,
    Launch { offset: f64, impulse: f64 },
    Force { value: f64 },
    Move { location: [f64; 2] },
    Dig { location: [f64; 2] },
    Decoy { location: [f64; 2] },
    Wait,
    Propose { plan: Vec<u8> },
    Execute { veto: bool },
    Check { reject: bool },
    Release { plan: Vec<u8> },
    Probe { constraint: u32 },
}

impl Action {
    /// Actuation applied to the embodied dynamics, if this action is a
    /// dynamics step.
    pub fn force(&self) -> Option<f64> {
        match self {
            Action::Force { value } => Some(*value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionKind {
    Launch,
    Stabilize,
    Cache,
    Retrieve,
    Conceal,
    Propose,
    Execute,
    Check,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionChoice {
    pub kind: OptionKind,
    pub params: BTreeMap<String, f64>,
}

impl OptionChoice {
    pub fn new(kind: OptionKind, params: &[(&str, f64)]) -> Self {
        Self {
            kind,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .copied()
            .ok_or_else(|| Error::Schema(format!("{:?} option lacks parameter `{key}`", self.kind)))
    }
}

/// Declared option kinds and their parameter keys, per family.
pub fn option_schema(family: Family) -> &'static [(OptionKind, &'static [&'static str])] {
    match family {
        Family::A => &[(OptionKind::Launch, &["impulse", "offset"]), (OptionKind::Stabilize, &[])],
        Family::B => &[
            (OptionKind::Cache, &["item_type", "value", "x", "y"]),
            (OptionKind::Retrieve, &["item_type"]),
        ],
        Family::C => &[
            (OptionKind::Cache, &["x", "y"]),
            (OptionKind::Conceal, &["wait"]),
            (OptionKind::Retrieve, &["item_type"]),
            (OptionKind::Probe, &["x", "y"]),
        ],
        Family::D => &[
            (OptionKind::Propose, &[]),
            (OptionKind::Execute, &[]),
            (OptionKind::Check, &[]),
            (OptionKind::Probe, &["count"]),
        ],
    }
}

pub fn validate_option(family: Family, option: &OptionChoice) -> Result<()> {
    let Some((_, keys)) = option_schema(family).iter().find(|(k, _)| *k == option.kind) else {
        return Err(Error::Schema(format!("{:?} is not an option of family {family}", option.kind)));
    };
    let got: Vec<&str> = option.params.keys().map(String::as_str).collect();
    if got != *keys {
        return Err(Error::Schema(format!(
            "{:?} in family {family} takes params {keys:?}, got {got:?}",
            option.kind
        )));
    }
    if let Some((k, v)) = option.params.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Input(format!("option param `{k}` is not finite: {v}")));
    }
    Ok(())
}

/// An option in progress. Expires after `OPTION_MAX_STEPS`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveOption {
    pub choice: OptionChoice,
    pub started_at: u64,
    pub elapsed: u64,
    pub terminated: bool,
}

impl ActiveOption {
    pub fn start(choice: OptionChoice, step: u64) -> Self {
        Self {
            choice,
            started_at: step,
            elapsed: 0,
            terminated: false,
        }
    }

    pub fn is_live(&self) -> bool {
        !self.terminated && self.elapsed < OPTION_MAX_STEPS
    }

    pub fn advance(&mut self) {
        self.elapsed += 1;
    }
}

/// The agent's model of how its embodied state evolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    /// Position is whatever was last observed.
    Static,
    /// `e' = e + ė·dt`, `ė' = ė + g(z)·a·dt` with `g(z) = 1 − gain_slope·z`.
    CompliantDoubleIntegrator { dt: f64, gain_slope: f64 },
}

impl Dynamics {
    pub fn actuation_gain(&self, z: f64) -> f64 {
        match self {
            Dynamics::Static => 1.0,
            Dynamics::CompliantDoubleIntegrator { gain_slope, .. } => 1.0 - gain_slope * z,
        }
    }

    pub fn step(&self, state: EmbodiedState, force: f64, z: f64) -> EmbodiedState {
        match *self {
            Dynamics::Static => state,
            Dynamics::CompliantDoubleIntegrator { dt, .. } => {
                let mut next = state;
                next.position[0] = state.position[0] + state.velocity[0] * dt;
                next.velocity[0] = state.velocity[0] + self.actuation_gain(z) * force * dt;
                next
            }
        }
    }

    pub fn embodied_from(&self, values: &[f64]) -> EmbodiedState {
        match self {
            Dynamics::Static => EmbodiedState::at([values[0], values[1]]),
            Dynamics::CompliantDoubleIntegrator { .. } => EmbodiedState {
                position: [values[0], 0.0],
                velocity: [values[1], 0.0],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefConfig {
    pub family: Family,
    pub observation_dim: usize,
    pub delay: usize,
    pub dynamics: Dynamics,
    pub rls_enabled: bool,
    pub forgetting: f64,
}

/// What the agent is currently trying to do; set by the environment's task
/// interface, never derived from hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Goal {
    Launch { gap: f64, impulse: f64 },
    Stabilize,
    Cache { location: [f64; 2], item_type: u32, value: f64 },
    Retrieve { item_type: u32 },
    Decoy { location: [f64; 2] },
    Role(OptionKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub family: Family,
    pub latent_mean: Vec<f64>,
    pub latent_variance: Vec<f64>,
    pub delayed_obs_buffer: VecDeque<Observation>,
    pub reconstructed_embodied: EmbodiedState,
    /// Latest observation to have left the delay buffer (or the prior).
    pub delayed_embodied: EmbodiedState,
    /// Forces issued since `delayed_embodied` was measured.
    pub action_log: VecDeque<f64>,
    pub landmark_estimates: LandmarkSet,
    pub observer_estimate: Option<ObserverBelief>,
    pub task: TaskState,
    pub goal: Option<Goal>,
    pub updates: u64,
    pub latent_samples: Vec<u64>,
}

impl Belief {
    pub fn new(family: Family, latent_mean: Vec<f64>, latent_variance: Vec<f64>, prior_state: EmbodiedState) -> Result<Self> {
        if latent_mean.len() != latent_variance.len() {
            return Err(Error::Schema("latent mean and variance differ in length".into()));
        }
        if latent_variance.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("latent variance must be finite and >= 0".into()));
        }
        let n = latent_mean.len();
        Ok(Self {
            family,
            latent_mean,
            latent_variance,
            delayed_obs_buffer: VecDeque::new(),
            reconstructed_embodied: prior_state,
            delayed_embodied: prior_state,
            action_log: VecDeque::new(),
            landmark_estimates: LandmarkSet::default(),
            observer_estimate: None,
            task: TaskState::default(),
            goal: None,
            updates: 0,
            latent_samples: vec![0; n],
        })
    }

    pub fn latent_estimate(&self, index: usize) -> f64 {
        self.latent_mean.get(index).copied().unwrap_or(0.0)
    }

    /// Restarts the delay pipeline from a new prior state, keeping latent
    /// estimates (cross-trial adaptation).
    pub fn reset_embodied(&mut self, prior_state: EmbodiedState) {
        self.delayed_obs_buffer.clear();
        self.action_log.clear();
        self.delayed_embodied = prior_state;
        self.reconstructed_embodied = prior_state;
        self.updates = 0;
    }
}

/// Belief update: advances the delay buffer by one observation, reconstructs
/// the present embodied state by forward simulation through logged actions,
/// and folds informative evidence into the latent estimate.
pub fn update_belief(belief: &Belief, observation: &Observation, action: &Action, config: &BeliefConfig) -> Result<Belief> {
    if observation.values.len() != config.observation_dim {
        return Err(Error::Schema(format!(
            "observation has {} values, schema declares {}",
            observation.values.len(),
            config.observation_dim
        )));
    }
    if observation.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("observation contains non-finite values".into()));
    }
    let mut next = belief.clone();
    if !observation.landmarks.is_empty() {
        next.landmark_estimates = LandmarkSet::new(observation.landmarks.clone());
    }
    next.delayed_obs_buffer.push_back(observation.clone());
    if let Some(f) = action.force() {
        next.action_log.push_back(f);
    }
    if next.delayed_obs_buffer.len() > config.delay {
        let usable = next.delayed_obs_buffer.pop_front().expect("buffer is non-empty");
        next.delayed_embodied = config.dynamics.embodied_from(&usable.values);
        while next.action_log.len() > config.delay {
            next.action_log.pop_front();
        }
        if let (Some(ev), true) = (usable.evidence, config.rls_enabled) {
            if ev.latent >= next.latent_mean.len() {
                return Err(Error::Schema(format!("evidence for latent {} out of range", ev.latent)));
            }
            let rls = RlsState {
                estimate: next.latent_mean[ev.latent],
                variance: next.latent_variance[ev.latent],
                forgetting: config.forgetting,
                samples: next.latent_samples[ev.latent],
            };
            let updated = controller::rls_update(&rls, ev.regressor, ev.response);
            next.latent_mean[ev.latent] = updated.estimate;
            next.latent_variance[ev.latent] = updated.variance;
            next.latent_samples[ev.latent] = updated.samples;
        }
    }
    let z = next.latent_estimate(0);
    next.reconstructed_embodied = next
        .action_log
        .iter()
        .fold(next.delayed_embodied, |s, &f| config.dynamics.step(s, f, z));
    next.updates += 1;
    Ok(next)
}

/// High-level policy Π: picks the next option from the belief alone.
pub trait OptionPolicy {
    fn family(&self) -> Family;
    fn choose(&self, belief: &Belief) -> OptionChoice;
}

pub fn select_option(policy: &dyn OptionPolicy, belief: &Belief) -> Result<OptionChoice> {
    if policy.family() != belief.family {
        return Err(Error::Config(format!(
            "policy for family {} cannot act in family {}",
            policy.family(),
            belief.family
        )));
    }
    let choice = policy.choose(belief);
    validate_option(belief.family, &choice)?;
    Ok(choice)
}

/// Query operator: memory-relevant options become lookups keyed by a cue;
/// everything else yields `Query::Empty`.
pub fn form_query(belief: &Belief, option: &OptionChoice) -> Result<Query> {
    match option.kind {
        OptionKind::Retrieve => Ok(Query::Lookup(LookupQuery {
            item_type: option.param("item_type")? as u32,
            value_band: None,
            cue: CueVector::encode(belief.reconstructed_embodied.position, &belief.landmark_estimates)?,
        })),
        OptionKind::Cache => {
            let location = [option.param("x")?, option.param("y")?];
            let item_type = option.params.get("item_type").map_or(1, |t| *t as u32);
            let value_band = option.params.get("value").map(|v| (*v, *v));
            Ok(Query::Lookup(LookupQuery {
                item_type,
                value_band,
                cue: CueVector::encode(location, &belief.landmark_estimates)?,
            }))
        }
        _ => Ok(Query::Empty),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutcome {
    pub action: Action,
    /// Compute units spent choosing the action (κ).
    pub compute: u64,
    pub clamped: bool,
    /// Set when a compensator had to fall back to the raw delayed state.
    pub fallback: bool,
}

impl ActOutcome {
    pub fn plain(action: Action) -> Self {
        Self {
            action,
            compute: 0,
            clamped: false,
            fallback: false,
        }
    }
}

/// Primitive policy π.
pub trait PrimitivePolicy {
    fn act(&self, belief: &Belief, retrieved: &Retrieval, option: &OptionChoice) -> Result<ActOutcome>;
}

pub fn act(policy: &dyn PrimitivePolicy, belief: &Belief, retrieved: &Retrieval, option: &ActiveOption) -> Result<ActOutcome> {
    if !option.is_live() {
        return Err(Error::Invariant(format!(
            "{:?} option started at step {} is no longer active",
            option.choice.kind, option.started_at
        )));
    }
    policy.act(belief, retrieved, &option.choice)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub observation: Observation,
    pub action: Action,
    pub option_active: OptionChoice,
    pub observed_by_adversary: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_step(&self) -> u64 {
        self.records.len() as u64
    }

    /// Appends a record; steps must run 0, 1, 2, … without gaps.
    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if record.step != self.next_step() {
            return Err(Error::Invariant(format!(
                "trace step {} out of order, expected {}",
                record.step,
                self.next_step()
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn segment(&self, start: u64, end: u64) -> Result<TraceSegment<'_>> {
        if start > end || end >= self.next_step() {
            return Err(Error::Input(format!(
                "segment [{start}, {end}] not inside trace of length {}",
                self.len()
            )));
        }
        Ok(TraceSegment {
            start,
            end,
            records: &self.records[start as usize..=end as usize],
        })
    }

    /// One JSON object per line, fields in declaration order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut trace = Trace::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            trace.push(serde_json::from_str(line)?)?;
        }
        Ok(trace)
    }
}

/// A closed step range `[start, end]` of a trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceSegment<'a> {
    start: u64,
    end: u64,
    records: &'a [TraceRecord],
}

impl<'a> TraceSegment<'a> {
    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn records(&self) -> &'a [TraceRecord] {
        self.records
    }
}
