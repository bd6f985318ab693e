//! Episodic memory: one-shot write events keyed by landmark cues, stored
//! either as a flat archive or behind a type → spatial-cell index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{Action, Observation};
use crate::verifier::{SignalTarget, Verdict, VerifierSignal};

/// Side of the spatial index grid over the unit square.
pub const INDEX_SIDE: usize = 16;
/// Landmarks captured in each cue.
pub const CUE_SIZE: usize = 3;
/// Collinearity tolerance on twice the cue triangle area.
pub const DEGENERATE_AREA: f64 = 1e-6;

const SIMILARITY_SCALE: f64 = 0.05;
const MISSING_LANDMARK_PENALTY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet(Vec<Landmark>);

impl LandmarkSet {
    pub fn new(landmarks: Vec<Landmark>) -> Self {
        Self(landmarks)
    }

    pub fn get(&self, id: u32) -> Option<&Landmark> {
        self.0.iter().find(|l| l.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn translated(&self, offset: [f64; 2]) -> Self {
        Self(
            self.0
                .iter()
                .map(|l| Landmark {
                    id: l.id,
                    position: [l.position[0] + offset[0], l.position[1] + offset[1]],
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueEntry {
    pub landmark: u32,
    pub distance: f64,
    pub bearing: f64,
}

/// Distances and bearings from a point to its three nearest landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CueEntry>", into = "Vec<CueEntry>")]
pub struct CueVector {
    entries: [CueEntry; CUE_SIZE],
}

impl TryFrom<Vec<CueEntry>> for CueVector {
    type Error = Error;

    fn try_from(entries: Vec<CueEntry>) -> Result<Self> {
        let entries: [CueEntry; CUE_SIZE] = entries
            .try_into()
            .map_err(|v: Vec<CueEntry>| Error::Input(format!("cue needs {CUE_SIZE} entries, got {}", v.len())))?;
        let ids = [entries[0].landmark, entries[1].landmark, entries[2].landmark];
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return Err(Error::Input(format!("cue landmarks must be distinct, got {ids:?}")));
        }
        Ok(Self { entries })
    }
}

impl From<CueVector> for Vec<CueEntry> {
    fn from(cue: CueVector) -> Self {
        cue.entries.to_vec()
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

impl CueVector {
    /// Encodes `point` against the three nearest landmarks (ties by id).
    pub fn encode(point: [f64; 2], landmarks: &LandmarkSet) -> Result<Self> {
        if landmarks.len() < CUE_SIZE {
            return Err(Error::Input(format!(
                "cue encoding needs at least {CUE_SIZE} landmarks, got {}",
                landmarks.len()
            )));
        }
        let mut ranked: Vec<(f64, &Landmark)> = landmarks
            .iter()
            .map(|l| ((l.position[0] - point[0]).hypot(l.position[1] - point[1]), l))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
        let entry = |(distance, l): (f64, &Landmark)| CueEntry {
            landmark: l.id,
            distance,
            bearing: (l.position[1] - point[1]).atan2(l.position[0] - point[0]),
        };
        Self::try_from(ranked.into_iter().take(CUE_SIZE).map(entry).collect::<Vec<_>>())
    }

    pub fn entries(&self) -> &[CueEntry; CUE_SIZE] {
        &self.entries
    }

    pub fn landmark_ids(&self) -> [u32; CUE_SIZE] {
        [self.entries[0].landmark, self.entries[1].landmark, self.entries[2].landmark]
    }

    /// Squared mismatch in length units; bearings are weighted by the
    /// stored distance so both terms are arc lengths.
    pub fn mismatch(&self, other: &CueVector) -> f64 {
        self.entries
            .iter()
            .map(|q| match other.entries.iter().find(|s| s.landmark == q.landmark) {
                Some(s) => {
                    let dd = q.distance - s.distance;
                    let arc = s.distance * wrap_angle(q.bearing - s.bearing);
                    dd * dd + arc * arc
                }
                None => MISSING_LANDMARK_PENALTY,
            })
            .sum()
    }

    pub fn similarity(&self, other: &CueVector) -> f64 {
        (-self.mismatch(other) / (2.0 * SIMILARITY_SCALE * SIMILARITY_SCALE)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyStatus {
    Unverified,
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: u64,
    pub written_at: u64,
    pub item_type: u32,
    pub item_value: f64,
    pub location: [f64; 2],
    pub cue: CueVector,
    pub provenance: Vec<u64>,
    pub verify_status: VerifyStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryVariant {
    FlatArchive,
    ClusteredIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupQuery {
    pub item_type: u32,
    pub value_band: Option<(f64, f64)>,
    pub cue: CueVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Query {
    Empty,
    Lookup(LookupQuery),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub episode: Option<EpisodeRecord>,
    pub decoded_location: Option<[f64; 2]>,
    pub probes_used: u64,
    pub confidence: f64,
}

impl Retrieval {
    pub fn empty(probes_used: u64) -> Self {
        Self {
            episode: None,
            decoded_location: None,
            probes_used,
            confidence: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Appended(u64),
    StatusUpdated(u64),
}

pub fn index_cell(location: [f64; 2]) -> usize {
    let side = INDEX_SIDE as f64;
    let clamp = |v: f64| ((v * side).floor().max(0.0) as usize).min(INDEX_SIDE - 1);
    clamp(location[1]) * INDEX_SIDE + clamp(location[0])
}

fn cell_distance(cell: usize, point: [f64; 2]) -> f64 {
    let side = INDEX_SIDE as f64;
    let (row, col) = ((cell / INDEX_SIDE) as f64, (cell % INDEX_SIDE) as f64);
    let gap = |v: f64, lo: f64| (lo / side - v).max(v - (lo + 1.0) / side).max(0.0);
    gap(point[0], col).hypot(gap(point[1], row))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub location: [f64; 2],
    pub degenerate: bool,
}

fn trilaterate(anchors: &[[f64; 2]; CUE_SIZE], ranges: &[f64; CUE_SIZE], bearings: &[f64; CUE_SIZE]) -> Option<[f64; 2]> {
    let [p1, p2, p3] = *anchors;
    let (ax, ay) = (p2[0] - p1[0], p2[1] - p1[1]);
    let (bx, by) = (p3[0] - p1[0], p3[1] - p1[1]);
    let det = ax * by - ay * bx;
    if det.abs() < DEGENERATE_AREA {
        return None;
    }
    let cost = |x: [f64; 2]| -> f64 {
        anchors
            .iter()
            .zip(ranges)
            .map(|(p, r)| ((x[0] - p[0]).hypot(x[1] - p[1]) - r).powi(2))
            .sum()
    };
    // Start from the point the stored bearings imply, which picks the
    // correct side when the range circles admit a mirror solution.
    let mut x = [0.0; 2];
    for ((p, r), b) in anchors.iter().zip(ranges).zip(bearings) {
        x[0] += (p[0] - r * b.cos()) / CUE_SIZE as f64;
        x[1] += (p[1] - r * b.sin()) / CUE_SIZE as f64;
    }
    let mut fx = cost(x);

    // Gauss-Newton on the range residuals, with step halving.
    for _ in 0..50 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (p, r) in anchors.iter().zip(ranges) {
            let (dx, dy) = (x[0] - p[0], x[1] - p[1]);
            let dist = dx.hypot(dy);
            if dist < 1e-15 {
                continue;
            }
            let j = [dx / dist, dy / dist];
            let res = dist - r;
            for a in 0..2 {
                jtr[a] += j[a] * res;
                for b in 0..2 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let d = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
        if d.abs() < 1e-18 {
            break;
        }
        let step = [
            (jtj[1][1] * jtr[0] - jtj[0][1] * jtr[1]) / d,
            (jtj[0][0] * jtr[1] - jtj[1][0] * jtr[0]) / d,
        ];
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let cand = [x[0] - t * step[0], x[1] - t * step[1]];
            let fc = cost(cand);
            if fc <= fx {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || t * step[0].hypot(step[1]) < 1e-15 {
            break;
        }
    }
    Some(x)
}

/// Solves the cue's three range constraints at the landmarks' current
/// positions. Returns `None` when a cue landmark is unknown.
pub fn decode_cue(cue: &CueVector, current: &LandmarkSet) -> Result<Option<[f64; 2]>> {
    let mut anchors = [[0.0; 2]; CUE_SIZE];
    let mut ranges = [0.0; CUE_SIZE];
    let mut bearings = [0.0; CUE_SIZE];
    for (k, e) in cue.entries.iter().enumerate() {
        let l = current
            .get(e.landmark)
            .ok_or_else(|| Error::Input(format!("cue landmark {} missing from current set", e.landmark)))?;
        anchors[k] = l.position;
        ranges[k] = e.distance;
        bearings[k] = e.bearing;
    }
    Ok(trilaterate(&anchors, &ranges, &bearings))
}

/// Re-decodes a stored location against current landmark positions, falling
/// back to the stored absolute location on degenerate geometry.
pub fn decode_location(record: &EpisodeRecord, current: &LandmarkSet) -> Result<Decoded> {
    Ok(match decode_cue(&record.cue, current)? {
        Some(location) => Decoded { location, degenerate: false },
        None => Decoded {
            location: record.location,
            degenerate: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    variant: MemoryVariant,
    episodes: Vec<EpisodeRecord>,
    /// item_type → cell → episode ids, only for the clustered variant.
    index: BTreeMap<u32, BTreeMap<usize, Vec<u64>>>,
    positions: BTreeMap<u64, usize>,
    probe_counter: u64,
    next_id: u64,
}

impl MemoryStore {
    pub fn new(variant: MemoryVariant) -> Self {
        Self {
            variant,
            episodes: Vec::new(),
            index: BTreeMap::new(),
            positions: BTreeMap::new(),
            probe_counter: 0,
            next_id: 0,
        }
    }

    pub fn variant(&self) -> MemoryVariant {
        self.variant
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn probe_counter(&self) -> u64 {
        self.probe_counter
    }

    pub fn episode(&self, id: u64) -> Option<&EpisodeRecord> {
        self.positions.get(&id).map(|&p| &self.episodes[p])
    }

    /// The index as (item_type, cell) → ids; empty for the flat archive.
    pub fn index_partition(&self) -> BTreeMap<(u32, usize), Vec<u64>> {
        self.index
            .iter()
            .flat_map(|(t, cells)| cells.iter().map(move |(c, ids)| ((*t, *c), ids.clone())))
            .collect()
    }

    pub fn max_bucket(&self) -> usize {
        self.index
            .values()
            .flat_map(|cells| cells.values().map(Vec::len))
            .max()
            .unwrap_or(0)
    }

    /// Appends a fully formed record. Duplicate ids are an invariant breach.
    pub fn insert(&mut self, record: EpisodeRecord) -> Result<u64> {
        if self.positions.contains_key(&record.id) {
            return Err(Error::Invariant(format!("duplicate episode id {}", record.id)));
        }
        let id = record.id;
        if self.variant == MemoryVariant::ClusteredIndex {
            self.index
                .entry(record.item_type)
                .or_default()
                .entry(index_cell(record.location))
                .or_default()
                .push(id);
        }
        self.positions.insert(id, self.episodes.len());
        self.next_id = self.next_id.max(id + 1);
        self.episodes.push(record);
        Ok(id)
    }

    /// Applies a delayed verdict to the episode it targets.
    pub fn apply_feedback(&mut self, signal: &VerifierSignal) -> Result<Option<u64>> {
        let Some(SignalTarget::Episode(id)) = signal.target else {
            return Ok(None);
        };
        let Some(verdict) = signal.verdict else {
            return Ok(None);
        };
        let Some(&pos) = self.positions.get(&id) else {
            return Ok(None);
        };
        let record = &mut self.episodes[pos];
        let next = match verdict {
            Verdict::Pass => VerifyStatus::Passed,
            Verdict::Fail => VerifyStatus::Failed,
        };
        match record.verify_status {
            VerifyStatus::Unverified => record.verify_status = next,
            current if current == next => {}
            current => {
                return Err(Error::Invariant(format!(
                    "episode {id} already {current:?}, cannot become {next:?}"
                )))
            }
        }
        Ok(Some(id))
    }

    /// Write operator: records a completed cache dig, or, when the verifier
    /// feedback targets a stored episode, updates only its status.
    pub fn write(
        &mut self,
        step: u64,
        observation: &Observation,
        action: &Action,
        verifier_feedback: Option<&VerifierSignal>,
    ) -> Result<WriteOutcome> {
        if let Some(signal) = verifier_feedback {
            if let Some(id) = self.apply_feedback(signal)? {
                return Ok(WriteOutcome::StatusUpdated(id));
            }
        }
        let Action::Dig { location } = action else {
            return Err(Error::Input(format!("memory writes need a dig action, got {action:?}")));
        };
        let item = observation
            .item
            .ok_or_else(|| Error::Input("cache observation carries no item".into()))?;
        if !(0.0..=1.0).contains(&location[0]) || !(0.0..=1.0).contains(&location[1]) {
            return Err(Error::Input(format!("cache location {location:?} outside the unit square")));
        }
        if !(item.value >= 0.0 && item.value.is_finite()) {
            return Err(Error::Input(format!("item value must be finite and >= 0, got {}", item.value)));
        }
        let landmarks = LandmarkSet::new(observation.landmarks.clone());
        let record = EpisodeRecord {
            id: self.next_id,
            written_at: step,
            item_type: item.item_type,
            item_value: item.value,
            location: *location,
            cue: CueVector::encode(*location, &landmarks)?,
            provenance: vec![step],
            verify_status: VerifyStatus::Unverified,
        };
        self.insert(record).map(WriteOutcome::Appended)
    }

    /// Retrieval operator. Episodes whose write failed verification are
    /// skipped. Probes are cue comparisons; `probes_used` equals
    /// the increase of the store's probe counter.
    pub fn retrieve(&mut self, query: &Query, current: &LandmarkSet) -> Result<Retrieval> {
        let Query::Lookup(q) = query else {
            return Err(Error::Input("retrieve needs a non-empty query".into()));
        };
        let in_band = |e: &EpisodeRecord| {
            e.verify_status != VerifyStatus::Failed
                && q.value_band.is_none_or(|(lo, hi)| e.item_value >= lo && e.item_value <= hi)
        };
        let mut probes = 0u64;
        let mut best: Option<(f64, usize)> = None;
        let mut second = 0.0f64;
        let mut consider = |pos: usize, probes: &mut u64, episodes: &[EpisodeRecord]| {
            *probes += 1;
            let s = q.cue.similarity(&episodes[pos].cue);
            match best {
                Some((b, _)) if s <= b => second = second.max(s),
                Some((b, _)) => {
                    second = b;
                    best = Some((s, pos));
                }
                None => best = Some((s, pos)),
            }
        };
        match self.variant {
            MemoryVariant::FlatArchive => {
                for (pos, e) in self.episodes.iter().enumerate() {
                    if e.item_type == q.item_type && in_band(e) {
                        consider(pos, &mut probes, &self.episodes);
                    }
                }
            }
            MemoryVariant::ClusteredIndex => {
                if let Some(cells) = self.index.get(&q.item_type) {
                    let predicted = match decode_cue(&q.cue, current)? {
                        Some(p) => p,
                        None => {
                            let ids = q.cue.landmark_ids();
                            let mut c = [0.0; 2];
                            for id in ids {
                                let p = current.get(id).map(|l| l.position).unwrap_or([0.5, 0.5]);
                                c = [c[0] + p[0] / 3.0, c[1] + p[1] / 3.0];
                            }
                            c
                        }
                    };
                    let mut ranked: Vec<(f64, usize)> =
                        cells.keys().map(|&c| (cell_distance(c, predicted), c)).collect();
                    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    for (_, cell) in ranked {
                        let mut members: Vec<usize> = cells[&cell]
                            .iter()
                            .map(|id| self.positions[id])
                            .filter(|&pos| in_band(&self.episodes[pos]))
                            .collect();
                        if members.is_empty() {
                            continue;
                        }
                        members.sort_unstable();
                        for pos in members {
                            consider(pos, &mut probes, &self.episodes);
                        }
                        break;
                    }
                }
            }
        }
        self.probe_counter += probes;
        let Some((score, pos)) = best else {
            return Ok(Retrieval::empty(probes));
        };
        let record = self.episodes[pos].clone();
        let decoded = decode_location(&record, current)?;
        let confidence = if decoded.degenerate {
            0.5
        } else if score > 0.0 {
            ((score - second) / score).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Ok(Retrieval {
            episode: Some(record),
            decoded_location: Some(decoded.location),
            probes_used: probes,
            confidence,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.episodes)?)
    }

    pub fn from_json(variant: MemoryVariant, json: &str) -> Result<Self> {
        let records: Vec<EpisodeRecord> = serde_json::from_str(json)?;
        let mut store = Self::new(variant);
        for r in records {
            store.insert(r)?;
        }
        Ok(store)
    }
}
