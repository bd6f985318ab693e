//! Adversary inference over cache locations on a 20×20 grid, and the
//! agent-side copy of that inference.
//!
//! Evidence enters multiplicatively: each sighting multiplies the current mass
//! by a likelihood that mixes a box kernel around the sighted cell with a
//! uniform floor, then renormalizes. Two sightings at different places from a
//! uniform start therefore yield two modes of equal height.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_SIDE: usize = 20;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn from_index(index: usize) -> Self {
        Self::new(index / GRID_SIDE, index % GRID_SIDE)
    }

    pub fn index(self) -> usize {
        self.row * GRID_SIDE + self.col
    }

    pub fn in_grid(self) -> bool {
        self.row < GRID_SIDE && self.col < GRID_SIDE
    }

    /// Center of the cell in unit-square coordinates (x = column, y = row).
    pub fn center(self) -> [f64; 2] {
        let side = GRID_SIDE as f64;
        [(self.col as f64 + 0.5) / side, (self.row as f64 + 0.5) / side]
    }

    pub fn containing(point: [f64; 2]) -> Self {
        let side = GRID_SIDE as f64;
        let clamp = |v: f64| ((v * side).floor().max(0.0) as usize).min(GRID_SIDE - 1);
        Self::new(clamp(point[1]), clamp(point[0]))
    }

    /// Chebyshev distance.
    pub fn chebyshev(self, other: Cell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    fn neighborhood(self, radius: usize) -> impl Iterator<Item = Cell> {
        let r0 = self.row.saturating_sub(radius);
        let r1 = (self.row + radius).min(GRID_SIDE - 1);
        let c0 = self.col.saturating_sub(radius);
        let c1 = (self.col + radius).min(GRID_SIDE - 1);
        (r0..=r1).flat_map(move |r| (c0..=c1).map(move |c| Cell::new(r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObservedEvent {
    SawCache(Cell),
    SawPresence(Cell),
    SawNothing,
}

/// Kernel shapes and weights; together with `diffusion_rate` and the
/// visibility probability this is the adversary's sophistication dial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverParams {
    pub cache_radius: usize,
    pub cache_weight: f64,
    pub presence_radius: usize,
    pub presence_weight: f64,
}

impl Default for ObserverParams {
    fn default() -> Self {
        Self {
            cache_radius: 1,
            cache_weight: 0.9,
            presence_radius: 2,
            presence_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverBelief {
    grid: Vec<f64>,
    observations_seen: u64,
    diffusion_rate: f64,
    params: ObserverParams,
}

impl ObserverBelief {
    pub fn uniform(diffusion_rate: f64, params: ObserverParams) -> Result<Self> {
        Self::check_params(diffusion_rate, &params)?;
        Ok(Self {
            grid: vec![1.0 / GRID_CELLS as f64; GRID_CELLS],
            observations_seen: 0,
            diffusion_rate,
            params,
        })
    }

    /// No mass anywhere; the first sighting defines the distribution.
    pub fn empty(diffusion_rate: f64, params: ObserverParams) -> Result<Self> {
        Self::check_params(diffusion_rate, &params)?;
        Ok(Self {
            grid: vec![0.0; GRID_CELLS],
            observations_seen: 0,
            diffusion_rate,
            params,
        })
    }

    /// Build from an explicit row-major grid, which is normalized.
    pub fn from_grid(grid: Vec<f64>, diffusion_rate: f64, params: ObserverParams) -> Result<Self> {
        Self::check_params(diffusion_rate, &params)?;
        if grid.len() != GRID_CELLS {
            return Err(Error::Input(format!(
                "observer grid must have {GRID_CELLS} cells, got {}",
                grid.len()
            )));
        }
        if grid.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Input("observer mass must be finite and non-negative".into()));
        }
        let mut belief = Self {
            grid,
            observations_seen: 0,
            diffusion_rate,
            params,
        };
        belief.normalize();
        Ok(belief)
    }

    fn check_params(diffusion_rate: f64, params: &ObserverParams) -> Result<()> {
        if !(0.0..=1.0).contains(&diffusion_rate) {
            return Err(Error::Config(format!("diffusion_rate must lie in [0,1], got {diffusion_rate}")));
        }
        for (name, w) in [("cache_weight", params.cache_weight), ("presence_weight", params.presence_weight)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {w}")));
            }
        }
        Ok(())
    }

    pub fn mass(&self, cell: Cell) -> f64 {
        self.grid[cell.index()]
    }

    /// Row-major dump.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }

    pub fn observations_seen(&self) -> u64 {
        self.observations_seen
    }

    pub fn diffusion_rate(&self) -> f64 {
        self.diffusion_rate
    }

    pub fn params(&self) -> &ObserverParams {
        &self.params
    }

    pub fn argmax(&self) -> Cell {
        let mut best = 0;
        for (i, m) in self.grid.iter().enumerate() {
            if *m > self.grid[best] {
                best = i;
            }
        }
        Cell::from_index(best)
    }

    fn normalize(&mut self) {
        let total = self.total();
        if total > 0.0 {
            for m in &mut self.grid {
                *m /= total;
            }
        }
    }

    fn sighting(&mut self, cell: Cell, radius: usize, weight: f64) {
        let kernel_cells: Vec<Cell> = cell.neighborhood(radius).collect();
        let kernel_mass = weight / kernel_cells.len() as f64;
        let floor = (1.0 - weight) / GRID_CELLS as f64;
        let mut likelihood = vec![floor; GRID_CELLS];
        for c in kernel_cells {
            likelihood[c.index()] += kernel_mass;
        }
        if self.total() > 0.0 {
            for (m, l) in self.grid.iter_mut().zip(&likelihood) {
                *m *= l;
            }
        } else {
            self.grid = likelihood;
        }
        self.normalize();
        self.observations_seen += 1;
    }

    /// Removes all mass inside the square patch around `cell` and
    /// renormalizes what is left (the adversary searched there).
    pub fn clear_patch(&mut self, cell: Cell, radius: usize) {
        for c in cell.neighborhood(radius) {
            self.grid[c.index()] = 0.0;
        }
        self.normalize();
    }

    /// Box-summed copy, used to locate kernel centers rather than edges.
    pub fn smoothed(&self, radius: usize) -> ObserverBelief {
        let grid = (0..GRID_CELLS)
            .map(|i| Cell::from_index(i).neighborhood(radius).map(|c| self.grid[c.index()]).sum())
            .collect();
        let mut out = self.clone();
        out.grid = grid;
        out.normalize();
        out
    }
}

/// Applies one observed event and returns the updated belief.
pub fn observer_update(belief: &ObserverBelief, event: ObservedEvent) -> Result<ObserverBelief> {
    let mut next = belief.clone();
    match event {
        ObservedEvent::SawCache(cell) | ObservedEvent::SawPresence(cell) if !cell.in_grid() => {
            return Err(Error::Input(format!(
                "cell ({}, {}) outside the {GRID_SIDE}x{GRID_SIDE} grid",
                cell.row, cell.col
            )));
        }
        ObservedEvent::SawCache(cell) => {
            next.sighting(cell, belief.params.cache_radius, belief.params.cache_weight);
        }
        ObservedEvent::SawPresence(cell) => {
            next.sighting(cell, belief.params.presence_radius, belief.params.presence_weight);
        }
        ObservedEvent::SawNothing => {
            let rate = belief.diffusion_rate;
            if rate > 0.0 && next.total() > 0.0 {
                let uniform = 1.0 / GRID_CELLS as f64;
                for m in &mut next.grid {
                    *m = (1.0 - rate) * *m + rate * uniform;
                }
                next.normalize();
            }
        }
    }
    Ok(next)
}

/// Observer mass sitting on the true cache cells, clipped to [0, 1].
pub fn leakage_score(belief: &ObserverBelief, true_caches: &[Cell]) -> Result<f64> {
    if true_caches.is_empty() {
        return Err(Error::Input("leakage is undefined for an empty cache list".into()));
    }
    let mut cells: Vec<Cell> = true_caches.to_vec();
    cells.sort();
    cells.dedup();
    let mut total = 0.0;
    for c in cells {
        if !c.in_grid() {
            return Err(Error::Input(format!("cache cell ({}, {}) outside grid", c.row, c.col)));
        }
        total += belief.mass(c);
    }
    Ok(total.clamp(0.0, 1.0))
}

/// The `m` highest-mass cells, ties broken in row-major order.
pub fn pilfer_select(belief: &ObserverBelief, m: usize) -> Result<Vec<Cell>> {
    if m == 0 || m > GRID_CELLS {
        return Err(Error::Input(format!("pilfer budget must lie in [1, {GRID_CELLS}], got {m}")));
    }
    let mut order: Vec<usize> = (0..GRID_CELLS).collect();
    order.sort_by(|&a, &b| belief.grid[b].total_cmp(&belief.grid[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(m).map(Cell::from_index).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform() -> ObserverBelief {
        ObserverBelief::uniform(0.1, ObserverParams::default()).unwrap()
    }

    #[test]
    fn sighting_moves_argmax() {
        let b = observer_update(&uniform(), ObservedEvent::SawCache(Cell::new(5, 5))).unwrap();
        let top = pilfer_select(&b, 1).unwrap()[0];
        // the kernel is flat, so every kernel cell ties; argmax by strict > keeps the first
        assert!(top.chebyshev(Cell::new(5, 5)) <= 1);
        assert!(b.mass(Cell::new(5, 5)) > b.mass(Cell::new(0, 0)));
        assert_eq!(b.mass(Cell::new(5, 5)), b.mass(top));
    }

    #[test]
    fn zero_diffusion_is_identity() {
        let b = observer_update(&uniform(), ObservedEvent::SawCache(Cell::new(3, 7))).unwrap();
        let still = ObserverBelief { diffusion_rate: 0.0, ..b.clone() };
        let after = observer_update(&still, ObservedEvent::SawNothing).unwrap();
        assert_eq!(after.grid(), still.grid());
    }

    #[test]
    fn two_sightings_give_equal_modes() {
        let b = observer_update(&uniform(), ObservedEvent::SawCache(Cell::new(2, 2))).unwrap();
        let b = observer_update(&b, ObservedEvent::SawCache(Cell::new(17, 17))).unwrap();
        // oracle: unnormalized mass at each mode is (1/400)·L_hit·L_miss
        let hit = 0.9 / 9.0 + 0.1 / 400.0;
        let miss = 0.1 / 400.0;
        let ratio = b.mass(Cell::new(2, 2)) / b.mass(Cell::new(0, 10));
        assert!((ratio - hit / miss).abs() / (hit / miss) < 1e-9);
        assert!((b.mass(Cell::new(2, 2)) - b.mass(Cell::new(17, 17))).abs() < 1e-9);
    }

    #[test]
    fn leakage_fixtures() {
        let caches = [Cell::new(0, 0), Cell::new(4, 4), Cell::new(9, 9), Cell::new(19, 19)];
        let u = uniform();
        assert!((leakage_score(&u, &caches).unwrap() - 0.01).abs() < 1e-15);

        let mut grid = vec![0.0; GRID_CELLS];
        grid[Cell::new(6, 6).index()] = 1.0;
        let point = ObserverBelief::from_grid(grid, 0.0, ObserverParams::default()).unwrap();
        assert_eq!(leakage_score(&point, &[Cell::new(6, 6)]).unwrap(), 1.0);

        let seen = observer_update(&u, ObservedEvent::SawCache(Cell::new(8, 8))).unwrap();
        let expected = 0.1 * (1.0 / 400.0) + 0.9 * (1.0 / 9.0);
        assert!((leakage_score(&seen, &[Cell::new(8, 8)]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.10025).abs() < 1e-15);

        assert!(leakage_score(&u, &[]).is_err());
    }

    #[test]
    fn pilfer_selection_rules() {
        let mut grid = vec![0.0; GRID_CELLS];
        grid[Cell::new(5, 5).index()] = 1.0;
        let point = ObserverBelief::from_grid(grid, 0.0, ObserverParams::default()).unwrap();
        assert_eq!(pilfer_select(&point, 1).unwrap(), vec![Cell::new(5, 5)]);

        assert_eq!(
            pilfer_select(&uniform(), 3).unwrap(),
            vec![Cell::new(0, 0), Cell::new(0, 1), Cell::new(0, 2)]
        );

        let seen = observer_update(&uniform(), ObservedEvent::SawCache(Cell::new(10, 4))).unwrap();
        let mut got = pilfer_select(&seen, 9).unwrap();
        got.sort();
        let mut kernel: Vec<Cell> = Cell::new(10, 4).neighborhood(1).collect();
        kernel.sort();
        assert_eq!(got, kernel);

        assert!(pilfer_select(&uniform(), 0).is_err());
        assert!(pilfer_select(&uniform(), 401).is_err());
    }

    #[test]
    fn out_of_grid_is_rejected() {
        assert!(observer_update(&uniform(), ObservedEvent::SawCache(Cell::new(20, 0))).is_err());
    }

    #[test]
    fn smoothing_finds_kernel_center() {
        let seen = observer_update(&uniform(), ObservedEvent::SawCache(Cell::new(7, 12))).unwrap();
        assert_eq!(pilfer_select(&seen.smoothed(1), 1).unwrap(), vec![Cell::new(7, 12)]);
    }

    fn event() -> impl Strategy<Value = ObservedEvent> {
        prop_oneof![
            (0..GRID_SIDE, 0..GRID_SIDE).prop_map(|(r, c)| ObservedEvent::SawCache(Cell::new(r, c))),
            (0..GRID_SIDE, 0..GRID_SIDE).prop_map(|(r, c)| ObservedEvent::SawPresence(Cell::new(r, c))),
            Just(ObservedEvent::SawNothing),
        ]
    }

    proptest! {
        #[test]
        fn updates_preserve_normalization(events in prop::collection::vec(event(), 0..40), rate in 0.0f64..1.0) {
            let mut b = ObserverBelief::uniform(rate, ObserverParams::default()).unwrap();
            for e in events {
                b = observer_update(&b, e).unwrap();
                prop_assert!((b.total() - 1.0).abs() < 1e-12);
                prop_assert!(b.grid().iter().all(|m| *m >= 0.0));
            }
        }

        #[test]
        fn cache_sighting_on_truth_never_lowers_leakage(
            events in prop::collection::vec(event(), 0..30),
            row in 0..GRID_SIDE,
            col in 0..GRID_SIDE,
        ) {
            // A sighting takes mass from every cell outside its kernel, so the
            // property holds per cache, not for an arbitrary multi-cache set.
            let truth = [Cell::new(row, col)];
            let mut b = ObserverBelief::uniform(0.05, ObserverParams::default()).unwrap();
            for e in events {
                b = observer_update(&b, e).unwrap();
            }
            let before = leakage_score(&b, &truth).unwrap();
            let after = leakage_score(&observer_update(&b, ObservedEvent::SawCache(truth[0])).unwrap(), &truth).unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }
}
