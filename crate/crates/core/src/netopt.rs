//! Downstream network optimizers: base-station deployment and RRU sleep
//! control, each with an exact brute-force oracle.
//!
//! Deployment places M stations over N grids to maximize served demand
//! minus a shortfall penalty and a per-step operation cost; given a
//! placement the optimal per-step service is closed-form, so the solver
//! enumerates placements exactly. Sleep control schedules active RRUs
//! per cell over time against QoS, switching, and energy terms; the
//! objective separates across cells, so an exact per-cell DP suffices.
//!
//! Tie-breaks are part of the contract: deployment packs stations into
//! lower-indexed grids on ties, sleep prefers fewer active RRUs.

use crate::error::{CoreError, Result};
use crate::grid_store::Grid;
use serde::{Deserialize, Serialize};

pub const DEPLOYMENT_ENUM_GUARD: u128 = 1_000_000;
pub const SLEEP_ENUM_GUARD: u128 = 1_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeploymentInstance {
    /// Number of grids N.
    pub n_grids: usize,
    /// Stations to place, M.
    pub stations: u32,
    /// Per-station capacity per step.
    pub capacity: f64,
    pub horizon: usize,
    /// Estimated demand, n_grids rows of `horizon` values.
    pub demand: Vec<f64>,
    /// Operation-cost weight.
    pub alpha: f64,
    /// Shortfall weight.
    pub beta: f64,
    /// When true the station budget is an upper bound instead of an
    /// equality, which makes the operation-cost term decision-relevant.
    pub relaxed: bool,
}

impl DeploymentInstance {
    pub fn validate(&self) -> Result<()> {
        if self.n_grids == 0 || self.horizon == 0 {
            return Err(CoreError::InvalidDimension("deployment instance needs grids and steps".into()));
        }
        if self.capacity <= 0.0 {
            return Err(CoreError::InvalidArgument("capacity must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(CoreError::InvalidArgument("weights must be nonnegative".into()));
        }
        if self.demand.len() != self.n_grids * self.horizon {
            return Err(CoreError::PayloadLength {
                expected: self.n_grids * self.horizon,
                got: self.demand.len(),
            });
        }
        if let Some(&bad) = self.demand.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(CoreError::InvalidArgument(format!("demand value {bad}")));
        }
        Ok(())
    }

    #[inline]
    pub fn demand_at(&self, grid: usize, t: usize) -> f64 {
        self.demand[grid * self.horizon + t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSolution {
    /// Stations per grid.
    pub placement: Vec<u32>,
    /// Served demand, n_grids rows of horizon values.
    pub served: Vec<f64>,
    pub objective: f64,
}

/// Literal objective: sum over steps of (served - beta * shortfall) per
/// grid, minus alpha * (total stations) per step.
pub fn deployment_objective(inst: &DeploymentInstance, placement: &[u32], served: &[f64]) -> f64 {
    let total_stations: f64 = placement.iter().map(|&x| x as f64).sum();
    let mut obj = 0.0;
    for t in 0..inst.horizon {
        for i in 0..inst.n_grids {
            let y = served[i * inst.horizon + t];
            let shortfall = (inst.demand_at(i, t) - y).max(0.0);
            obj += y - inst.beta * shortfall;
        }
        obj -= inst.alpha * total_stations;
    }
    obj
}

/// Optimal service for a fixed placement: serve as much as capacity and
/// demand allow (serving more never hurts while beta >= 0).
pub fn optimal_served(inst: &DeploymentInstance, placement: &[u32]) -> Vec<f64> {
    let mut served = vec![0.0; inst.n_grids * inst.horizon];
    for i in 0..inst.n_grids {
        let cap = placement[i] as f64 * inst.capacity;
        for t in 0..inst.horizon {
            served[i * inst.horizon + t] = cap.min(inst.demand_at(i, t));
        }
    }
    served
}

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
        if acc > DEPLOYMENT_ENUM_GUARD * 1000 {
            return u128::MAX;
        }
    }
    acc
}

fn check_deployment_guard(inst: &DeploymentInstance) -> Result<()> {
    let n = inst.n_grids as u64;
    let m = inst.stations as u64;
    let count = if inst.relaxed { binomial(n + m, m) } else { binomial(n + m - 1, m) };
    if count > DEPLOYMENT_ENUM_GUARD {
        return Err(CoreError::SearchGuard(format!(
            "{count} placements exceed the {DEPLOYMENT_ENUM_GUARD} exact-search guard"
        )));
    }
    Ok(())
}

/// Walk every feasible placement in tie-break order (stations packed into
/// lower-indexed grids first).
fn for_each_placement(n: usize, budget: u32, exact: bool, f: &mut impl FnMut(&[u32])) {
    fn rec(x: &mut Vec<u32>, pos: usize, left: u32, exact: bool, f: &mut impl FnMut(&[u32])) {
        if pos == x.len() - 1 {
            if exact {
                x[pos] = left;
                f(x);
            } else {
                for v in (0..=left).rev() {
                    x[pos] = v;
                    f(x);
                }
            }
            return;
        }
        for v in (0..=left).rev() {
            x[pos] = v;
            rec(x, pos + 1, left - v, exact, f);
        }
    }
    let mut x = vec![0u32; n];
    rec(&mut x, 0, budget, exact, f);
}

/// Exact deployment optimum: closed-form inner service, exhaustive outer
/// search over placements, first-best kept so ties pack stations into
/// lower-indexed grids.
pub fn solve_deployment(inst: &DeploymentInstance) -> Result<DeploymentSolution> {
    inst.validate()?;
    check_deployment_guard(inst)?;
    let mut best: Option<DeploymentSolution> = None;
    for_each_placement(inst.n_grids, inst.stations, !inst.relaxed, &mut |x| {
        let served = optimal_served(inst, x);
        let objective = deployment_objective(inst, x, &served);
        let better = match &best {
            None => true,
            Some(b) => objective > b.objective,
        };
        if better {
            best = Some(DeploymentSolution { placement: x.to_vec(), served, objective });
        }
    });
    Ok(best.expect("at least one placement exists"))
}

/// Oracle: enumerate placements and, per (grid, step), service levels on
/// a quarter-capacity lattice plus the closed-form candidate.
pub fn brute_force_deployment(inst: &DeploymentInstance) -> Result<DeploymentSolution> {
    inst.validate()?;
    check_deployment_guard(inst)?;
    let mut best: Option<DeploymentSolution> = None;
    for_each_placement(inst.n_grids, inst.stations, !inst.relaxed, &mut |x| {
        let mut served = vec![0.0; inst.n_grids * inst.horizon];
        for i in 0..inst.n_grids {
            let cap = x[i] as f64 * inst.capacity;
            for t in 0..inst.horizon {
                let demand = inst.demand_at(i, t);
                let upper = cap.min(demand);
                let mut candidates: Vec<f64> = Vec::new();
                let mut level = 0.0;
                while level <= cap {
                    candidates.push(level.min(upper));
                    level += 0.25 * inst.capacity;
                }
                candidates.push(upper);
                let mut term_best = f64::NEG_INFINITY;
                let mut y_best = 0.0;
                for &y in &candidates {
                    let term = y - inst.beta * (demand - y).max(0.0);
                    if term > term_best {
                        term_best = term;
                        y_best = y;
                    }
                }
                served[i * inst.horizon + t] = y_best;
            }
        }
        // Scored through the same objective routine as the solver so
        // that mathematical ties are float ties too.
        let objective = deployment_objective(inst, x, &served);
        let better = match &best {
            None => true,
            Some(b) => objective > b.objective,
        };
        if better {
            best = Some(DeploymentSolution { placement: x.to_vec(), served, objective });
        }
    });
    Ok(best.expect("at least one placement exists"))
}

/// Realized objective of a placement against (possibly different) true
/// demand, with service re-optimized for that demand.
pub fn deployment_value_under(truth: &DeploymentInstance, placement: &[u32]) -> f64 {
    let served = optimal_served(truth, placement);
    deployment_objective(truth, placement, &served)
}

// ---------------------------------------------------------------------------
// Sleep control
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SleepInstance {
    pub cells: usize,
    pub horizon: usize,
    /// Positive loads, cells rows of horizon values.
    pub loads: Vec<f64>,
    /// Load one active RRU can serve.
    pub rru_capacity: f64,
    pub max_rru: u32,
    pub alpha_energy: f64,
    pub beta_energy: f64,
    /// RRUs active before the first step.
    pub initial_rru: u32,
}

impl SleepInstance {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.horizon == 0 {
            return Err(CoreError::InvalidDimension("sleep instance needs cells and steps".into()));
        }
        if self.rru_capacity <= 0.0 {
            return Err(CoreError::InvalidArgument("rru capacity must be positive".into()));
        }
        if self.max_rru > 16 {
            return Err(CoreError::SearchGuard(format!("max_rru {} above the DP guard of 16", self.max_rru)));
        }
        if self.initial_rru > self.max_rru {
            return Err(CoreError::InvalidArgument("initial RRUs exceed max_rru".into()));
        }
        if self.loads.len() != self.cells * self.horizon {
            return Err(CoreError::PayloadLength { expected: self.cells * self.horizon, got: self.loads.len() });
        }
        if let Some(&bad) = self.loads.iter().find(|l| !l.is_finite() || **l <= 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "load {bad} (QoS normalizes by load, so loads must be positive)"
            )));
        }
        if self.alpha_energy < 0.0 || self.beta_energy < 0.0 {
            return Err(CoreError::InvalidArgument("energy coefficients must be nonnegative".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn load_at(&self, cell: usize, t: usize) -> f64 {
        self.loads[cell * self.horizon + t]
    }

    /// Energy drawn when an RRU bank carries load `l`.
    pub fn power(&self, l: f64) -> f64 {
        self.alpha_energy * l + self.beta_energy * (l / self.rru_capacity)
    }

    fn stage_cost(&self, cell: usize, t: usize, x: u32) -> f64 {
        let load = self.load_at(cell, t);
        let cap = x as f64 * self.rru_capacity;
        let qos = (load - cap).max(0.0) / load;
        let energy = self.power(load.min(cap));
        qos + energy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepSolution {
    /// Active RRUs, cells rows of horizon values.
    pub schedule: Vec<u32>,
    pub qos: f64,
    pub switching: f64,
    pub energy: f64,
    pub objective: f64,
}

/// Objective breakdown of an arbitrary schedule, summed in canonical
/// (cell, step) order. Solvers recompute through this so their reported
/// objectives agree bit for bit.
pub fn sleep_objective(inst: &SleepInstance, schedule: &[u32]) -> Result<(f64, f64, f64, f64)> {
    if schedule.len() != inst.cells * inst.horizon {
        return Err(CoreError::ShapeMismatch(format!(
            "schedule length {} vs {} cell-steps",
            schedule.len(),
            inst.cells * inst.horizon
        )));
    }
    let mut qos = 0.0;
    let mut switching = 0.0;
    let mut energy = 0.0;
    for m in 0..inst.cells {
        let mut prev = inst.initial_rru;
        for t in 0..inst.horizon {
            let x = schedule[m * inst.horizon + t];
            let load = inst.load_at(m, t);
            let cap = x as f64 * inst.rru_capacity;
            qos += (load - cap).max(0.0) / load;
            switching += (x as f64 - prev as f64).abs();
            energy += inst.power(load.min(cap));
            prev = x;
        }
    }
    Ok((qos, switching, energy, qos + switching + energy))
}

/// Exact sleep schedule via per-cell dynamic programming over RRU counts;
/// ties prefer fewer active RRUs at the earliest step.
pub fn solve_sleep(inst: &SleepInstance) -> Result<SleepSolution> {
    inst.validate()?;
    let states = inst.max_rru as usize + 1;
    let mut schedule = vec![0u32; inst.cells * inst.horizon];

    for m in 0..inst.cells {
        // suffix[t][x]: cost of steps t.. given x_t = x (stage costs plus
        // future switches), excluding the switch into x at step t. The
        // all-zero row at t = horizon makes the last step switch-free.
        let mut suffix = vec![vec![0.0f64; states]; inst.horizon + 1];
        for t in (0..inst.horizon).rev() {
            for x in 0..states {
                let stage = inst.stage_cost(m, t, x as u32);
                let mut best = f64::INFINITY;
                for nx in 0..states {
                    let cand = (nx as f64 - x as f64).abs() + suffix[t + 1][nx];
                    if cand < best {
                        best = cand;
                    }
                }
                suffix[t][x] = stage + best;
            }
        }

        let mut prev = inst.initial_rru as usize;
        for t in 0..inst.horizon {
            let mut best_x = 0usize;
            let mut best_cost = f64::INFINITY;
            for x in 0..states {
                let cand = (x as f64 - prev as f64).abs() + suffix[t][x];
                if cand < best_cost {
                    best_cost = cand;
                    best_x = x;
                }
            }
            schedule[m * inst.horizon + t] = best_x as u32;
            prev = best_x;
        }
    }

    let (qos, switching, energy, objective) = sleep_objective(inst, &schedule)?;
    Ok(SleepSolution { schedule, qos, switching, energy, objective })
}

/// Oracle: joint enumeration of every schedule in lexicographic order.
pub fn brute_force_sleep(inst: &SleepInstance) -> Result<SleepSolution> {
    inst.validate()?;
    let states = (inst.max_rru as u128) + 1;
    let slots = (inst.cells * inst.horizon) as u32;
    let count = states.checked_pow(slots).unwrap_or(u128::MAX);
    if count > SLEEP_ENUM_GUARD {
        return Err(CoreError::SearchGuard(format!(
            "{count} schedules exceed the {SLEEP_ENUM_GUARD} enumeration guard"
        )));
    }
    let mut schedule = vec![0u32; slots as usize];
    let mut best: Option<SleepSolution> = None;
    loop {
        let (qos, switching, energy, objective) = sleep_objective(inst, &schedule)?;
        let better = match &best {
            None => true,
            Some(b) => objective < b.objective,
        };
        if better {
            best = Some(SleepSolution { schedule: schedule.clone(), qos, switching, energy, objective });
        }
        // Odometer increment in lexicographic order (last slot fastest).
        let mut pos = schedule.len();
        loop {
            if pos == 0 {
                return Ok(best.expect("at least one schedule"));
            }
            pos -= 1;
            if schedule[pos] < inst.max_rru {
                schedule[pos] += 1;
                for s in &mut schedule[pos + 1..] {
                    *s = 0;
                }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Demand estimation plumbing
// ---------------------------------------------------------------------------

/// Build a deployment instance from a (forecast or true) traffic grid:
/// one deployment grid per cell, demand in raw units.
pub fn deployment_instance_from_grid(
    grid: &Grid,
    stations: u32,
    capacity: f64,
    alpha: f64,
    beta: f64,
    relaxed: bool,
) -> DeploymentInstance {
    let n = grid.cells();
    let mut demand = vec![0.0; n * grid.t];
    for h in 0..grid.h {
        for v in 0..grid.v {
            let cell = h * grid.v + v;
            for t in 0..grid.t {
                demand[cell * grid.t + t] = grid.at(h, v, t).max(0.0);
            }
        }
    }
    DeploymentInstance {
        n_grids: n,
        stations,
        capacity,
        horizon: grid.t,
        demand,
        alpha,
        beta,
        relaxed,
    }
}

/// Build a sleep instance from a traffic grid; loads are floored to keep
/// the QoS denominator positive.
pub fn sleep_instance_from_grid(
    grid: &Grid,
    rru_capacity: f64,
    max_rru: u32,
    alpha_energy: f64,
    beta_energy: f64,
    initial_rru: u32,
    load_floor: f64,
) -> SleepInstance {
    let n = grid.cells();
    let mut loads = vec![0.0; n * grid.t];
    for h in 0..grid.h {
        for v in 0..grid.v {
            let cell = h * grid.v + v;
            for t in 0..grid.t {
                loads[cell * grid.t + t] = grid.at(h, v, t).max(load_floor);
            }
        }
    }
    SleepInstance {
        cells: n,
        horizon: grid.t,
        loads,
        rru_capacity,
        max_rru,
        alpha_energy,
        beta_energy,
        initial_rru,
    }
}

/// Demand proportional to total POI count per cell, scaled to a given
/// total volume and constant over time. The static strawman that
/// forecast-driven planning is compared against.
pub fn poi_proportional_demand(poi: &crate::grid_store::PoiMap, horizon: usize, total_volume: f64) -> Grid {
    let mut grid = Grid::zeros(crate::grid_store::GridKind::Traffic, poi.h, poi.v, horizon, 60);
    let totals: Vec<f64> = (0..poi.h * poi.v)
        .map(|cell| poi.cell_total(cell / poi.v, cell % poi.v) as f64)
        .collect();
    let sum: f64 = totals.iter().sum();
    if sum <= 0.0 {
        return grid;
    }
    let per_step = total_volume / horizon as f64;
    for h in 0..poi.h {
        for v in 0..poi.v {
            let share = totals[h * poi.v + v] / sum;
            for t in 0..horizon {
                grid.set(h, v, t, share * per_step);
            }
        }
    }
    grid
}
