//! Multi-class cell transmission model for one directed expressway.
//!
//! Every mainline, on-ramp and off-ramp cell carries one density per route so
//! that vehicles can be tracked to their exit. Flows between cells are the
//! minimum of upstream demand and downstream receiving capacity, shared among
//! routes in proportion to their demand (first-in-first-out). Merge cells can
//! be flagged as bottlenecks whose discharge capacity drops linearly with
//! density once a critical value is exceeded.

use crate::error::ModelError;

/// Density tolerance used when checking the jam-density invariant.
const JAM_TOLERANCE: f64 = 1e-9;

/// Linear capacity drop at a merging bottleneck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityDrop {
    /// Bottleneck capacity C_b, veh/s.
    pub capacity: f64,
    /// Maximum relative extent of the drop, in `[0, 1]`.
    pub lambda: f64,
}

/// Triangular fundamental diagram of one cell class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalDiagram {
    /// m/s
    pub free_flow_speed: f64,
    /// veh/s over all lanes of one direction
    pub capacity: f64,
    /// veh/m
    pub jam_density: f64,
    pub capacity_drop: Option<CapacityDrop>,
}

impl FundamentalDiagram {
    pub fn new(
        free_flow_speed: f64,
        capacity: f64,
        jam_density: f64,
    ) -> Result<Self, ModelError> {
        let fd = FundamentalDiagram {
            free_flow_speed,
            capacity,
            jam_density,
            capacity_drop: None,
        };
        fd.validate()?;
        Ok(fd)
    }

    pub fn with_capacity_drop(mut self, capacity: f64, lambda: f64) -> Result<Self, ModelError> {
        self.capacity_drop = Some(CapacityDrop { capacity, lambda });
        self.validate()?;
        Ok(self)
    }

    pub fn critical_density(&self) -> f64 {
        self.capacity / self.free_flow_speed
    }

    /// Backward (congestion) wave speed, m/s.
    pub fn wave_speed(&self) -> f64 {
        self.capacity / (self.jam_density - self.critical_density())
    }

    /// Critical density of the bottleneck branch, `C_b / v_f`.
    pub fn bottleneck_critical_density(&self) -> Option<f64> {
        self.capacity_drop
            .map(|drop| drop.capacity / self.free_flow_speed)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let finite_pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ModelError::param(name, format!("must be finite and > 0, got {v}")))
            }
        };
        finite_pos("free_flow_speed", self.free_flow_speed)?;
        finite_pos("capacity", self.capacity)?;
        finite_pos("jam_density", self.jam_density)?;
        if self.jam_density <= self.critical_density() {
            return Err(ModelError::param(
                "jam_density",
                format!(
                    "must exceed critical density {} veh/m",
                    self.critical_density()
                ),
            ));
        }
        if self.wave_speed() > self.free_flow_speed {
            return Err(ModelError::param(
                "jam_density",
                format!(
                    "wave speed {} m/s exceeds free-flow speed {} m/s",
                    self.wave_speed(),
                    self.free_flow_speed
                ),
            ));
        }
        if let Some(drop) = self.capacity_drop {
            finite_pos("bottleneck_capacity", drop.capacity)?;
            if drop.capacity > self.capacity {
                return Err(ModelError::param(
                    "bottleneck_capacity",
                    "must not exceed the cell capacity",
                ));
            }
            if !(0.0..=1.0).contains(&drop.lambda) {
                return Err(ModelError::param(
                    "capacity_drop_lambda",
                    format!("must lie in [0, 1], got {}", drop.lambda),
                ));
            }
        }
        Ok(())
    }

    /// Capacity used in the demand and receiving functions of a cell.
    pub fn effective_capacity(&self, total_density: f64, is_bottleneck: bool) -> f64 {
        if is_bottleneck && self.capacity_drop.is_some() {
            bottleneck_max_outflow(total_density, self)
        } else {
            self.capacity
        }
    }
}

/// Maximum outflow of a merging bottleneck: `C_b` up to the bottleneck critical
/// density, then decreasing linearly to `C_b (1 - lambda)` at jam density.
/// Without a configured capacity drop this is the plain capacity.
pub fn bottleneck_max_outflow(total_density: f64, fd: &FundamentalDiagram) -> f64 {
    let Some(drop) = fd.capacity_drop else {
        return fd.capacity;
    };
    let k_cb = drop.capacity / fd.free_flow_speed;
    let reduced = drop.capacity
        * (1.0 - drop.lambda * (total_density - k_cb) / (fd.jam_density - k_cb));
    drop.capacity.min(reduced)
}

/// Per-route sending flow of a cell.
///
/// The cell's total sending flow `min(v_f K, C_eff)` is shared among routes in
/// proportion to their density. With a single route this is exactly
/// `min(v_f K^y, C_eff)`.
pub fn cell_demand(
    per_route_density: &[f64],
    total_density: f64,
    fd: &FundamentalDiagram,
    is_bottleneck: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; per_route_density.len()];
    cell_demand_into(per_route_density, total_density, fd, is_bottleneck, &mut out);
    out
}

pub(crate) fn cell_demand_into(
    per_route_density: &[f64],
    total_density: f64,
    fd: &FundamentalDiagram,
    is_bottleneck: bool,
    out: &mut [f64],
) {
    if total_density <= 0.0 {
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let cap = fd.effective_capacity(total_density, is_bottleneck);
    let total_demand = (fd.free_flow_speed * total_density).min(cap);
    for (o, &k) in out.iter_mut().zip(per_route_density) {
        *o = k / total_density * total_demand;
    }
}

/// Receiving capacity `min(w (K_j - K), C_eff)` of a cell.
pub fn cell_receiving(
    total_density: f64,
    fd: &FundamentalDiagram,
    is_bottleneck: bool,
) -> Result<f64, ModelError> {
    if total_density > fd.jam_density * (1.0 + JAM_TOLERANCE) {
        return Err(ModelError::DensityAboveJam {
            location: "cell".into(),
            density: total_density,
            jam: fd.jam_density,
        });
    }
    Ok(receiving_unchecked(total_density, fd, is_bottleneck))
}

fn receiving_unchecked(total_density: f64, fd: &FundamentalDiagram, is_bottleneck: bool) -> f64 {
    let cap = fd.effective_capacity(total_density, is_bottleneck);
    (fd.wave_speed() * (fd.jam_density - total_density))
        .min(cap)
        .max(0.0)
}

/// Mean speed of a cell: free-flow speed on the uncongested branch,
/// `w (K_j - K) / K` on the congested branch.
pub fn cell_speed(total_density: f64, fd: &FundamentalDiagram) -> f64 {
    if total_density <= fd.critical_density() {
        return fd.free_flow_speed;
    }
    let congested = fd.wave_speed() * (fd.jam_density - total_density) / total_density;
    fd.free_flow_speed.min(congested.max(0.0))
}

/// Shares `supply` among demands FIFO-proportionally:
/// `out[y] = min(d[y], d[y] / sum(d) * supply)`.
pub(crate) fn fifo_split_into(demands: &[f64], supply: f64, out: &mut [f64]) {
    let total: f64 = demands.iter().sum();
    if total <= 0.0 {
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let supply = supply.max(0.0);
    for (o, &d) in out.iter_mut().zip(demands) {
        *o = d.min(d / total * supply);
    }
}

pub(crate) fn fifo_split(demands: &[f64], supply: f64) -> Vec<f64> {
    let mut out = vec![0.0; demands.len()];
    fifo_split_into(demands, supply, &mut out);
    out
}

/// Per-route flow from an on-ramp into its merge cell.
pub fn on_ramp_flow(per_route_demand: &[f64], downstream_receiving: f64) -> Vec<f64> {
    fifo_split(per_route_demand, downstream_receiving)
}

/// Per-route flow between two mainline cells. When the downstream cell is a
/// merge cell, the metered on-ramp inflow is served first and the mainline gets
/// what is left of the receiving capacity.
pub fn mainline_flow(
    per_route_demand: &[f64],
    downstream_receiving: f64,
    metered_ramp_inflow: f64,
) -> Vec<f64> {
    fifo_split(
        per_route_demand,
        (downstream_receiving - metered_ramp_inflow).max(0.0),
    )
}

/// Per-route admission of exogenous demand into the first mainline cell.
pub fn first_cell_inflow(per_route_exogenous_demand: &[f64], first_cell_receiving: f64) -> Vec<f64> {
    fifo_split(per_route_exogenous_demand, first_cell_receiving)
}

/// Where a route enters the expressway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    /// Generated upstream of the first cell.
    Upstream,
    /// Through the on-ramp with the given slot index.
    OnRamp(usize),
}

/// Where a route leaves the expressway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    /// Past the last cell.
    Downstream,
    /// Through the off-ramp with the given slot index.
    OffRamp(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneRoute {
    pub entry: Entry,
    pub exit: Exit,
}

/// A ramp attached to a mainline cell (0-based) and owned by a subregion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RampAttachment {
    pub region: usize,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpresswayTopology {
    pub cell_count: usize,
    /// m
    pub cell_length: f64,
    /// On-ramps; the merge cell is the mainline cell the ramp discharges into.
    pub on_ramps: Vec<RampAttachment>,
    /// Off-ramps; the diverge cell is the mainline cell vehicles leave from.
    pub off_ramps: Vec<RampAttachment>,
}

impl ExpresswayTopology {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cell_count == 0 {
            return Err(ModelError::param("cell_count", "must be at least 1"));
        }
        if !(self.cell_length.is_finite() && self.cell_length > 0.0) {
            return Err(ModelError::param("cell_length", "must be finite and > 0"));
        }
        let mut hosted = vec![false; self.cell_count];
        for (kind, ramps) in [("on_ramp_cells", &self.on_ramps), ("off_ramp_cells", &self.off_ramps)] {
            for ramp in ramps {
                if ramp.cell >= self.cell_count {
                    return Err(ModelError::param(
                        kind,
                        format!(
                            "cell {} outside [1, {}]",
                            ramp.cell + 1,
                            self.cell_count
                        ),
                    ));
                }
                if hosted[ramp.cell] {
                    return Err(ModelError::param(
                        kind,
                        format!("cell {} hosts more than one ramp", ramp.cell + 1),
                    ));
                }
                hosted[ramp.cell] = true;
            }
        }
        for off in &self.off_ramps {
            for on in self.on_ramps.iter().filter(|on| on.region == off.region) {
                if off.cell >= on.cell {
                    return Err(ModelError::param(
                        "off_ramp_cells",
                        format!(
                            "off-ramp of subregion {} (cell {}) must be upstream of its on-ramp (cell {})",
                            off.region + 1,
                            off.cell + 1,
                            on.cell + 1
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-route densities of one directed expressway plus the virtual queue of
/// exogenous demand waiting to enter the first cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpresswayState {
    routes: usize,
    /// cell-major, `cell * routes + route`, veh/m
    pub mainline: Vec<f64>,
    /// slot-major, veh/m
    pub on_ramp: Vec<f64>,
    /// slot-major, veh/m
    pub off_ramp: Vec<f64>,
    /// veh
    pub upstream_queue: Vec<f64>,
}

impl ExpresswayState {
    pub fn route_count(&self) -> usize {
        self.routes
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.mainline[cell * self.routes..(cell + 1) * self.routes]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        let r = self.routes;
        &mut self.mainline[cell * r..(cell + 1) * r]
    }

    pub fn on_ramp(&self, slot: usize) -> &[f64] {
        &self.on_ramp[slot * self.routes..(slot + 1) * self.routes]
    }

    pub fn on_ramp_mut(&mut self, slot: usize) -> &mut [f64] {
        let r = self.routes;
        &mut self.on_ramp[slot * r..(slot + 1) * r]
    }

    pub fn off_ramp(&self, slot: usize) -> &[f64] {
        &self.off_ramp[slot * self.routes..(slot + 1) * self.routes]
    }

    pub fn off_ramp_mut(&mut self, slot: usize) -> &mut [f64] {
        let r = self.routes;
        &mut self.off_ramp[slot * r..(slot + 1) * r]
    }

    pub fn cell_total(&self, cell: usize) -> f64 {
        self.cell(cell).iter().sum()
    }

    pub fn on_ramp_total(&self, slot: usize) -> f64 {
        self.on_ramp(slot).iter().sum()
    }

    pub fn off_ramp_total(&self, slot: usize) -> f64 {
        self.off_ramp(slot).iter().sum()
    }

    /// Vehicles on the mainline and ramps (queue excluded).
    pub fn vehicles_on_road(&self, cell_length: f64) -> f64 {
        let dens: f64 = self.mainline.iter().sum::<f64>()
            + self.on_ramp.iter().sum::<f64>()
            + self.off_ramp.iter().sum::<f64>();
        dens * cell_length
    }

    pub fn queued_vehicles(&self) -> f64 {
        self.upstream_queue.iter().sum()
    }

    /// Vehicles of one route on the road and in the queue.
    pub fn route_vehicles(&self, route: usize, cell_length: f64) -> f64 {
        let r = self.routes;
        let dens: f64 = self.mainline.iter().skip(route).step_by(r).sum::<f64>()
            + self.on_ramp.iter().skip(route).step_by(r).sum::<f64>()
            + self.off_ramp.iter().skip(route).step_by(r).sum::<f64>();
        dens * cell_length + self.upstream_queue[route]
    }

    /// Multiplies every density and queue by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in out
            .mainline
            .iter_mut()
            .chain(out.on_ramp.iter_mut())
            .chain(out.off_ramp.iter_mut())
            .chain(out.upstream_queue.iter_mut())
        {
            *v *= factor;
        }
        out
    }
}

/// Inputs to one expressway update.
#[derive(Debug, Clone, Copy)]
pub struct ExpresswayInputs<'a> {
    /// Transfer from the subregions into each on-ramp, slot-major per route, veh/s.
    pub ramp_inflow: &'a [f64],
    /// Metering rate per on-ramp slot, in `[0, 1]`.
    pub metering: &'a [f64],
    /// Exogenous upstream demand per route, veh/s.
    pub exogenous_demand: &'a [f64],
    /// Admission limit of the subregion behind each off-ramp, veh/s.
    pub off_ramp_supply: &'a [f64],
}

/// Flows realized during one expressway update, all in veh/s.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpresswayFlows {
    pub first_cell_inflow: Vec<f64>,
    /// Metered on-ramp discharge into the merge cell, slot-major.
    pub on_ramp_discharge: Vec<f64>,
    /// Flow from diverge cells into the off-ramps, slot-major.
    pub off_ramp_diversion: Vec<f64>,
    /// Flow from the off-ramps into the subregions, slot-major.
    pub off_ramp_outflow: Vec<f64>,
    pub terminal_outflow: Vec<f64>,
    /// Total flow from each cell to the next mainline cell (or past the end).
    pub cell_outflow: Vec<f64>,
}

impl ExpresswayFlows {
    fn resize(&mut self, cells: usize, r: usize, n_on: usize, n_off: usize) {
        self.first_cell_inflow.resize(r, 0.0);
        self.on_ramp_discharge.resize(n_on * r, 0.0);
        self.off_ramp_diversion.resize(n_off * r, 0.0);
        self.off_ramp_outflow.resize(n_off * r, 0.0);
        self.terminal_outflow.resize(r, 0.0);
        self.cell_outflow.resize(cells, 0.0);
    }
}

/// Scratch buffers reused across [`Expressway::step_into`] calls.
#[derive(Debug, Clone, Default)]
pub struct ExpresswayWork {
    demand: Vec<f64>,
    receiving: Vec<f64>,
    ramp_into: Vec<f64>,
    mainline_out: Vec<f64>,
    off_receiving: Vec<f64>,
    scratch: Vec<f64>,
    split: Vec<f64>,
}

impl ExpresswayWork {
    fn resize(&mut self, cells: usize, r: usize, n_off: usize) {
        self.demand.resize(cells * r, 0.0);
        self.receiving.resize(cells, 0.0);
        self.ramp_into.resize(cells, 0.0);
        self.mainline_out.resize(cells * r, 0.0);
        self.off_receiving.resize(n_off, 0.0);
        self.scratch.resize(r, 0.0);
        self.split.resize(r, 0.0);
    }
}

/// One directed expressway: fundamental diagrams, topology and route set.
#[derive(Debug, Clone)]
pub struct Expressway {
    mainline: FundamentalDiagram,
    ramp: FundamentalDiagram,
    topology: ExpresswayTopology,
    routes: Vec<LaneRoute>,
    entry_cell: Vec<usize>,
    exit_cell: Vec<usize>,
    merge_slot: Vec<Option<usize>>,
    diverge_slot: Vec<Option<usize>>,
}

impl Expressway {
    pub fn new(
        mainline: FundamentalDiagram,
        ramp: FundamentalDiagram,
        topology: ExpresswayTopology,
        routes: Vec<LaneRoute>,
    ) -> Result<Self, ModelError> {
        mainline.validate()?;
        ramp.validate()?;
        topology.validate()?;
        let l = topology.cell_count;
        let mut merge_slot = vec![None; l];
        for (s, ramp) in topology.on_ramps.iter().enumerate() {
            merge_slot[ramp.cell] = Some(s);
        }
        let mut diverge_slot = vec![None; l];
        for (s, ramp) in topology.off_ramps.iter().enumerate() {
            diverge_slot[ramp.cell] = Some(s);
        }
        let mut entry_cell = Vec::with_capacity(routes.len());
        let mut exit_cell = Vec::with_capacity(routes.len());
        for (y, route) in routes.iter().enumerate() {
            let entry = match route.entry {
                Entry::Upstream => 0,
                Entry::OnRamp(s) => topology
                    .on_ramps
                    .get(s)
                    .ok_or_else(|| ModelError::param("routes", format!("route {y}: no on-ramp slot {s}")))?
                    .cell,
            };
            let exit = match route.exit {
                Exit::Downstream => l - 1,
                Exit::OffRamp(s) => topology
                    .off_ramps
                    .get(s)
                    .ok_or_else(|| ModelError::param("routes", format!("route {y}: no off-ramp slot {s}")))?
                    .cell,
            };
            if exit < entry {
                return Err(ModelError::param(
                    "routes",
                    format!("route {y} exits (cell {}) upstream of its entry (cell {})", exit + 1, entry + 1),
                ));
            }
            entry_cell.push(entry);
            exit_cell.push(exit);
        }
        Ok(Expressway {
            mainline,
            ramp,
            topology,
            routes,
            entry_cell,
            exit_cell,
            merge_slot,
            diverge_slot,
        })
    }

    pub fn mainline_fd(&self) -> &FundamentalDiagram {
        &self.mainline
    }

    pub fn ramp_fd(&self) -> &FundamentalDiagram {
        &self.ramp
    }

    pub fn topology(&self) -> &ExpresswayTopology {
        &self.topology
    }

    pub fn routes(&self) -> &[LaneRoute] {
        &self.routes
    }

    pub fn cell_count(&self) -> usize {
        self.topology.cell_count
    }

    pub fn cell_length(&self) -> f64 {
        self.topology.cell_length
    }

    /// First and last mainline cell a route occupies.
    pub fn route_span(&self, route: usize) -> (usize, usize) {
        (self.entry_cell[route], self.exit_cell[route])
    }

    pub fn is_bottleneck(&self, cell: usize) -> bool {
        self.merge_slot[cell].is_some() && self.mainline.capacity_drop.is_some()
    }

    /// Courant condition: a vehicle at free-flow speed must not cross more
    /// than one cell per step.
    pub fn check_time_step(&self, dt: f64) -> Result<(), ModelError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(ModelError::param("sim_step", "must be finite and > 0"));
        }
        let fastest = self.mainline.free_flow_speed.max(self.ramp.free_flow_speed);
        if fastest * dt > self.topology.cell_length {
            return Err(ModelError::param(
                "sim_step",
                format!(
                    "CFL condition violated: free-flow speed {:.3} m/s x step {} s = {:.1} m exceeds cell length {} m",
                    fastest,
                    dt,
                    fastest * dt,
                    self.topology.cell_length
                ),
            ));
        }
        Ok(())
    }

    pub fn empty_state(&self) -> ExpresswayState {
        let r = self.routes.len();
        ExpresswayState {
            routes: r,
            mainline: vec![0.0; self.topology.cell_count * r],
            on_ramp: vec![0.0; self.topology.on_ramps.len() * r],
            off_ramp: vec![0.0; self.topology.off_ramps.len() * r],
            upstream_queue: vec![0.0; r],
        }
    }

    /// Receiving capacity of an on-ramp cell.
    pub fn on_ramp_receiving(&self, state: &ExpresswayState, slot: usize) -> f64 {
        receiving_unchecked(state.on_ramp_total(slot), &self.ramp, false)
    }

    pub fn cell_speeds(&self, state: &ExpresswayState) -> Vec<f64> {
        (0..self.topology.cell_count)
            .map(|l| cell_speed(state.cell_total(l), &self.mainline))
            .collect()
    }

    pub fn on_ramp_speed(&self, state: &ExpresswayState, slot: usize) -> f64 {
        cell_speed(state.on_ramp_total(slot), &self.ramp)
    }

    pub fn off_ramp_speed(&self, state: &ExpresswayState, slot: usize) -> f64 {
        cell_speed(state.off_ramp_total(slot), &self.ramp)
    }

    /// Checks non-negativity and the jam-density cap of every cell.
    pub fn check_state(&self, state: &ExpresswayState) -> Result<(), ModelError> {
        let r = self.routes.len();
        let expect = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(ModelError::Dimension { what, expected, got })
            }
        };
        expect("mainline densities", self.topology.cell_count * r, state.mainline.len())?;
        expect("on-ramp densities", self.topology.on_ramps.len() * r, state.on_ramp.len())?;
        expect("off-ramp densities", self.topology.off_ramps.len() * r, state.off_ramp.len())?;
        expect("upstream queues", r, state.upstream_queue.len())?;
        let check = |location: String, values: &[f64], fd: &FundamentalDiagram| {
            for &v in values {
                if v < 0.0 || !v.is_finite() {
                    return Err(ModelError::NegativeState { location, value: v });
                }
            }
            let total: f64 = values.iter().sum();
            if total > fd.jam_density * (1.0 + JAM_TOLERANCE) {
                return Err(ModelError::DensityAboveJam {
                    location,
                    density: total,
                    jam: fd.jam_density,
                });
            }
            Ok(())
        };
        for l in 0..self.topology.cell_count {
            check(format!("mainline cell {}", l + 1), state.cell(l), &self.mainline)?;
        }
        for s in 0..self.topology.on_ramps.len() {
            check(format!("on-ramp {}", s), state.on_ramp(s), &self.ramp)?;
        }
        for s in 0..self.topology.off_ramps.len() {
            check(format!("off-ramp {}", s), state.off_ramp(s), &self.ramp)?;
        }
        for &q in &state.upstream_queue {
            if q < 0.0 || !q.is_finite() {
                return Err(ModelError::NegativeState {
                    location: "upstream queue".into(),
                    value: q,
                });
            }
        }
        Ok(())
    }

    /// Advances the expressway by one step of length `dt`.
    ///
    /// All flows are computed from the densities at the start of the step and
    /// then applied at once.
    pub fn step(
        &self,
        state: &ExpresswayState,
        inputs: &ExpresswayInputs<'_>,
        dt: f64,
    ) -> Result<(ExpresswayState, ExpresswayFlows), ModelError> {
        let mut next = state.clone();
        let mut flows = ExpresswayFlows::default();
        let mut work = ExpresswayWork::default();
        self.step_into(state, inputs, dt, &mut next, &mut flows, &mut work)?;
        Ok((next, flows))
    }

    /// [`Expressway::step`] writing into caller-owned buffers. `next` must
    /// have the shape of `state`.
    pub fn step_into(
        &self,
        state: &ExpresswayState,
        inputs: &ExpresswayInputs<'_>,
        dt: f64,
        next: &mut ExpresswayState,
        flows: &mut ExpresswayFlows,
        work: &mut ExpresswayWork,
    ) -> Result<(), ModelError> {
        let r = self.routes.len();
        let cells = self.topology.cell_count;
        let n_on = self.topology.on_ramps.len();
        let n_off = self.topology.off_ramps.len();
        let ls = self.topology.cell_length;
        let dims = [
            ("ramp inflow", n_on * r, inputs.ramp_inflow.len()),
            ("metering", n_on, inputs.metering.len()),
            ("exogenous demand", r, inputs.exogenous_demand.len()),
            ("off-ramp supply", n_off, inputs.off_ramp_supply.len()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(ModelError::Dimension { what, expected, got });
            }
        }
        work.resize(cells, r, n_off);
        flows.resize(cells, r, n_on, n_off);

        // Sending and receiving functions from the current state.
        for l in 0..cells {
            let total = state.cell_total(l);
            let bottleneck = self.is_bottleneck(l);
            cell_demand_into(
                state.cell(l),
                total,
                &self.mainline,
                bottleneck,
                &mut work.demand[l * r..(l + 1) * r],
            );
            work.receiving[l] = cell_receiving(total, &self.mainline, bottleneck).map_err(|_| {
                ModelError::DensityAboveJam {
                    location: format!("mainline cell {}", l + 1),
                    density: total,
                    jam: self.mainline.jam_density,
                }
            })?;
            work.ramp_into[l] = 0.0;
        }

        // On-ramps discharge first into their merge cells.
        for (s, ramp) in self.topology.on_ramps.iter().enumerate() {
            let eta = inputs.metering[s];
            cell_demand_into(state.on_ramp(s), state.on_ramp_total(s), &self.ramp, false, &mut work.scratch);
            fifo_split_into(&work.scratch, work.receiving[ramp.cell], &mut work.split);
            let out = &mut flows.on_ramp_discharge[s * r..(s + 1) * r];
            let mut sum = 0.0;
            for (o, &q) in out.iter_mut().zip(&work.split) {
                *o = eta * q;
                sum += *o;
            }
            work.ramp_into[ramp.cell] += sum;
        }

        // Exogenous demand plus the virtual queue re-offered at the first cell.
        for y in 0..r {
            work.scratch[y] = inputs.exogenous_demand[y] + state.upstream_queue[y] / dt;
        }
        fifo_split_into(
            &work.scratch,
            (work.receiving[0] - work.ramp_into[0]).max(0.0),
            &mut flows.first_cell_inflow,
        );

        // Mainline flows, with FIFO diverges at off-ramp cells.
        for s in 0..n_off {
            work.off_receiving[s] = receiving_unchecked(state.off_ramp_total(s), &self.ramp, false);
        }
        for l in 0..cells {
            let sigma = &work.demand[l * r..(l + 1) * r];
            let cont_supply = if l + 1 < cells {
                (work.receiving[l + 1] - work.ramp_into[l + 1]).max(0.0)
            } else {
                f64::INFINITY
            };
            let out = &mut work.mainline_out[l * r..(l + 1) * r];
            match self.diverge_slot[l] {
                None => {
                    if l + 1 < cells {
                        fifo_split_into(sigma, cont_supply, out);
                    } else {
                        out.copy_from_slice(sigma);
                    }
                }
                Some(slot) => {
                    let mut d_cont = 0.0;
                    let mut d_off = 0.0;
                    for y in 0..r {
                        if self.leaves_by_off_ramp(y, l) {
                            d_off += sigma[y];
                        } else {
                            d_cont += sigma[y];
                        }
                    }
                    let mut phi: f64 = 1.0;
                    if d_cont > 0.0 {
                        phi = phi.min(cont_supply / d_cont);
                    }
                    if d_off > 0.0 {
                        phi = phi.min(work.off_receiving[slot] / d_off);
                    }
                    for y in 0..r {
                        out[y] = phi * sigma[y];
                    }
                }
            }
        }

        // Off-ramps discharge into the subregions.
        for s in 0..n_off {
            cell_demand_into(state.off_ramp(s), state.off_ramp_total(s), &self.ramp, false, &mut work.scratch);
            fifo_split_into(
                &work.scratch,
                inputs.off_ramp_supply[s],
                &mut flows.off_ramp_outflow[s * r..(s + 1) * r],
            );
        }

        // Conservation updates.
        next.routes = r;
        next.mainline.resize(cells * r, 0.0);
        next.on_ramp.resize(n_on * r, 0.0);
        next.off_ramp.resize(n_off * r, 0.0);
        next.upstream_queue.resize(r, 0.0);
        flows.off_ramp_diversion.iter_mut().for_each(|x| *x = 0.0);
        flows.terminal_outflow.iter_mut().for_each(|x| *x = 0.0);
        let ratio = dt / ls;
        let mainline_out = &work.mainline_out;
        for l in 0..cells {
            let mut cell_out = 0.0;
            for y in 0..r {
                let out = mainline_out[l * r + y];
                let mut inflow = if l == 0 {
                    flows.first_cell_inflow[y]
                } else if self.exit_cell[y] != l - 1 {
                    mainline_out[(l - 1) * r + y]
                } else {
                    0.0
                };
                if let Some(s) = self.merge_slot[l] {
                    inflow += flows.on_ramp_discharge[s * r + y];
                }
                if self.exit_cell[y] == l {
                    match self.routes[y].exit {
                        Exit::OffRamp(s) => flows.off_ramp_diversion[s * r + y] = out,
                        Exit::Downstream => {
                            flows.terminal_outflow[y] = out;
                            cell_out += out;
                        }
                    }
                } else {
                    cell_out += out;
                }
                let k = state.mainline[l * r + y];
                next.mainline[l * r + y] = (k + ratio * inflow - ratio * out).max(0.0);
            }
            flows.cell_outflow[l] = cell_out;
        }
        for i in 0..n_on * r {
            next.on_ramp[i] =
                (state.on_ramp[i] + ratio * inputs.ramp_inflow[i] - ratio * flows.on_ramp_discharge[i]).max(0.0);
        }
        for i in 0..n_off * r {
            next.off_ramp[i] =
                (state.off_ramp[i] + ratio * flows.off_ramp_diversion[i] - ratio * flows.off_ramp_outflow[i]).max(0.0);
        }
        for y in 0..r {
            next.upstream_queue[y] = (state.upstream_queue[y]
                + dt * (inputs.exogenous_demand[y] - flows.first_cell_inflow[y]))
                .max(0.0);
        }
        Ok(())
    }

    fn leaves_by_off_ramp(&self, route: usize, cell: usize) -> bool {
        self.exit_cell[route] == cell && matches!(self.routes[route].exit, Exit::OffRamp(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::*;
    use approx::assert_relative_eq;

    fn mainline() -> FundamentalDiagram {
        FundamentalDiagram::new(kmh_to_ms(80.0), vehh_to_vehs(6000.0), vehkm_to_vehm(375.0))
            .unwrap()
            .with_capacity_drop(vehh_to_vehs(4800.0), 0.3)
            .unwrap()
    }

    fn ramp() -> FundamentalDiagram {
        FundamentalDiagram::new(kmh_to_ms(40.0), vehh_to_vehs(3000.0), vehkm_to_vehm(275.0)).unwrap()
    }

    #[test]
    fn derived_parameters() {
        let fd = mainline();
        assert_relative_eq!(vehm_to_vehkm(fd.critical_density()), 75.0, max_relative = 1e-12);
        assert_relative_eq!(ms_to_kmh(fd.wave_speed()), 20.0, max_relative = 1e-12);
        assert_relative_eq!(ms_to_kmh(ramp().wave_speed()), 15.0, max_relative = 1e-12);
        assert_relative_eq!(vehm_to_vehkm(fd.bottleneck_critical_density().unwrap()), 60.0, max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_diagrams() {
        assert!(FundamentalDiagram::new(10.0, 1.0, 0.05).is_err()); // jam below critical
        assert!(FundamentalDiagram::new(10.0, 1.0, 0.105).is_err()); // wave faster than free flow
        assert!(FundamentalDiagram::new(-1.0, 1.0, 0.3).is_err());
        assert!(mainline().with_capacity_drop(vehh_to_vehs(4800.0), 1.5).is_err());
    }

    #[test]
    fn demand_examples() {
        let fd = mainline();
        let k = vehkm_to_vehm(50.0);
        assert_relative_eq!(vehs_to_vehh(cell_demand(&[k], k, &fd, false)[0]), 4000.0, max_relative = 1e-9);
        let k = vehkm_to_vehm(100.0);
        assert_relative_eq!(vehs_to_vehh(cell_demand(&[k], k, &fd, false)[0]), 6000.0, max_relative = 1e-9);
        assert_eq!(cell_demand(&[0.0], 0.0, &fd, false), vec![0.0]);
    }

    #[test]
    fn demand_never_exceeds_capacity_in_total() {
        let fd = mainline();
        let ks = [0.06, 0.06];
        let d = cell_demand(&ks, 0.12, &fd, false);
        assert_relative_eq!(d.iter().sum::<f64>(), fd.capacity, max_relative = 1e-12);
        assert_relative_eq!(d[0], d[1]);
    }

    #[test]
    fn receiving_examples() {
        let fd = mainline();
        let r = cell_receiving(vehkm_to_vehm(300.0), &fd, false).unwrap();
        assert_relative_eq!(vehs_to_vehh(r), 1500.0, max_relative = 1e-9);
        assert_relative_eq!(vehs_to_vehh(cell_receiving(0.0, &fd, false).unwrap()), 6000.0, max_relative = 1e-9);
        assert_eq!(cell_receiving(fd.jam_density, &fd, false).unwrap(), 0.0);
        assert!(cell_receiving(fd.jam_density * 1.01, &fd, false).is_err());
    }

    #[test]
    fn bottleneck_examples() {
        let fd = mainline();
        let k_cb = fd.bottleneck_critical_density().unwrap();
        assert_relative_eq!(vehs_to_vehh(bottleneck_max_outflow(k_cb, &fd)), 4800.0, max_relative = 1e-9);
        assert_relative_eq!(
            vehs_to_vehh(bottleneck_max_outflow(fd.jam_density, &fd)),
            3360.0,
            max_relative = 1e-9
        );
        assert_relative_eq!(vehs_to_vehh(bottleneck_max_outflow(0.01, &fd)), 4800.0, max_relative = 1e-9);
    }

    #[test]
    fn bottleneck_is_non_increasing() {
        let fd = mainline();
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let k = fd.jam_density * i as f64 / 1000.0;
            let c = bottleneck_max_outflow(k, &fd);
            assert!(c <= prev + 1e-15);
            prev = c;
        }
    }

    #[test]
    fn speed_examples() {
        let fd = mainline();
        assert_eq!(cell_speed(0.0, &fd), fd.free_flow_speed);
        assert_relative_eq!(cell_speed(fd.critical_density(), &fd), fd.free_flow_speed, max_relative = 1e-12);
        assert_relative_eq!(ms_to_kmh(cell_speed(vehkm_to_vehm(300.0), &fd)), 5.0, max_relative = 1e-9);
        assert_eq!(cell_speed(fd.jam_density, &fd), 0.0);
    }

    fn vh(v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| vehh_to_vehs(x)).collect()
    }

    fn assert_vh(got: &[f64], want: &[f64]) {
        for (g, w) in got.iter().zip(want) {
            assert_relative_eq!(vehs_to_vehh(*g), *w, max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn ramp_and_mainline_flow_examples() {
        assert_vh(&on_ramp_flow(&vh(&[600.0, 600.0]), vehh_to_vehs(600.0)), &[300.0, 300.0]);
        assert_vh(&on_ramp_flow(&vh(&[400.0, 0.0]), vehh_to_vehs(1000.0)), &[400.0, 0.0]);
        assert_vh(&on_ramp_flow(&vh(&[900.0, 300.0]), vehh_to_vehs(800.0)), &[600.0, 200.0]);
        assert_vh(&mainline_flow(&vh(&[2000.0]), vehh_to_vehs(6000.0), 0.0), &[2000.0]);
        assert_vh(
            &mainline_flow(&vh(&[3000.0, 3000.0]), vehh_to_vehs(5000.0), vehh_to_vehs(1000.0)),
            &[2000.0, 2000.0],
        );
        assert_vh(&mainline_flow(&vh(&[1000.0]), vehh_to_vehs(900.0), vehh_to_vehs(900.0)), &[0.0]);
        assert_vh(&first_cell_inflow(&vh(&[1200.0]), vehh_to_vehs(6000.0)), &[1200.0]);
        assert_vh(
            &first_cell_inflow(&vh(&[500.0, 500.0, 1000.0]), vehh_to_vehs(1000.0)),
            &[250.0, 250.0, 500.0],
        );
        assert_eq!(first_cell_inflow(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    fn straight(cells: usize) -> Expressway {
        Expressway::new(
            mainline(),
            ramp(),
            ExpresswayTopology {
                cell_count: cells,
                cell_length: 500.0,
                on_ramps: vec![],
                off_ramps: vec![],
            },
            vec![LaneRoute { entry: Entry::Upstream, exit: Exit::Downstream }],
        )
        .unwrap()
    }

    #[test]
    fn empty_state_is_a_fixed_point() {
        let e = straight(4);
        let s = e.empty_state();
        let inputs = ExpresswayInputs {
            ramp_inflow: &[],
            metering: &[],
            exogenous_demand: &[0.0],
            off_ramp_supply: &[],
        };
        let (next, _) = e.step(&s, &inputs, 10.0).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn first_cell_fills_at_demand_rate() {
        let e = straight(3);
        let s = e.empty_state();
        let inputs = ExpresswayInputs {
            ramp_inflow: &[],
            metering: &[],
            exogenous_demand: &[vehh_to_vehs(1200.0)],
            off_ramp_supply: &[],
        };
        let (next, _) = e.step(&s, &inputs, 10.0).unwrap();
        assert_relative_eq!(next.cell(0)[0], 1200.0 / 3600.0 * 10.0 / 500.0, max_relative = 1e-12);
    }

    fn with_ramp() -> Expressway {
        Expressway::new(
            mainline(),
            ramp(),
            ExpresswayTopology {
                cell_count: 4,
                cell_length: 500.0,
                on_ramps: vec![RampAttachment { region: 0, cell: 2 }],
                off_ramps: vec![RampAttachment { region: 1, cell: 1 }],
            },
            vec![
                LaneRoute { entry: Entry::Upstream, exit: Exit::Downstream },
                LaneRoute { entry: Entry::Upstream, exit: Exit::OffRamp(0) },
                LaneRoute { entry: Entry::OnRamp(0), exit: Exit::Downstream },
            ],
        )
        .unwrap()
    }

    #[test]
    fn closed_meter_stores_everything_on_the_ramp() {
        let e = with_ramp();
        let mut s = e.empty_state();
        s.on_ramp_mut(0)[2] = 0.02;
        let inflow = [0.0, 0.0, vehh_to_vehs(600.0)];
        let inputs = ExpresswayInputs {
            ramp_inflow: &inflow,
            metering: &[0.0],
            exogenous_demand: &[0.0, 0.0, 0.0],
            off_ramp_supply: &[1.0],
        };
        let (next, flows) = e.step(&s, &inputs, 10.0).unwrap();
        assert_relative_eq!(
            next.on_ramp(0)[2] - 0.02,
            vehh_to_vehs(600.0) * 10.0 / 500.0,
            max_relative = 1e-12
        );
        assert_eq!(flows.on_ramp_discharge[2], 0.0);
    }

    #[test]
    fn topology_rules() {
        let bad = ExpresswayTopology {
            cell_count: 5,
            cell_length: 500.0,
            on_ramps: vec![RampAttachment { region: 0, cell: 1 }],
            off_ramps: vec![RampAttachment { region: 0, cell: 3 }],
        };
        assert!(bad.validate().is_err());
        let shared = ExpresswayTopology {
            cell_count: 5,
            cell_length: 500.0,
            on_ramps: vec![RampAttachment { region: 0, cell: 2 }],
            off_ramps: vec![RampAttachment { region: 1, cell: 2 }],
        };
        assert!(shared.validate().is_err());
        let outside = ExpresswayTopology {
            cell_count: 5,
            cell_length: 500.0,
            on_ramps: vec![RampAttachment { region: 0, cell: 5 }],
            off_ramps: vec![],
        };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn cfl_check() {
        let e = straight(3);
        assert!(e.check_time_step(10.0).is_ok());
        assert!(e.check_time_step(30.0).is_err());
    }

    #[test]
    fn diverge_blocks_fifo_when_off_ramp_is_full() {
        let e = with_ramp();
        let mut s = e.empty_state();
        s.cell_mut(1)[0] = 0.03;
        s.cell_mut(1)[1] = 0.03;
        // jammed off-ramp receives nothing, so the diverge cell cannot discharge
        s.off_ramp_mut(0)[1] = e.ramp_fd().jam_density;
        let inputs = ExpresswayInputs {
            ramp_inflow: &[0.0; 3],
            metering: &[1.0],
            exogenous_demand: &[0.0; 3],
            off_ramp_supply: &[0.0],
        };
        let (next, flows) = e.step(&s, &inputs, 10.0).unwrap();
        assert_eq!(flows.cell_outflow[1], 0.0);
        assert_eq!(next.cell(1), s.cell(1));
    }
}
