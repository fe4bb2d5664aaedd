//! The coupled plant: two subregions and two directed expressways exchanging
//! vehicles through boundaries and ramps, advanced synchronously.

use std::array;

use crate::ctm::{
    fifo_split_into, Expressway, ExpresswayFlows, ExpresswayInputs, ExpresswayState, ExpresswayTopology, ExpresswayWork,
    FundamentalDiagram,
};
use crate::demand::DemandProfile;
use crate::error::ModelError;
use crate::mfd::{
    completion_rates_into, limited_boundary_transfer_into, step_subregion_into, subregion_speed, CompletionRates, MfdParams,
    SubregionState, TripLengthTable,
};
use crate::routes::{
    assign_demand_into, blend_compliance, driver_splits, route_travel_times, Node, RouteChoiceParams, RouteSet,
    RouteSplit, SpeedSnapshot, EXPRESSWAYS, REGIONS,
};

/// Number of two-route choice sets (three OD classes per direction).
pub const CHOICE_SETS: usize = 6;

/// Soft penalty per vehicle above the jam accumulation per simulation step.
pub const JAM_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// Recommend exactly what drivers would choose anyway.
    FollowDriver,
    /// Recommended split of the primary route of each choice set.
    Splits([f64; CHOICE_SETS]),
}

/// Decision variables for one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlVector {
    pub guidance: Guidance,
    /// `u_12`, `u_21`: gating of the boundary flow leaving subregion 1 and 2.
    pub perimeter: [f64; REGIONS],
    /// `metering[d][r]`: metering rate of the on-ramp from subregion `r` onto expressway `d`.
    pub metering: [[f64; REGIONS]; EXPRESSWAYS],
}

impl ControlVector {
    /// No guidance and no control.
    pub const UNCONTROLLED: ControlVector = ControlVector {
        guidance: Guidance::FollowDriver,
        perimeter: [1.0; REGIONS],
        metering: [[1.0; REGIONS]; EXPRESSWAYS],
    };

    pub fn in_bounds(&self) -> bool {
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        let g = match &self.guidance {
            Guidance::FollowDriver => true,
            Guidance::Splits(s) => s.iter().all(unit),
        };
        g && self.perimeter.iter().all(unit) && self.metering.iter().flatten().all(unit)
    }
}

/// Where the exogenous demand of a route is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Region(usize),
    Expressway { expressway: usize, local: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub regions: [SubregionState; REGIONS],
    pub expressways: [ExpresswayState; EXPRESSWAYS],
    /// Exogenous subregion demand not yet admitted, per global route, veh.
    pub origin_queue: [Vec<f64>; REGIONS],
    /// Simulation step index.
    pub step: usize,
}

/// Vehicles present in each part of the network, veh.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleCount {
    pub regions: [f64; REGIONS],
    pub expressways: [f64; EXPRESSWAYS],
    pub upstream_queues: [f64; EXPRESSWAYS],
    pub origin_queues: [f64; REGIONS],
}

impl VehicleCount {
    pub fn on_network(&self) -> f64 {
        self.regions.iter().sum::<f64>() + self.expressways.iter().sum::<f64>()
    }

    pub fn total(&self) -> f64 {
        self.on_network() + self.upstream_queues.iter().sum::<f64>() + self.origin_queues.iter().sum::<f64>()
    }
}

/// Flows realized during one simulation step, veh/s.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub controls: ControlVector,
    pub realized_splits: [f64; CHOICE_SETS],
    /// Exogenous demand generated this step, summed over routes.
    pub generated: f64,
    pub region_demand_admitted: [f64; REGIONS],
    pub internal_completion: [f64; REGIONS],
    /// Boundary flow leaving each subregion.
    pub boundary_transfer: [f64; REGIONS],
    /// `[r][d]`: flow from subregion `r` into its on-ramp of expressway `d`.
    pub ramp_transfer: [[f64; EXPRESSWAYS]; REGIONS],
    /// `[d][r]`: metered discharge of the on-ramp from subregion `r`.
    pub on_ramp_discharge: [[f64; REGIONS]; EXPRESSWAYS],
    /// `[d][r]`: flow from the diverge cell into the off-ramp toward subregion `r`.
    pub off_ramp_diversion: [[f64; REGIONS]; EXPRESSWAYS],
    /// `[d][r]`: flow from the off-ramp into subregion `r`.
    pub off_ramp_arrival: [[f64; REGIONS]; EXPRESSWAYS],
    pub first_cell_inflow: [f64; EXPRESSWAYS],
    /// Flow leaving the last mainline cell.
    pub terminal_outflow: [f64; EXPRESSWAYS],
    pub cell_outflow: [Vec<f64>; EXPRESSWAYS],
}

impl StepRecord {
    /// Trip completion flow of a subregion: every MFD outflow (internal
    /// completions, boundary and on-ramp transfers).
    pub fn region_completion(&self, r: usize) -> f64 {
        self.internal_completion[r] + self.boundary_transfer[r] + self.ramp_transfer[r].iter().sum::<f64>()
    }

    /// Vehicles finishing their trip this step.
    pub fn completed(&self) -> f64 {
        self.internal_completion.iter().sum::<f64>() + self.terminal_outflow.iter().sum::<f64>()
    }
}

impl StepRecord {
    fn empty(controls: ControlVector) -> Self {
        StepRecord {
            step: 0,
            controls,
            realized_splits: [0.0; CHOICE_SETS],
            generated: 0.0,
            region_demand_admitted: [0.0; REGIONS],
            internal_completion: [0.0; REGIONS],
            boundary_transfer: [0.0; REGIONS],
            ramp_transfer: [[0.0; EXPRESSWAYS]; REGIONS],
            on_ramp_discharge: [[0.0; REGIONS]; EXPRESSWAYS],
            off_ramp_diversion: [[0.0; REGIONS]; EXPRESSWAYS],
            off_ramp_arrival: [[0.0; REGIONS]; EXPRESSWAYS],
            first_cell_inflow: [0.0; EXPRESSWAYS],
            terminal_outflow: [0.0; EXPRESSWAYS],
            cell_outflow: Default::default(),
        }
    }
}

/// Scratch buffers reused across [`NetworkModel::step_into`] calls.
#[derive(Debug, Clone, Default)]
pub struct StepWork {
    rates: [CompletionRates; REGIONS],
    boundary: [Vec<f64>; REGIONS],
    ramp_out: [Vec<f64>; REGIONS],
    ramp_inflow: [Vec<f64>; EXPRESSWAYS],
    exogenous: [Vec<f64>; EXPRESSWAYS],
    metering: [Vec<f64>; EXPRESSWAYS],
    off_supply: [Vec<f64>; EXPRESSWAYS],
    flows: [ExpresswayFlows; EXPRESSWAYS],
    expressway: [ExpresswayWork; EXPRESSWAYS],
    wanted: Vec<f64>,
    admitted: Vec<f64>,
    inflow: Vec<f64>,
    outflow: Vec<f64>,
    offered: Vec<f64>,
    exo: Vec<f64>,
    realized: Vec<f64>,
}

impl StepWork {
    fn resize(&mut self, model: &NetworkModel) {
        let n = model.routes.len();
        for v in [
            &mut self.wanted,
            &mut self.admitted,
            &mut self.inflow,
            &mut self.outflow,
            &mut self.offered,
            &mut self.exo,
            &mut self.realized,
        ] {
            v.resize(n, 0.0);
        }
        for r in 0..REGIONS {
            self.boundary[r].resize(n, 0.0);
            self.ramp_out[r].resize(n, 0.0);
        }
        for d in 0..EXPRESSWAYS {
            let e = &model.expressways[d];
            let rd = e.routes().len();
            self.ramp_inflow[d].resize(e.topology().on_ramps.len() * rd, 0.0);
            self.exogenous[d].resize(rd, 0.0);
            self.metering[d].resize(e.topology().on_ramps.len(), 1.0);
            self.off_supply[d].resize(e.topology().off_ramps.len(), 0.0);
        }
    }
}

/// States at the start of every step plus the final state, and the flows of
/// every step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<NetworkState>,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub state: NetworkState,
    /// Total time spent over the rolled-out steps, veh s.
    pub tts: f64,
    /// Penalty for accumulations above the jam accumulation.
    pub penalty: f64,
    /// Splits in force at the end of the rollout.
    pub splits: RouteSplit,
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub expressways: [Expressway; EXPRESSWAYS],
    pub mfd: [MfdParams; REGIONS],
    pub trip_lengths: [TripLengthTable; REGIONS],
    pub choice: RouteChoiceParams,
    pub routes: RouteSet,
    pub sim_step: f64,
    pub steps_per_control: usize,
    origin: Vec<Origin>,
    local: [Vec<Option<usize>>; EXPRESSWAYS],
    on_slot: [[usize; REGIONS]; EXPRESSWAYS],
    off_slot: [[usize; REGIONS]; EXPRESSWAYS],
}

impl NetworkModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mainline: FundamentalDiagram,
        ramp: FundamentalDiagram,
        topologies: [ExpresswayTopology; EXPRESSWAYS],
        mfd: [MfdParams; REGIONS],
        trip_lengths: [TripLengthTable; REGIONS],
        choice: RouteChoiceParams,
        sim_step: f64,
        control_step: f64,
    ) -> Result<Self, ModelError> {
        for p in &mfd {
            p.validate()?;
        }
        for t in &trip_lengths {
            t.validate()?;
        }
        choice.validate()?;
        if !(sim_step.is_finite() && sim_step > 0.0) {
            return Err(ModelError::param("sim_step", "must be finite and > 0"));
        }
        let ratio = control_step / sim_step;
        if !(ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return Err(ModelError::param("control_step", "control_step must be a multiple of sim_step"));
        }
        let routes = RouteSet::enumerate(&topologies)?;
        if routes.choice_sets.len() != CHOICE_SETS {
            return Err(ModelError::Dimension {
                what: "choice sets",
                expected: CHOICE_SETS,
                got: routes.choice_sets.len(),
            });
        }
        let mut on_slot = [[0; REGIONS]; EXPRESSWAYS];
        let mut off_slot = [[0; REGIONS]; EXPRESSWAYS];
        for (d, topo) in topologies.iter().enumerate() {
            for r in 0..REGIONS {
                on_slot[d][r] = topo.on_ramps.iter().position(|a| a.region == r).unwrap();
                off_slot[d][r] = topo.off_ramps.iter().position(|a| a.region == r).unwrap();
            }
        }
        let mut local: [Vec<Option<usize>>; EXPRESSWAYS] = Default::default();
        for (d, map) in local.iter_mut().enumerate() {
            *map = vec![None; routes.len()];
            for (l, &y) in routes.expressway_routes(d).iter().enumerate() {
                map[y] = Some(l);
            }
        }
        let origin = routes
            .routes
            .iter()
            .map(|route| match route.nodes[0] {
                Node::Region(r) => Origin::Region(r),
                Node::Expressway(d) => Origin::Expressway {
                    expressway: d,
                    local: local[d][route.id].unwrap(),
                },
            })
            .collect();
        let [t0, t1] = topologies;
        let expressways = [
            Expressway::new(mainline, ramp, t0, routes.expressway_lanes(0).to_vec())?,
            Expressway::new(mainline, ramp, t1, routes.expressway_lanes(1).to_vec())?,
        ];
        for e in &expressways {
            e.check_time_step(sim_step)?;
        }
        Ok(NetworkModel {
            expressways,
            mfd,
            trip_lengths,
            choice,
            routes,
            sim_step,
            steps_per_control: ratio.round() as usize,
            origin,
            local,
            on_slot,
            off_slot,
        })
    }

    pub fn control_step(&self) -> f64 {
        self.sim_step * self.steps_per_control as f64
    }

    pub fn empty_state(&self) -> NetworkState {
        let n = self.routes.len();
        NetworkState {
            regions: [SubregionState::empty(n), SubregionState::empty(n)],
            expressways: [self.expressways[0].empty_state(), self.expressways[1].empty_state()],
            origin_queue: [vec![0.0; n], vec![0.0; n]],
            step: 0,
        }
    }

    /// Local index of a global route on an expressway.
    pub fn local_route(&self, expressway: usize, route: usize) -> Option<usize> {
        self.local[expressway][route]
    }

    pub fn on_ramp_slot(&self, expressway: usize, region: usize) -> usize {
        self.on_slot[expressway][region]
    }

    pub fn off_ramp_slot(&self, expressway: usize, region: usize) -> usize {
        self.off_slot[expressway][region]
    }

    pub fn check_state(&self, state: &NetworkState) -> Result<(), ModelError> {
        for r in 0..REGIONS {
            state.regions[r].check(r, &self.mfd[r])?;
            for &q in &state.origin_queue[r] {
                if q < 0.0 || !q.is_finite() {
                    return Err(ModelError::NegativeState {
                        location: format!("origin queue of subregion {}", r + 1),
                        value: q,
                    });
                }
            }
        }
        for d in 0..EXPRESSWAYS {
            self.expressways[d].check_state(&state.expressways[d])?;
        }
        Ok(())
    }

    pub fn vehicles(&self, state: &NetworkState) -> VehicleCount {
        VehicleCount {
            regions: array::from_fn(|r| state.regions[r].total()),
            expressways: array::from_fn(|d| {
                state.expressways[d].vehicles_on_road(self.expressways[d].cell_length())
            }),
            upstream_queues: array::from_fn(|d| state.expressways[d].queued_vehicles()),
            origin_queues: array::from_fn(|r| state.origin_queue[r].iter().sum()),
        }
    }

    pub fn snapshot(&self, state: &NetworkState) -> SpeedSnapshot {
        let exp = &self.expressways;
        let ramp_speeds = |d: usize, on: bool| -> Vec<f64> {
            let topo = exp[d].topology();
            let slots = if on { topo.on_ramps.len() } else { topo.off_ramps.len() };
            (0..slots)
                .map(|s| {
                    if on {
                        exp[d].on_ramp_speed(&state.expressways[d], s)
                    } else {
                        exp[d].off_ramp_speed(&state.expressways[d], s)
                    }
                })
                .collect()
        };
        SpeedSnapshot {
            region_speed: array::from_fn(|r| subregion_speed(state.regions[r].total(), &self.mfd[r])),
            trip_lengths: self.trip_lengths,
            cell_speeds: array::from_fn(|d| exp[d].cell_speeds(&state.expressways[d])),
            on_ramp_speed: array::from_fn(|d| ramp_speeds(d, true)),
            off_ramp_speed: array::from_fn(|d| ramp_speeds(d, false)),
            cell_length: array::from_fn(|d| exp[d].cell_length()),
        }
    }

    /// Driver, guidance and realized splits in the given state.
    pub fn splits(&self, state: &NetworkState, guidance: &Guidance, compliance: f64) -> RouteSplit {
        let times = route_travel_times(&self.routes, &self.snapshot(state));
        let driver = driver_splits(&self.routes, &times, &self.choice);
        let guidance = match guidance {
            Guidance::FollowDriver => driver.clone(),
            Guidance::Splits(s) => s.to_vec(),
        };
        let realized = driver
            .iter()
            .zip(&guidance)
            .map(|(&d, &g)| blend_compliance(d, g, compliance))
            .collect();
        RouteSplit {
            driver,
            guidance,
            realized,
        }
    }

    /// Advances the network by one simulation step. `route_demand` is the
    /// exogenous demand already assigned to routes, veh/s. Only the flow
    /// controls of `controls` are used here; guidance acts through the
    /// assignment.
    pub fn step(
        &self,
        state: &NetworkState,
        controls: &ControlVector,
        route_demand: &[f64],
    ) -> Result<(NetworkState, StepRecord), ModelError> {
        let mut next = state.clone();
        let mut record = StepRecord::empty(*controls);
        let mut work = StepWork::default();
        self.step_into(state, controls, route_demand, &mut next, &mut record, &mut work)?;
        Ok((next, record))
    }

    /// [`NetworkModel::step`] writing into caller-owned buffers. `next` must
    /// have the shape of `state`.
    pub fn step_into(
        &self,
        state: &NetworkState,
        controls: &ControlVector,
        route_demand: &[f64],
        next: &mut NetworkState,
        record: &mut StepRecord,
        work: &mut StepWork,
    ) -> Result<(), ModelError> {
        let dt = self.sim_step;
        let n = self.routes.len();
        if route_demand.len() != n {
            return Err(ModelError::Dimension {
                what: "route demand",
                expected: n,
                got: route_demand.len(),
            });
        }
        work.resize(self);
        let w = work;

        // Outflow demands of the subregions, cut so no route empties below zero.
        let mut totals = [0.0; REGIONS];
        for r in 0..REGIONS {
            let region = &state.regions[r];
            totals[r] = region.total();
            let rates = &mut w.rates[r];
            completion_rates_into(region, &self.mfd[r], &self.trip_lengths[r], self.routes.region_classes(r), rates);
            for y in 0..n {
                let cap = region.accumulation[y] / dt;
                rates.internal[y] = rates.internal[y].min(cap);
                rates.boundary[y] = rates.boundary[y].min(cap);
                rates.to_expressway[y] = rates.to_expressway[y].min(cap);
            }
        }
        for r in 0..REGIONS {
            let other = 1 - r;
            limited_boundary_transfer_into(
                &w.rates[r].boundary,
                controls.perimeter[r],
                totals[other],
                &self.mfd[other],
                &mut w.boundary[r],
            );
        }

        // Subregion -> on-ramp transfers.
        let mut record_ramp = [[0.0; EXPRESSWAYS]; REGIONS];
        for r in 0..REGIONS {
            w.ramp_out[r].iter_mut().for_each(|x| *x = 0.0);
        }
        for d in 0..EXPRESSWAYS {
            w.ramp_inflow[d].iter_mut().for_each(|x| *x = 0.0);
            let rd = self.expressways[d].routes().len();
            for r in 0..REGIONS {
                let targets = self.routes.region_on_ramp(r);
                for y in 0..n {
                    w.wanted[y] = if targets[y] == Some(d) { w.rates[r].to_expressway[y] } else { 0.0 };
                }
                let slot = self.on_slot[d][r];
                let receiving = self.expressways[d].on_ramp_receiving(&state.expressways[d], slot);
                fifo_split_into(&w.wanted, receiving, &mut w.admitted);
                for y in 0..n {
                    let a = w.admitted[y];
                    if a > 0.0 {
                        w.ramp_out[r][y] += a;
                        let l = self.local[d][y].expect("route on expressway");
                        w.ramp_inflow[d][slot * rd + l] = a;
                        record_ramp[r][d] += a;
                    }
                }
            }
        }

        // Expressways.
        let supply: [f64; REGIONS] = array::from_fn(|r| self.mfd[r].receiving_supply(totals[r]));
        for d in 0..EXPRESSWAYS {
            let e = &self.expressways[d];
            let topo = e.topology();
            w.exogenous[d].iter_mut().for_each(|x| *x = 0.0);
            for (y, origin) in self.origin.iter().enumerate() {
                if let Origin::Expressway { expressway, local } = *origin {
                    if expressway == d {
                        w.exogenous[d][local] = route_demand[y];
                    }
                }
            }
            for (s, ramp) in topo.on_ramps.iter().enumerate() {
                w.metering[d][s] = controls.metering[d][ramp.region];
            }
            for (s, ramp) in topo.off_ramps.iter().enumerate() {
                w.off_supply[d][s] = supply[ramp.region];
            }
            let inputs = ExpresswayInputs {
                ramp_inflow: &w.ramp_inflow[d],
                metering: &w.metering[d],
                exogenous_demand: &w.exogenous[d],
                off_ramp_supply: &w.off_supply[d],
            };
            e.step_into(
                &state.expressways[d],
                &inputs,
                dt,
                &mut next.expressways[d],
                &mut w.flows[d],
                &mut w.expressway[d],
            )?;
        }

        // Subregion updates.
        let mut off_arrival = [[0.0; REGIONS]; EXPRESSWAYS];
        for r in 0..REGIONS {
            let other = 1 - r;
            for y in 0..n {
                w.inflow[y] = w.boundary[other][y];
                w.outflow[y] = w.boundary[r][y] + w.ramp_out[r][y];
            }
            for d in 0..EXPRESSWAYS {
                let rd = self.expressways[d].routes().len();
                let slot = self.off_slot[d][r];
                for (&y, l) in self.routes.expressway_routes(d).iter().zip(0..) {
                    let q = w.flows[d].off_ramp_outflow[slot * rd + l];
                    w.inflow[y] += q;
                    off_arrival[d][r] += q;
                }
            }
            let net: f64 = w.inflow.iter().sum::<f64>()
                - w.outflow.iter().sum::<f64>()
                - w.rates[r].internal.iter().sum::<f64>();
            let room = ((self.mfd[r].jam_accumulation - (totals[r] + dt * net)) / dt).max(0.0);
            for y in 0..n {
                w.offered[y] = if self.origin[y] == Origin::Region(r) {
                    route_demand[y] + state.origin_queue[r][y] / dt
                } else {
                    0.0
                };
            }
            fifo_split_into(&w.offered, room, &mut w.exo);
            next.origin_queue[r].resize(n, 0.0);
            for y in 0..n {
                w.inflow[y] += w.exo[y];
                next.origin_queue[r][y] = if self.origin[y] == Origin::Region(r) {
                    (state.origin_queue[r][y] + dt * (route_demand[y] - w.exo[y])).max(0.0)
                } else {
                    state.origin_queue[r][y]
                };
            }
            record.region_demand_admitted[r] = w.exo.iter().sum();
            record.internal_completion[r] = w.rates[r].internal.iter().sum();
            record.boundary_transfer[r] = w.boundary[r].iter().sum();
            step_subregion_into(
                &state.regions[r],
                &w.inflow,
                &w.outflow,
                &w.rates[r].internal,
                dt,
                &mut next.regions[r],
                &mut w.realized,
            );
        }
        next.step = state.step + 1;

        for d in 0..EXPRESSWAYS {
            let rd = self.expressways[d].routes().len();
            let f = &w.flows[d];
            for r in 0..REGIONS {
                let s_on = self.on_slot[d][r];
                let s_off = self.off_slot[d][r];
                record.on_ramp_discharge[d][r] = f.on_ramp_discharge[s_on * rd..(s_on + 1) * rd].iter().sum();
                record.off_ramp_diversion[d][r] = f.off_ramp_diversion[s_off * rd..(s_off + 1) * rd].iter().sum();
            }
            record.first_cell_inflow[d] = f.first_cell_inflow.iter().sum();
            record.terminal_outflow[d] = f.terminal_outflow.iter().sum();
            record.cell_outflow[d].clear();
            record.cell_outflow[d].extend_from_slice(&f.cell_outflow);
        }
        record.step = state.step;
        record.controls = *controls;
        record.generated = route_demand.iter().sum();
        record.ramp_transfer = record_ramp;
        record.off_ramp_arrival = off_arrival;
        Ok(())
    }

    /// Simulates `n_steps` steps from `state`. `controls` holds one vector per
    /// control step, the last one held for the rest of the rollout. Splits are
    /// recomputed at the start and at every control-step boundary.
    pub fn rollout(
        &self,
        state: &NetworkState,
        controls: &[ControlVector],
        demand: &DemandProfile,
        n_steps: usize,
        compliance: f64,
        record: bool,
    ) -> Result<Rollout, ModelError> {
        assert!(!controls.is_empty(), "rollout needs at least one control vector");
        let dt = self.sim_step;
        let mut current = state.clone();
        let mut trajectory = record.then(|| Trajectory {
            states: Vec::with_capacity(n_steps + 1),
            records: Vec::with_capacity(n_steps),
        });
        let mut slot = 0;
        let mut splits = self.splits(&current, &controls[0].guidance, compliance);
        let mut od = vec![0.0; self.routes.ods.len()];
        let mut q = vec![0.0; self.routes.len()];
        let mut tts = 0.0;
        let mut penalty = 0.0;
        let mut next = current.clone();
        let mut rec = StepRecord::empty(controls[0]);
        let mut work = StepWork::default();
        for j in 0..n_steps {
            if j > 0 && current.step.is_multiple_of(self.steps_per_control) {
                slot = (slot + 1).min(controls.len() - 1);
                splits = self.splits(&current, &controls[slot].guidance, compliance);
            }
            let count = self.vehicles(&current);
            tts += dt * count.total();
            for r in 0..REGIONS {
                penalty += JAM_PENALTY * (count.regions[r] - self.mfd[r].jam_accumulation).max(0.0);
            }
            demand.at_into(current.step as f64 * dt, &mut od);
            assign_demand_into(&self.routes, &od, &splits.realized, &mut q);
            self.step_into(&current, &controls[slot], &q, &mut next, &mut rec, &mut work)?;
            if let Some(t) = trajectory.as_mut() {
                rec.realized_splits.copy_from_slice(&splits.realized);
                t.states.push(current.clone());
                t.records.push(rec.clone());
            }
            std::mem::swap(&mut current, &mut next);
        }
        if let Some(t) = trajectory.as_mut() {
            t.states.push(current.clone());
        }
        Ok(Rollout {
            state: current,
            tts,
            penalty,
            splits,
            trajectory,
        })
    }
}

/// Total time spent `sum_k dt * (vehicles present at the start of step k)`,
/// counting both subregions, all mainline and ramp cells, and the queues.
pub fn total_time_spent(model: &NetworkModel, states: &[NetworkState]) -> f64 {
    states
        .iter()
        .map(|s| model.sim_step * model.vehicles(s).total())
        .sum()
}
