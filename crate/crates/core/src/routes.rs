//! Route set of the two-subregion network, route travel times from the current
//! traffic state, logit route choice and guidance compliance.

use std::fmt;

use crate::ctm::{Entry, Exit, ExpresswayTopology, LaneRoute};
use crate::error::ModelError;
use crate::mfd::{PathClass, TripLengthTable};

pub const REGIONS: usize = 2;
pub const EXPRESSWAYS: usize = 2;

/// Speed floor used when converting speeds to travel times, m/s.
pub const SPEED_FLOOR: f64 = 0.1;

/// A subregion or a directed expressway. Expressway `d` runs from subregion
/// `d` to subregion `1 - d`, so index 0 is E12 and index 1 is E21.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Region(usize),
    Expressway(usize),
}

impl Node {
    pub fn parse(s: &str) -> Option<Node> {
        match s {
            "1" => Some(Node::Region(0)),
            "2" => Some(Node::Region(1)),
            "E12" => Some(Node::Expressway(0)),
            "E21" => Some(Node::Expressway(1)),
            _ => None,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Region(r) => write!(f, "{}", r + 1),
            Node::Expressway(0) => write!(f, "E12"),
            Node::Expressway(_) => write!(f, "E21"),
        }
    }
}

/// Origin-destination class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Od {
    pub origin: Node,
    pub destination: Node,
}

impl Od {
    pub fn new(origin: Node, destination: Node) -> Self {
        Od { origin, destination }
    }

    /// Parses names like `1-2`, `1-E12`, `E21-E21`.
    pub fn parse(s: &str) -> Option<Od> {
        let (o, d) = s.split_once('-')?;
        Some(Od::new(Node::parse(o)?, Node::parse(d)?))
    }

    /// Table order: for each direction `i -> j`, the OD classes
    /// (i,i), (i,j), (i,E_ij), (i,E_ji), (E_ij,i), (E_ij,j), (E_ij,E_ij).
    pub fn canonical() -> Vec<Od> {
        let mut out = Vec::with_capacity(14);
        for i in 0..REGIONS {
            let j = 1 - i;
            let e_ij = Node::Expressway(i);
            let e_ji = Node::Expressway(j);
            let (ri, rj) = (Node::Region(i), Node::Region(j));
            out.extend([
                Od::new(ri, ri),
                Od::new(ri, rj),
                Od::new(ri, e_ij),
                Od::new(ri, e_ji),
                Od::new(e_ij, ri),
                Od::new(e_ij, rj),
                Od::new(e_ij, e_ij),
            ]);
        }
        out
    }
}

impl fmt::Display for Od {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.origin, self.destination)
    }
}

/// One part of a route inside a subregion or on an expressway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    Region {
        region: usize,
        class: PathClass,
        /// Expressway entered at the end of this leg, if any.
        on_ramp_of: Option<usize>,
    },
    Expressway {
        expressway: usize,
        lane: LaneRoute,
        first_cell: usize,
        last_cell: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub id: usize,
    pub od: Od,
    pub nodes: Vec<Node>,
    pub legs: Vec<Leg>,
}

impl Route {
    /// Node sequence such as `1>E12>2`. A single expressway node is written
    /// `E12>E12` (enter upstream, leave downstream).
    pub fn name(&self) -> String {
        let mut parts: Vec<String> = self.nodes.iter().map(|n| n.to_string()).collect();
        if self.nodes.len() == 1 && matches!(self.nodes[0], Node::Expressway(_)) {
            parts.push(parts[0].clone());
        }
        parts.join(">")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdRoutes {
    pub od: Od,
    pub routes: Vec<usize>,
}

/// An OD class with two alternative routes. Guidance and choice splits refer
/// to the `primary` route (the one with fewer nodes); the alternative gets the
/// complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChoiceSet {
    pub od_index: usize,
    pub primary: usize,
    pub alternative: usize,
}

/// All routes of the network together with per-subregion and per-expressway
/// views used by the simulator.
#[derive(Debug, Clone)]
pub struct RouteSet {
    pub routes: Vec<Route>,
    pub ods: Vec<OdRoutes>,
    pub choice_sets: Vec<ChoiceSet>,
    region_classes: [Vec<Option<PathClass>>; REGIONS],
    region_on_ramp: [Vec<Option<usize>>; REGIONS],
    expressway_routes: [Vec<usize>; EXPRESSWAYS],
    expressway_lanes: [Vec<LaneRoute>; EXPRESSWAYS],
}

fn slot_of(ramps: &[crate::ctm::RampAttachment], region: usize) -> Option<usize> {
    ramps.iter().position(|r| r.region == region)
}

impl RouteSet {
    /// Enumerates every route allowed by the network assumptions: an
    /// expressway is used at most once, no subregion is visited twice (an
    /// expressway visits the subregions whose ramps lie on the traversed span),
    /// and on an expressway vehicles only move downstream.
    pub fn enumerate(topologies: &[ExpresswayTopology; EXPRESSWAYS]) -> Result<Self, ModelError> {
        for (d, topo) in topologies.iter().enumerate() {
            for r in 0..REGIONS {
                if slot_of(&topo.on_ramps, r).is_none() || slot_of(&topo.off_ramps, r).is_none() {
                    return Err(ModelError::param(
                        "expressways",
                        format!(
                            "{} needs one on-ramp and one off-ramp in subregion {}",
                            Node::Expressway(d),
                            r + 1
                        ),
                    ));
                }
            }
        }
        let mut routes = Vec::new();
        let mut ods = Vec::new();
        for od in Od::canonical() {
            let mut found = Vec::new();
            let mut seq = vec![od.origin];
            search(topologies, od, &mut seq, &mut found);
            found.sort_by_key(|nodes: &Vec<Node>| nodes.len());
            let mut ids = Vec::new();
            for nodes in found {
                let id = routes.len();
                let legs = build_legs(topologies, &nodes, od);
                routes.push(Route { id, od, nodes, legs });
                ids.push(id);
            }
            if ids.is_empty() || ids.len() > 2 {
                return Err(ModelError::param(
                    "routes",
                    format!("OD {od} has {} routes, expected 1 or 2", ids.len()),
                ));
            }
            ods.push(OdRoutes { od, routes: ids });
        }
        let choice_sets = ods
            .iter()
            .enumerate()
            .filter(|(_, o)| o.routes.len() == 2)
            .map(|(i, o)| ChoiceSet {
                od_index: i,
                primary: o.routes[0],
                alternative: o.routes[1],
            })
            .collect();

        let n = routes.len();
        let mut region_classes = [vec![None; n], vec![None; n]];
        let mut region_on_ramp = [vec![None; n], vec![None; n]];
        let mut expressway_routes: [Vec<usize>; EXPRESSWAYS] = Default::default();
        let mut expressway_lanes: [Vec<LaneRoute>; EXPRESSWAYS] = Default::default();
        for route in &routes {
            for leg in &route.legs {
                match *leg {
                    Leg::Region { region, class, on_ramp_of } => {
                        region_classes[region][route.id] = Some(class);
                        region_on_ramp[region][route.id] = on_ramp_of;
                    }
                    Leg::Expressway { expressway, lane, .. } => {
                        expressway_routes[expressway].push(route.id);
                        expressway_lanes[expressway].push(lane);
                    }
                }
            }
        }
        Ok(RouteSet {
            routes,
            ods,
            choice_sets,
            region_classes,
            region_on_ramp,
            expressway_routes,
            expressway_lanes,
        })
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Path class of every route inside a subregion (`None` if it never enters).
    pub fn region_classes(&self, region: usize) -> &[Option<PathClass>] {
        &self.region_classes[region]
    }

    /// For routes leaving a subregion by on-ramp: the expressway entered.
    pub fn region_on_ramp(&self, region: usize) -> &[Option<usize>] {
        &self.region_on_ramp[region]
    }

    /// Global route ids using an expressway, in local (lane) order.
    pub fn expressway_routes(&self, expressway: usize) -> &[usize] {
        &self.expressway_routes[expressway]
    }

    pub fn expressway_lanes(&self, expressway: usize) -> &[LaneRoute] {
        &self.expressway_lanes[expressway]
    }

    pub fn od_index(&self, od: Od) -> Option<usize> {
        self.ods.iter().position(|o| o.od == od)
    }

    pub fn by_name(&self, name: &str) -> Option<&Route> {
        self.routes.iter().find(|r| r.name() == name)
    }
}

fn span_regions(topo: &ExpresswayTopology, first: usize, last: usize) -> Vec<usize> {
    let mut ramps: Vec<(usize, usize)> = topo
        .on_ramps
        .iter()
        .chain(&topo.off_ramps)
        .filter(|r| r.cell >= first && r.cell <= last)
        .map(|r| (r.cell, r.region))
        .collect();
    ramps.sort();
    ramps.into_iter().map(|(_, region)| region).collect()
}

fn expressway_span(topologies: &[ExpresswayTopology; EXPRESSWAYS], nodes: &[Node], at: usize) -> (usize, usize) {
    let Node::Expressway(d) = nodes[at] else {
        unreachable!("span of a region node")
    };
    let topo = &topologies[d];
    let first = match at.checked_sub(1).map(|p| nodes[p]) {
        Some(Node::Region(r)) => topo.on_ramps[slot_of(&topo.on_ramps, r).unwrap()].cell,
        _ => 0,
    };
    let last = match nodes.get(at + 1) {
        Some(Node::Region(r)) => topo.off_ramps[slot_of(&topo.off_ramps, *r).unwrap()].cell,
        _ => topo.cell_count - 1,
    };
    (first, last)
}

fn visits_no_region_twice(topologies: &[ExpresswayTopology; EXPRESSWAYS], nodes: &[Node]) -> bool {
    let mut order: Vec<usize> = Vec::new();
    for (at, node) in nodes.iter().enumerate() {
        let visited = match *node {
            Node::Region(r) => vec![r],
            Node::Expressway(d) => {
                let (first, last) = expressway_span(topologies, nodes, at);
                span_regions(&topologies[d], first, last)
            }
        };
        for r in visited {
            if order.last() != Some(&r) {
                order.push(r);
            }
        }
    }
    let mut seen = [false; REGIONS];
    for r in order {
        if seen[r] {
            return false;
        }
        seen[r] = true;
    }
    true
}

fn search(
    topologies: &[ExpresswayTopology; EXPRESSWAYS],
    od: Od,
    seq: &mut Vec<Node>,
    found: &mut Vec<Vec<Node>>,
) {
    let last = *seq.last().unwrap();
    if last == od.destination {
        if visits_no_region_twice(topologies, seq) {
            found.push(seq.clone());
        }
        return;
    }
    let used_expressway = seq.iter().any(|n| matches!(n, Node::Expressway(_)));
    let mut next = Vec::new();
    match last {
        Node::Region(r) => {
            if !seq.contains(&Node::Region(1 - r)) {
                next.push(Node::Region(1 - r));
            }
            if !used_expressway {
                for d in 0..EXPRESSWAYS {
                    next.push(Node::Expressway(d));
                }
            }
        }
        Node::Expressway(d) => {
            // entering cell of this expressway
            let topo = &topologies[d];
            let entry = match seq.len().checked_sub(2).map(|p| seq[p]) {
                Some(Node::Region(r)) => topo.on_ramps[slot_of(&topo.on_ramps, r).unwrap()].cell,
                _ => 0,
            };
            for r in 0..REGIONS {
                let off = topo.off_ramps[slot_of(&topo.off_ramps, r).unwrap()].cell;
                if off >= entry && !seq.contains(&Node::Region(r)) {
                    next.push(Node::Region(r));
                }
            }
        }
    }
    for node in next {
        seq.push(node);
        if visits_no_region_twice(topologies, seq) {
            search(topologies, od, seq, found);
        }
        seq.pop();
    }
}

fn build_legs(topologies: &[ExpresswayTopology; EXPRESSWAYS], nodes: &[Node], _od: Od) -> Vec<Leg> {
    let mut legs = Vec::with_capacity(nodes.len());
    for (at, node) in nodes.iter().enumerate() {
        let prev = at.checked_sub(1).map(|p| nodes[p]);
        let next = nodes.get(at + 1).copied();
        match *node {
            Node::Region(region) => {
                let class = match (prev, next) {
                    (None, None) => PathClass::OriginToDestination,
                    (None, Some(Node::Region(_))) => PathClass::OriginToBoundary,
                    (None, Some(Node::Expressway(_))) => PathClass::OriginToOnRamp,
                    (Some(Node::Region(_)), None) => PathClass::BoundaryToDestination,
                    (Some(Node::Region(_)), Some(Node::Expressway(_))) => PathClass::BoundaryToOnRamp,
                    (Some(Node::Expressway(_)), None) => PathClass::OffRampToDestination,
                    (Some(Node::Expressway(_)), Some(Node::Region(_))) => PathClass::OffRampToBoundary,
                    _ => unreachable!("route violates the single-expressway rule"),
                };
                let on_ramp_of = match next {
                    Some(Node::Expressway(d)) => Some(d),
                    _ => None,
                };
                legs.push(Leg::Region { region, class, on_ramp_of });
            }
            Node::Expressway(d) => {
                let topo = &topologies[d];
                let entry = match prev {
                    Some(Node::Region(r)) => Entry::OnRamp(slot_of(&topo.on_ramps, r).unwrap()),
                    _ => Entry::Upstream,
                };
                let exit = match next {
                    Some(Node::Region(r)) => Exit::OffRamp(slot_of(&topo.off_ramps, r).unwrap()),
                    _ => Exit::Downstream,
                };
                let (first_cell, last_cell) = expressway_span(topologies, nodes, at);
                legs.push(Leg::Expressway {
                    expressway: d,
                    lane: LaneRoute { entry, exit },
                    first_cell,
                    last_cell,
                });
            }
        }
    }
    legs
}

/// Speeds needed for travel-time estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSnapshot {
    pub region_speed: [f64; REGIONS],
    pub trip_lengths: [TripLengthTable; REGIONS],
    pub cell_speeds: [Vec<f64>; EXPRESSWAYS],
    /// Indexed by ramp slot.
    pub on_ramp_speed: [Vec<f64>; EXPRESSWAYS],
    pub off_ramp_speed: [Vec<f64>; EXPRESSWAYS],
    pub cell_length: [f64; EXPRESSWAYS],
}

/// Travel time of every route, s. Subregion legs take `ATL / v(n)`, ramps
/// `L_s / V` and mainline spans the sum of per-cell times `L_s / V_l` over the
/// cells traversed. Speeds are floored at [`SPEED_FLOOR`]. A subregion leg
/// from an off-ramp straight to the destination adds no time.
pub fn route_travel_times(routes: &RouteSet, snapshot: &SpeedSnapshot) -> Vec<f64> {
    routes
        .routes
        .iter()
        .map(|route| {
            route
                .legs
                .iter()
                .map(|leg| leg_time(leg, snapshot))
                .sum()
        })
        .collect()
}

fn leg_time(leg: &Leg, s: &SpeedSnapshot) -> f64 {
    match *leg {
        Leg::Region {
            class: PathClass::OffRampToDestination,
            ..
        } => 0.0,
        Leg::Region { region, class, .. } => {
            s.trip_lengths[region].get(class) / s.region_speed[region].max(SPEED_FLOOR)
        }
        Leg::Expressway {
            expressway: d,
            lane,
            first_cell,
            last_cell,
        } => {
            let ls = s.cell_length[d];
            let mut t: f64 = s.cell_speeds[d][first_cell..=last_cell]
                .iter()
                .map(|&v| ls / v.max(SPEED_FLOOR))
                .sum();
            if let Entry::OnRamp(slot) = lane.entry {
                t += ls / s.on_ramp_speed[d][slot].max(SPEED_FLOOR);
            }
            if let Exit::OffRamp(slot) = lane.exit {
                t += ls / s.off_ramp_speed[d][slot].max(SPEED_FLOOR);
            }
            t
        }
    }
}

/// Logit sensitivity and compliance with guidance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteChoiceParams {
    /// Per `time_unit` seconds.
    pub logit_sensitivity: f64,
    /// Fraction of drivers following guidance, in `[0, 1]`.
    pub compliance: f64,
    /// Length of the time unit the sensitivity refers to, s.
    pub time_unit: f64,
}

impl RouteChoiceParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.logit_sensitivity.is_finite() && self.logit_sensitivity >= 0.0) {
            return Err(ModelError::param("logit_sensitivity", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.compliance) {
            return Err(ModelError::param("compliance", "must lie in [0, 1]"));
        }
        if !(self.time_unit.is_finite() && self.time_unit > 0.0) {
            return Err(ModelError::param("time_unit", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Probability of choosing route `a` over route `b`.
pub fn logit_split(time_a: f64, time_b: f64, params: &RouteChoiceParams) -> f64 {
    let mu = params.logit_sensitivity / params.time_unit;
    let a = -mu * time_a;
    let b = -mu * time_b;
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    ea / (ea + eb)
}

/// Realized split: the driver split moved toward the guidance split by the
/// compliance rate.
pub fn blend_compliance(driver: f64, guidance: f64, compliance: f64) -> f64 {
    (driver + compliance * (guidance - driver)).clamp(0.0, 1.0)
}

/// Driver, guidance and realized splits of the primary route of each choice set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouteSplit {
    pub driver: Vec<f64>,
    pub guidance: Vec<f64>,
    pub realized: Vec<f64>,
}

/// Driver splits of every choice set from route travel times.
pub fn driver_splits(routes: &RouteSet, times: &[f64], params: &RouteChoiceParams) -> Vec<f64> {
    routes
        .choice_sets
        .iter()
        .map(|c| logit_split(times[c.primary], times[c.alternative], params))
        .collect()
}

/// Splits OD demand onto routes. Single-route ODs pass through; two-route ODs
/// use the realized split of their choice set.
pub fn assign_demand(routes: &RouteSet, od_demand: &[f64], realized: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; routes.len()];
    assign_demand_into(routes, od_demand, realized, &mut q);
    q
}

pub(crate) fn assign_demand_into(routes: &RouteSet, od_demand: &[f64], realized: &[f64], q: &mut [f64]) {
    q.iter_mut().for_each(|x| *x = 0.0);
    for (o, entry) in routes.ods.iter().enumerate() {
        if entry.routes.len() == 1 {
            q[entry.routes[0]] = od_demand[o];
        }
    }
    for (c, set) in routes.choice_sets.iter().enumerate() {
        let demand = od_demand[set.od_index];
        let primary = realized[c] * demand;
        q[set.primary] = primary;
        q[set.alternative] = demand - primary;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::RampAttachment;
    use approx::assert_relative_eq;

    pub(crate) fn case_topologies() -> [ExpresswayTopology; 2] {
        // E12: off-ramp to 1 at cell 3, on-ramp from 1 at 7, off-ramp to 2 at 11, on-ramp from 2 at 15
        let mk = |up: usize| ExpresswayTopology {
            cell_count: 17,
            cell_length: 500.0,
            on_ramps: vec![
                RampAttachment { region: up, cell: 6 },
                RampAttachment { region: 1 - up, cell: 14 },
            ],
            off_ramps: vec![
                RampAttachment { region: up, cell: 2 },
                RampAttachment { region: 1 - up, cell: 10 },
            ],
        };
        [mk(0), mk(1)]
    }

    #[test]
    fn route_set_matches_the_trip_route_table() {
        let set = RouteSet::enumerate(&case_topologies()).unwrap();
        let mut got: Vec<(String, Vec<String>)> = set
            .ods
            .iter()
            .map(|o| {
                (
                    o.od.to_string(),
                    o.routes.iter().map(|&r| set.routes[r].name()).collect(),
                )
            })
            .collect();
        got.sort();
        let mut want: Vec<(String, Vec<String>)> = Vec::new();
        for (i, j) in [("1", "2"), ("2", "1")] {
            let e_ij = format!("E{i}{j}");
            let e_ji = format!("E{j}{i}");
            want.push((format!("{i}-{i}"), vec![format!("{i}")]));
            want.push((format!("{i}-{j}"), vec![format!("{i}>{j}"), format!("{i}>{e_ij}>{j}")]));
            want.push((format!("{i}-{e_ij}"), vec![format!("{i}>{e_ij}"), format!("{i}>{j}>{e_ij}")]));
            want.push((format!("{i}-{e_ji}"), vec![format!("{i}>{e_ji}")]));
            want.push((format!("{e_ij}-{i}"), vec![format!("{e_ij}>{i}")]));
            want.push((format!("{e_ij}-{j}"), vec![format!("{e_ij}>{j}"), format!("{e_ij}>{i}>{j}")]));
            want.push((format!("{e_ij}-{e_ij}"), vec![format!("{e_ij}>{e_ij}")]));
        }
        want.sort();
        assert_eq!(got, want);
        assert_eq!(set.len(), 20);
        assert_eq!(set.choice_sets.len(), 6);
    }

    #[test]
    fn route_invariants_hold() {
        let set = RouteSet::enumerate(&case_topologies()).unwrap();
        for route in &set.routes {
            let expressways = route.nodes.iter().filter(|n| matches!(n, Node::Expressway(_))).count();
            assert!(expressways <= 1, "{}", route.name());
            let mut regions: Vec<_> = route.nodes.iter().filter(|n| matches!(n, Node::Region(_))).collect();
            let before = regions.len();
            regions.dedup();
            assert_eq!(before, regions.len());
        }
    }

    fn free_snapshot() -> SpeedSnapshot {
        let vf = 80.0 / 3.6;
        let vr = 40.0 / 3.6;
        SpeedSnapshot {
            region_speed: [9.0, 9.0],
            trip_lengths: [TripLengthTable::default(); 2],
            cell_speeds: [vec![vf; 17], vec![vf; 17]],
            on_ramp_speed: [vec![vr; 2], vec![vr; 2]],
            off_ramp_speed: [vec![vr; 2], vec![vr; 2]],
            cell_length: [500.0, 500.0],
        }
    }

    #[test]
    fn free_flow_travel_times() {
        let set = RouteSet::enumerate(&case_topologies()).unwrap();
        let snap = free_snapshot();
        let t = route_travel_times(&set, &snap);
        let internal = set.by_name("1").unwrap().id;
        assert_relative_eq!(t[internal], 1667.0 / 9.0, max_relative = 1e-12);
        assert_relative_eq!(t[internal], 185.2, max_relative = 1e-3);
        let via = set.by_name("1>E12>2").unwrap().id;
        let vf = 80.0 / 3.6;
        let vr = 40.0 / 3.6;
        // origin to ramp, on-ramp, merge cell 7 through diverge cell 11, off-ramp
        let want = 1138.0 / 9.0 + 500.0 / vr + 5.0 * 500.0 / vf + 500.0 / vr;
        assert_relative_eq!(t[via], want, max_relative = 1e-12);
    }

    #[test]
    fn symmetric_state_gives_symmetric_times() {
        let set = RouteSet::enumerate(&case_topologies()).unwrap();
        let mut snap = free_snapshot();
        snap.region_speed = [4.0, 4.0];
        snap.cell_speeds[0][8] = 3.0;
        snap.cell_speeds[1][8] = 3.0;
        let t = route_travel_times(&set, &snap);
        for (a, b) in [("1>2", "2>1"), ("1>E12>2", "2>E21>1"), ("E12>1>2", "E21>2>1")] {
            assert_eq!(t[set.by_name(a).unwrap().id], t[set.by_name(b).unwrap().id]);
        }
    }

    #[test]
    fn jammed_cells_use_the_speed_floor() {
        let set = RouteSet::enumerate(&case_topologies()).unwrap();
        let mut snap = free_snapshot();
        snap.cell_speeds[0][16] = 0.0;
        let t = route_travel_times(&set, &snap);
        assert!(t.iter().all(|x| x.is_finite() && *x > 0.0));
    }

    fn params(mu: f64, unit: f64) -> RouteChoiceParams {
        RouteChoiceParams {
            logit_sensitivity: mu,
            compliance: 0.5,
            time_unit: unit,
        }
    }

    #[test]
    fn logit_examples() {
        assert_eq!(logit_split(300.0, 300.0, &params(0.5, 60.0)), 0.5);
        let theta = logit_split(600.0, 720.0, &params(1.0 / 120.0, 1.0));
        assert_relative_eq!(theta, 1.0 / (1.0 + (-1.0f64).exp()), max_relative = 1e-12);
        assert_relative_eq!(theta, 0.731, max_relative = 1e-3);
        assert_eq!(logit_split(100.0, 900.0, &params(0.0, 60.0)), 0.5);
    }

    #[test]
    fn logit_limits_and_overflow() {
        let theta = logit_split(600.0, 660.0, &params(1e3, 60.0));
        assert!(theta > 0.999);
        let huge = logit_split(1e9, 2e9, &params(10.0, 1.0));
        assert!(huge.is_finite());
        assert_eq!(huge, 1.0);
    }

    #[test]
    fn blend_examples() {
        assert_eq!(blend_compliance(0.6, 0.2, 0.0), 0.6);
        assert_eq!(blend_compliance(0.6, 0.2, 1.0), 0.2);
        assert_relative_eq!(blend_compliance(0.6, 0.2, 0.5), 0.4, max_relative = 1e-12);
        assert_eq!(blend_compliance(0.37, 0.37, 0.5), 0.37);
    }

    #[test]
    fn assignment_examples() {
        let set = RouteSet::enumerate(&case_topologies()).unwrap();
        let mut od = vec![0.0; set.ods.len()];
        let inter = set.od_index(Od::parse("1-2").unwrap()).unwrap();
        let internal = set.od_index(Od::parse("1-1").unwrap()).unwrap();
        od[inter] = 1000.0;
        od[internal] = 250.0;
        let mut realized = vec![0.5; set.choice_sets.len()];
        let c = set.choice_sets.iter().position(|c| c.od_index == inter).unwrap();
        realized[c] = 0.7;
        let q = assign_demand(&set, &od, &realized);
        assert_relative_eq!(q[set.by_name("1>2").unwrap().id], 700.0, max_relative = 1e-12);
        assert_relative_eq!(q[set.by_name("1>E12>2").unwrap().id], 300.0, max_relative = 1e-12);
        assert_eq!(q[set.by_name("1").unwrap().id], 250.0);
        let zero = assign_demand(&set, &vec![0.0; set.ods.len()], &realized);
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_ramp_is_rejected() {
        let mut topo = case_topologies();
        topo[0].on_ramps.pop();
        assert!(RouteSet::enumerate(&topo).is_err());
    }
}
