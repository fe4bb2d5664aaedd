//! Accumulation dynamics of one arterial subregion governed by an exponential
//! speed MFD, with trip completion rates differentiated by path class.

use crate::ctm::fifo_split;
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfdParams {
    /// m/s
    pub free_flow_speed: f64,
    pub shape_xi: f64,
    pub shape_gamma: f64,
    /// veh
    pub critical_accumulation: f64,
    /// veh
    pub jam_accumulation: f64,
    /// Maximum receiving flow at the subregion boundary, veh/s.
    pub max_boundary_receiving: f64,
}

impl MfdParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ModelError::param(name, format!("must be finite and > 0, got {v}")))
            }
        };
        pos("free_flow_speed", self.free_flow_speed)?;
        pos("shape_xi", self.shape_xi)?;
        pos("shape_gamma", self.shape_gamma)?;
        pos("critical_accumulation", self.critical_accumulation)?;
        pos("max_boundary_receiving", self.max_boundary_receiving)?;
        if !(self.jam_accumulation.is_finite() && self.jam_accumulation > self.critical_accumulation) {
            return Err(ModelError::param(
                "jam_accumulation",
                "must be finite and exceed critical_accumulation",
            ));
        }
        Ok(())
    }

    /// Free capacity of the boundary toward this subregion, `c_max (1 - n / n_max)`.
    pub fn receiving_supply(&self, total_accumulation: f64) -> f64 {
        (self.max_boundary_receiving * (1.0 - total_accumulation / self.jam_accumulation)).max(0.0)
    }
}

/// Space-mean speed `v_f exp(-xi (n / n_cr)^gamma)`, m/s.
pub fn subregion_speed(total_accumulation: f64, params: &MfdParams) -> f64 {
    let n = total_accumulation.max(0.0);
    params.free_flow_speed
        * (-params.shape_xi * (n / params.critical_accumulation).powf(params.shape_gamma)).exp()
}

/// Production `v(n) n`, veh m/s.
pub fn production(total_accumulation: f64, params: &MfdParams) -> f64 {
    subregion_speed(total_accumulation, params) * total_accumulation
}

/// Path classes within a subregion. `Origin`/`Destination` are interior
/// points, `Boundary` is the border with the neighbouring subregion, `OnRamp`
/// and `OffRamp` are expressway ramp ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathClass {
    OriginToDestination,
    OriginToBoundary,
    OriginToOnRamp,
    BoundaryToOnRamp,
    OffRampToBoundary,
    BoundaryToDestination,
    OffRampToDestination,
}

impl PathClass {
    pub const ALL: [PathClass; 7] = [
        PathClass::OriginToDestination,
        PathClass::OriginToBoundary,
        PathClass::OriginToOnRamp,
        PathClass::BoundaryToOnRamp,
        PathClass::OffRampToBoundary,
        PathClass::BoundaryToDestination,
        PathClass::OffRampToDestination,
    ];

    /// Key used in scenario files.
    pub fn key(self) -> &'static str {
        match self {
            PathClass::OriginToDestination => "internal",
            PathClass::OriginToBoundary => "origin_to_boundary",
            PathClass::OriginToOnRamp => "origin_to_on_ramp",
            PathClass::BoundaryToOnRamp => "boundary_to_on_ramp",
            PathClass::OffRampToBoundary => "off_ramp_to_boundary",
            PathClass::BoundaryToDestination => "boundary_to_destination",
            PathClass::OffRampToDestination => "off_ramp_to_destination",
        }
    }

    pub fn family(self) -> OutflowFamily {
        match self {
            PathClass::OriginToDestination
            | PathClass::BoundaryToDestination
            | PathClass::OffRampToDestination => OutflowFamily::Internal,
            PathClass::OriginToBoundary | PathClass::OffRampToBoundary => OutflowFamily::Boundary,
            PathClass::OriginToOnRamp | PathClass::BoundaryToOnRamp => OutflowFamily::Expressway,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// How a vehicle leaves the subregion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutflowFamily {
    /// Trip ends inside the subregion.
    Internal,
    /// Crosses into the neighbouring subregion.
    Boundary,
    /// Enters an expressway on-ramp.
    Expressway,
}

/// Average trip length per path class, m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripLengthTable {
    lengths: [f64; 7],
}

impl TripLengthTable {
    /// Arterial-only trips at 1667 m, trips touching an expressway ramp at 1138 m.
    pub fn calibrated_default() -> Self {
        let mut t = TripLengthTable { lengths: [0.0; 7] };
        for class in PathClass::ALL {
            let len = match class {
                PathClass::OriginToDestination
                | PathClass::OriginToBoundary
                | PathClass::BoundaryToDestination => 1667.0,
                _ => 1138.0,
            };
            t.lengths[class.index()] = len;
        }
        t
    }

    pub fn get(&self, class: PathClass) -> f64 {
        self.lengths[class.index()]
    }

    pub fn set(&mut self, class: PathClass, length: f64) {
        self.lengths[class.index()] = length;
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for class in PathClass::ALL {
            let v = self.get(class);
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::param(
                    format!("trip_lengths_m.{}", class.key()),
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

impl Default for TripLengthTable {
    fn default() -> Self {
        Self::calibrated_default()
    }
}

/// Per-route accumulation of a subregion, veh.
#[derive(Debug, Clone, PartialEq)]
pub struct SubregionState {
    pub accumulation: Vec<f64>,
}

impl SubregionState {
    pub fn empty(routes: usize) -> Self {
        SubregionState {
            accumulation: vec![0.0; routes],
        }
    }

    pub fn total(&self) -> f64 {
        self.accumulation.iter().sum()
    }

    pub fn check(&self, region: usize, params: &MfdParams) -> Result<(), ModelError> {
        for &n in &self.accumulation {
            if n < 0.0 || !n.is_finite() {
                return Err(ModelError::NegativeState {
                    location: format!("subregion {}", region + 1),
                    value: n,
                });
            }
        }
        let total = self.total();
        if total > params.jam_accumulation * (1.0 + 1e-9) {
            return Err(ModelError::AccumulationAboveJam {
                region: region + 1,
                accumulation: total,
                jam: params.jam_accumulation,
            });
        }
        Ok(())
    }
}

/// Per-route outflow demands of a subregion, veh/s. A route contributes to
/// exactly one family depending on its path class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompletionRates {
    pub internal: Vec<f64>,
    pub boundary: Vec<f64>,
    pub to_expressway: Vec<f64>,
}

/// Trip completion rates `(n^y / n) P(n) / ATL` per route, where the average
/// trip length is that of the route's path class in this subregion. Routes
/// with no path class here (`None`) get zero rates.
pub fn completion_rates(
    state: &SubregionState,
    params: &MfdParams,
    lengths: &TripLengthTable,
    path_classes: &[Option<PathClass>],
) -> CompletionRates {
    let r = state.accumulation.len();
    let mut rates = CompletionRates {
        internal: vec![0.0; r],
        boundary: vec![0.0; r],
        to_expressway: vec![0.0; r],
    };
    completion_rates_into(state, params, lengths, path_classes, &mut rates);
    rates
}

pub(crate) fn completion_rates_into(
    state: &SubregionState,
    params: &MfdParams,
    lengths: &TripLengthTable,
    path_classes: &[Option<PathClass>],
    rates: &mut CompletionRates,
) {
    let r = state.accumulation.len();
    for v in [&mut rates.internal, &mut rates.boundary, &mut rates.to_expressway] {
        v.clear();
        v.resize(r, 0.0);
    }
    let n = state.total();
    if n <= 0.0 {
        return;
    }
    let p = production(n, params);
    for (y, class) in path_classes.iter().enumerate() {
        let Some(class) = *class else { continue };
        let rate = state.accumulation[y] / n * p / lengths.get(class);
        match class.family() {
            OutflowFamily::Internal => rates.internal[y] = rate,
            OutflowFamily::Boundary => rates.boundary[y] = rate,
            OutflowFamily::Expressway => rates.to_expressway[y] = rate,
        }
    }
}

/// Boundary transfer gated by the perimeter rate and limited by the
/// receiving subregion's free capacity.
pub fn limited_boundary_transfer(
    wanted: &[f64],
    perimeter_rate: f64,
    receiver_total_accumulation: f64,
    receiver_params: &MfdParams,
) -> Vec<f64> {
    let mut out = vec![0.0; wanted.len()];
    limited_boundary_transfer_into(wanted, perimeter_rate, receiver_total_accumulation, receiver_params, &mut out);
    out
}

pub(crate) fn limited_boundary_transfer_into(
    wanted: &[f64],
    perimeter_rate: f64,
    receiver_total_accumulation: f64,
    receiver_params: &MfdParams,
    out: &mut [f64],
) {
    let total: f64 = wanted.iter().sum();
    if total <= 0.0 {
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let supply = receiver_params.receiving_supply(receiver_total_accumulation);
    for (o, &m) in out.iter_mut().zip(wanted) {
        *o = (perimeter_rate * m).min(m / total * supply);
    }
}

/// Transfer into an on-ramp limited by the ramp's receiving capacity.
pub fn limited_ramp_transfer(wanted: &[f64], on_ramp_receiving: f64) -> Vec<f64> {
    fifo_split(wanted, on_ramp_receiving)
}

/// Result of a subregion update.
#[derive(Debug, Clone, PartialEq)]
pub struct SubregionStep {
    pub state: SubregionState,
    /// Outflow actually realized per route after the non-negativity guard, veh/s.
    pub realized_outflow: Vec<f64>,
}

/// Forward-Euler accumulation update. Outflows that would empty a route below
/// zero are cut to `n^y / dt`.
pub fn step_subregion(
    state: &SubregionState,
    inflows: &[f64],
    admitted_outflows: &[f64],
    internal_completions: &[f64],
    dt: f64,
) -> SubregionStep {
    let r = state.accumulation.len();
    let mut next = state.clone();
    let mut realized = vec![0.0; r];
    step_subregion_into(state, inflows, admitted_outflows, internal_completions, dt, &mut next, &mut realized);
    SubregionStep {
        state: next,
        realized_outflow: realized,
    }
}

pub(crate) fn step_subregion_into(
    state: &SubregionState,
    inflows: &[f64],
    admitted_outflows: &[f64],
    internal_completions: &[f64],
    dt: f64,
    next: &mut SubregionState,
    realized: &mut [f64],
) {
    let r = state.accumulation.len();
    next.accumulation.resize(r, 0.0);
    for y in 0..r {
        let requested = admitted_outflows[y] + internal_completions[y];
        let out = requested.min(state.accumulation[y] / dt);
        realized[y] = out;
        next.accumulation[y] = (state.accumulation[y] + dt * inflows[y] - dt * out).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn params() -> MfdParams {
        MfdParams {
            free_flow_speed: 9.0,
            shape_xi: 1.286,
            shape_gamma: 1.0,
            critical_accumulation: 4650.0,
            jam_accumulation: 13000.0,
            max_boundary_receiving: 1.0,
        }
    }

    #[test]
    fn speed_examples() {
        let p = params();
        assert_eq!(subregion_speed(0.0, &p), 9.0);
        assert_relative_eq!(subregion_speed(4650.0, &p), 9.0 * (-1.286f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(subregion_speed(4650.0, &p), 2.488, max_relative = 1e-3);
        assert_relative_eq!(subregion_speed(2325.0, &p), 4.731, max_relative = 1e-3);
    }

    #[test]
    fn production_is_unimodal() {
        let p = params();
        let grid: Vec<f64> = (0..=1300).map(|i| production(i as f64 * 10.0, &p)).collect();
        let peak = grid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(peak > 0 && peak < grid.len() - 1);
        assert!(grid[..=peak].windows(2).all(|w| w[1] > w[0]));
        assert!(grid[peak..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn internal_completion_example() {
        let p = params();
        let state = SubregionState {
            accumulation: vec![4650.0, 0.0],
        };
        let classes = [Some(PathClass::OriginToDestination), Some(PathClass::OriginToBoundary)];
        let rates = completion_rates(&state, &p, &TripLengthTable::default(), &classes);
        let expected = 9.0 * (-1.286f64).exp() * 4650.0 / 1667.0;
        assert_relative_eq!(rates.internal[0], expected, max_relative = 1e-12);
        assert_relative_eq!(rates.internal[0], 6.94, max_relative = 1e-3);
        assert_eq!(rates.boundary[1], 0.0);
    }

    #[test]
    fn equal_shares_equal_rates() {
        let p = params();
        let state = SubregionState {
            accumulation: vec![1000.0, 1000.0],
        };
        let classes = [Some(PathClass::OriginToBoundary), Some(PathClass::OffRampToBoundary)];
        let mut lengths = TripLengthTable::default();
        lengths.set(PathClass::OffRampToBoundary, lengths.get(PathClass::OriginToBoundary));
        let rates = completion_rates(&state, &p, &lengths, &classes);
        assert_eq!(rates.boundary[0], rates.boundary[1]);
    }

    #[test]
    fn empty_region_has_zero_rates() {
        let rates = completion_rates(
            &SubregionState::empty(2),
            &params(),
            &TripLengthTable::default(),
            &[Some(PathClass::OriginToDestination), None],
        );
        assert!(rates.internal.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn boundary_transfer_examples() {
        let mut p = params();
        assert_eq!(limited_boundary_transfer(&[2.0], 0.0, 0.0, &p), vec![0.0]);
        p.max_boundary_receiving = 3.0;
        assert_eq!(limited_boundary_transfer(&[2.0], 1.0, 0.0, &p), vec![2.0]);
        assert_eq!(limited_boundary_transfer(&[2.0], 1.0, p.jam_accumulation, &p), vec![0.0]);
        assert_eq!(limited_boundary_transfer(&[0.0, 0.0], 1.0, 0.0, &p), vec![0.0, 0.0]);
    }

    #[test]
    fn ramp_transfer_examples() {
        let got = limited_ramp_transfer(&[0.5, 0.5], 0.4);
        assert_relative_eq!(got[0], 0.2, max_relative = 1e-12);
        assert_relative_eq!(got[1], 0.2, max_relative = 1e-12);
        assert_eq!(limited_ramp_transfer(&[0.5, 0.25], 1.0), vec![0.5, 0.25]);
        assert_eq!(limited_ramp_transfer(&[0.5, 0.25], 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn step_examples() {
        let s = SubregionState {
            accumulation: vec![100.0],
        };
        let same = step_subregion(&s, &[0.0], &[0.0], &[0.0], 10.0);
        assert_eq!(same.state, s);
        let grown = step_subregion(&s, &[1.0], &[0.5], &[0.0], 10.0);
        assert_relative_eq!(grown.state.accumulation[0], 105.0, max_relative = 1e-12);
        let drained = step_subregion(&s, &[0.0], &[8.0], &[7.0], 10.0);
        assert_eq!(drained.state.accumulation[0], 0.0);
        assert_relative_eq!(drained.realized_outflow[0], 10.0, max_relative = 1e-12);
    }

    #[test]
    fn params_validation() {
        let mut p = params();
        assert!(p.validate().is_ok());
        p.jam_accumulation = 100.0;
        assert!(p.validate().is_err());
    }
}
