//! Scenario files: JSON with the unit in every field name. Loading converts
//! to SI and validates; [`Scenario::to_file`] converts back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctm::{ExpresswayTopology, FundamentalDiagram, RampAttachment};
use crate::demand::{DemandProfile, PiecewiseLinear};
use crate::error::{ModelError, ScenarioError};
use crate::mfd::{MfdParams, PathClass, TripLengthTable};
use crate::mpc::MpcConfig;
use crate::network::{NetworkModel, NetworkState};
use crate::pso::PsoConfig;
use crate::routes::{Node, Od, RouteChoiceParams, EXPRESSWAYS, REGIONS};
use crate::units::*;

/// The scenario bundled with the crate.
pub const CASE_STUDY_JSON: &str = include_str!("../../../scenarios/case_study.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub simulation: SimulationFile,
    pub expressway: ExpresswayFile,
    pub subregions: Vec<SubregionFile>,
    pub route_choice: RouteChoiceFile,
    pub mpc: MpcFile,
    pub demand: Vec<DemandFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationFile {
    pub sim_step_s: f64,
    pub control_step_s: f64,
    pub horizon_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpresswayFile {
    pub cell_count: usize,
    pub cell_length_m: f64,
    pub mainline: DiagramFile,
    pub ramp: DiagramFile,
    /// `E12` then `E21`.
    pub directions: Vec<DirectionFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagramFile {
    pub free_flow_speed_km_per_h: f64,
    pub capacity_veh_per_h: f64,
    pub jam_density_veh_per_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck_capacity_veh_per_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_drop_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionFile {
    pub name: String,
    /// Subregion (`"1"`, `"2"`) to 1-based cell index.
    pub on_ramp_cells: BTreeMap<String, usize>,
    pub off_ramp_cells: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubregionFile {
    pub free_flow_speed_m_per_s: f64,
    pub shape_xi: f64,
    pub shape_gamma: f64,
    pub critical_accumulation_veh: f64,
    pub jam_accumulation_veh: f64,
    pub max_boundary_receiving_veh_per_h: f64,
    /// Path class key to average trip length; missing classes use the defaults.
    #[serde(default)]
    pub trip_lengths_m: BTreeMap<String, f64>,
    pub initial_accumulation_veh: f64,
    /// Route name to share of the initial accumulation. Defaults to the
    /// internal route.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub initial_route_shares: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteChoiceFile {
    pub logit_sensitivity: f64,
    pub compliance: f64,
    pub time_unit_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcFile {
    pub prediction_horizon_steps: usize,
    pub control_horizon_steps: usize,
    pub pso: PsoFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoFile {
    pub swarm_size: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandFile {
    /// OD class such as `1-2` or `E12-2`.
    pub od: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trapezoid: Option<TrapezoidFile>,
    /// `[time s, demand veh/h]` breakpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_s_veh_per_h: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapezoidFile {
    pub peak_veh_per_h: f64,
    pub start_s: f64,
    pub ramp_end_s: f64,
    pub hold_end_s: f64,
    pub end_s: f64,
}

/// A validated scenario in SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub sim_step: f64,
    pub control_step: f64,
    pub horizon_steps: usize,
    pub mainline: FundamentalDiagram,
    pub ramp: FundamentalDiagram,
    pub topologies: [ExpresswayTopology; EXPRESSWAYS],
    pub mfd: [MfdParams; REGIONS],
    pub trip_lengths: [TripLengthTable; REGIONS],
    pub initial_accumulation: [f64; REGIONS],
    pub initial_route_shares: [BTreeMap<String, f64>; REGIONS],
    pub choice: RouteChoiceParams,
    pub mpc: MpcConfig,
    pub demand: DemandProfile,
}

fn unit_value(field: &str, v: f64, allow_zero: bool) -> Result<f64, ScenarioError> {
    if !v.is_finite() || v < 0.0 || (!allow_zero && v == 0.0) {
        let bound = if allow_zero { ">= 0" } else { "> 0" };
        return Err(ScenarioError::Unit {
            field: field.into(),
            reason: format!("must be a finite quantity {bound}, got {v}"),
        });
    }
    Ok(v)
}

fn region_key(field: &str, key: &str) -> Result<usize, ScenarioError> {
    match key {
        "1" => Ok(0),
        "2" => Ok(1),
        _ => Err(ScenarioError::invalid(
            format!("{field}.{key}"),
            "subregion keys must be \"1\" or \"2\"",
        )),
    }
}

fn with_field(field: &str, e: ModelError) -> ScenarioError {
    ScenarioError::invalid(field, e.to_string())
}

impl DiagramFile {
    fn to_si(&self, field: &str) -> Result<FundamentalDiagram, ScenarioError> {
        let vf = unit_value(&format!("{field}.free_flow_speed_km_per_h"), self.free_flow_speed_km_per_h, false)?;
        let c = unit_value(&format!("{field}.capacity_veh_per_h"), self.capacity_veh_per_h, false)?;
        let kj = unit_value(&format!("{field}.jam_density_veh_per_km"), self.jam_density_veh_per_km, false)?;
        let mut fd = FundamentalDiagram::new(kmh_to_ms(vf), vehh_to_vehs(c), vehkm_to_vehm(kj))
            .map_err(|e| with_field(field, e))?;
        match (self.bottleneck_capacity_veh_per_h, self.capacity_drop_lambda) {
            (None, None) => {}
            (Some(cb), Some(lambda)) => {
                let cb = unit_value(&format!("{field}.bottleneck_capacity_veh_per_h"), cb, false)?;
                fd = fd
                    .with_capacity_drop(vehh_to_vehs(cb), lambda)
                    .map_err(|e| with_field(&format!("{field}.capacity_drop_lambda"), e))?;
            }
            _ => {
                return Err(ScenarioError::invalid(
                    format!("{field}.capacity_drop_lambda"),
                    "bottleneck_capacity_veh_per_h and capacity_drop_lambda must be given together",
                ))
            }
        }
        Ok(fd)
    }

    fn from_si(fd: &FundamentalDiagram) -> Self {
        DiagramFile {
            free_flow_speed_km_per_h: ms_to_kmh(fd.free_flow_speed),
            capacity_veh_per_h: vehs_to_vehh(fd.capacity),
            jam_density_veh_per_km: vehm_to_vehkm(fd.jam_density),
            bottleneck_capacity_veh_per_h: fd.capacity_drop.map(|d| vehs_to_vehh(d.capacity)),
            capacity_drop_lambda: fd.capacity_drop.map(|d| d.lambda),
        }
    }
}

impl ScenarioFile {
    pub fn to_scenario(&self) -> Result<Scenario, ScenarioError> {
        let sim = &self.simulation;
        let sim_step = unit_value("simulation.sim_step_s", sim.sim_step_s, false)?;
        let control_step = unit_value("simulation.control_step_s", sim.control_step_s, false)?;
        let horizon = unit_value("simulation.horizon_s", sim.horizon_s, false)?;
        let ratio = control_step / sim_step;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(ScenarioError::invalid(
                "simulation.control_step_s",
                "control_step must be a multiple of sim_step",
            ));
        }
        let steps = horizon / sim_step;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(ScenarioError::invalid(
                "simulation.horizon_s",
                "horizon must be a multiple of sim_step",
            ));
        }

        let e = &self.expressway;
        if e.cell_count == 0 {
            return Err(ScenarioError::invalid("expressway.cell_count", "must be >= 1"));
        }
        let ls = unit_value("expressway.cell_length_m", e.cell_length_m, false)?;
        let mainline = e.mainline.to_si("expressway.mainline")?;
        let ramp = e.ramp.to_si("expressway.ramp")?;
        for (field, fd) in [("expressway.mainline", &mainline), ("expressway.ramp", &ramp)] {
            if fd.free_flow_speed * sim_step > ls * (1.0 + 1e-12) {
                return Err(ScenarioError::invalid(
                    format!("{field}.free_flow_speed_km_per_h"),
                    format!(
                        "CFL condition violated: free-flow speed x sim_step = {:.1} m exceeds cell length {:.1} m",
                        fd.free_flow_speed * sim_step,
                        ls
                    ),
                ));
            }
        }
        if e.directions.len() != EXPRESSWAYS {
            return Err(ScenarioError::invalid(
                "expressway.directions",
                format!("expected {EXPRESSWAYS} directions (E12, E21), got {}", e.directions.len()),
            ));
        }
        let mut topologies: [ExpresswayTopology; EXPRESSWAYS] = Default::default();
        for (d, dir) in e.directions.iter().enumerate() {
            let field = format!("expressway.directions[{d}]");
            let want = Node::Expressway(d).to_string();
            if dir.name != want {
                return Err(ScenarioError::invalid(
                    format!("{field}.name"),
                    format!("expected `{want}`, got `{}`", dir.name),
                ));
            }
            let attach = |map: &BTreeMap<String, usize>, what: &str| -> Result<Vec<RampAttachment>, ScenarioError> {
                let mut out = Vec::new();
                for (k, &cell) in map {
                    let region = region_key(&format!("{field}.{what}"), k)?;
                    if cell == 0 || cell > e.cell_count {
                        return Err(ScenarioError::invalid(
                            format!("{field}.{what}.{k}"),
                            format!("cell {cell} outside 1..={}", e.cell_count),
                        ));
                    }
                    out.push(RampAttachment { region, cell: cell - 1 });
                }
                Ok(out)
            };
            let topo = ExpresswayTopology {
                cell_count: e.cell_count,
                cell_length: ls,
                on_ramps: attach(&dir.on_ramp_cells, "on_ramp_cells")?,
                off_ramps: attach(&dir.off_ramp_cells, "off_ramp_cells")?,
            };
            topo.validate().map_err(|err| with_field(&field, err))?;
            topologies[d] = topo;
        }

        if self.subregions.len() != REGIONS {
            return Err(ScenarioError::invalid(
                "subregions",
                format!("expected {REGIONS} subregions, got {}", self.subregions.len()),
            ));
        }
        let mut mfd = [None; REGIONS];
        let mut trip_lengths = [TripLengthTable::default(); REGIONS];
        let mut initial = [0.0; REGIONS];
        let mut shares: [BTreeMap<String, f64>; REGIONS] = Default::default();
        for (r, s) in self.subregions.iter().enumerate() {
            let field = format!("subregions[{r}]");
            let f = |name: &str| format!("{field}.{name}");
            let params = MfdParams {
                free_flow_speed: unit_value(&f("free_flow_speed_m_per_s"), s.free_flow_speed_m_per_s, false)?,
                shape_xi: s.shape_xi,
                shape_gamma: s.shape_gamma,
                critical_accumulation: unit_value(&f("critical_accumulation_veh"), s.critical_accumulation_veh, false)?,
                jam_accumulation: unit_value(&f("jam_accumulation_veh"), s.jam_accumulation_veh, false)?,
                max_boundary_receiving: vehh_to_vehs(unit_value(
                    &f("max_boundary_receiving_veh_per_h"),
                    s.max_boundary_receiving_veh_per_h,
                    false,
                )?),
            };
            params.validate().map_err(|err| with_field(&field, err))?;
            for (key, &len) in &s.trip_lengths_m {
                let class = PathClass::ALL
                    .into_iter()
                    .find(|c| c.key() == key)
                    .ok_or_else(|| {
                        ScenarioError::invalid(format!("{}.{key}", f("trip_lengths_m")), "unknown path class")
                    })?;
                trip_lengths[r].set(class, unit_value(&format!("{}.{key}", f("trip_lengths_m")), len, false)?);
            }
            initial[r] = unit_value(&f("initial_accumulation_veh"), s.initial_accumulation_veh, true)?;
            if initial[r] > params.jam_accumulation {
                return Err(ScenarioError::invalid(
                    f("initial_accumulation_veh"),
                    "exceeds jam_accumulation_veh",
                ));
            }
            for (name, &share) in &s.initial_route_shares {
                unit_value(&format!("{}.{name}", f("initial_route_shares")), share, true)?;
            }
            if !s.initial_route_shares.is_empty() {
                let total: f64 = s.initial_route_shares.values().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(ScenarioError::invalid(
                        f("initial_route_shares"),
                        format!("shares must sum to 1, got {total}"),
                    ));
                }
            }
            shares[r] = s.initial_route_shares.clone();
            mfd[r] = Some(params);
        }
        let mfd = mfd.map(|m| m.unwrap());

        let rc = &self.route_choice;
        let choice = RouteChoiceParams {
            logit_sensitivity: rc.logit_sensitivity,
            compliance: rc.compliance,
            time_unit: unit_value("route_choice.time_unit_s", rc.time_unit_s, false)?,
        };
        choice.validate().map_err(|err| with_field("route_choice", err))?;

        let mpc = MpcConfig {
            prediction_horizon: self.mpc.prediction_horizon_steps,
            control_horizon: self.mpc.control_horizon_steps,
            pso: PsoConfig {
                swarm_size: self.mpc.pso.swarm_size,
                inertia: self.mpc.pso.inertia,
                cognitive: self.mpc.pso.cognitive,
                social: self.mpc.pso.social,
                iterations: self.mpc.pso.iterations,
                seed: self.mpc.pso.seed,
            },
        };
        mpc.validate().map_err(|err| with_field("mpc", err))?;

        let mut demand = DemandProfile::zero();
        let mut seen = Vec::new();
        for (i, entry) in self.demand.iter().enumerate() {
            let field = format!("demand[{i}]");
            let od = Od::parse(&entry.od)
                .filter(|od| Od::canonical().contains(od))
                .ok_or_else(|| ScenarioError::invalid(format!("{field}.od"), format!("unknown OD class `{}`", entry.od)))?;
            if seen.contains(&od) {
                return Err(ScenarioError::invalid(format!("{field}.od"), format!("duplicate OD class `{od}`")));
            }
            seen.push(od);
            let series = match (&entry.trapezoid, &entry.points_s_veh_per_h) {
                (Some(t), None) => {
                    let peak = unit_value(&format!("{field}.trapezoid.peak_veh_per_h"), t.peak_veh_per_h, true)?;
                    if !(t.start_s < t.ramp_end_s && t.ramp_end_s <= t.hold_end_s && t.hold_end_s < t.end_s) {
                        return Err(ScenarioError::invalid(
                            format!("{field}.trapezoid"),
                            "need start_s < ramp_end_s <= hold_end_s < end_s",
                        ));
                    }
                    let mut p = PiecewiseLinear::trapezoid(vehh_to_vehs(peak), t.start_s, t.ramp_end_s, t.hold_end_s, t.end_s);
                    p.points.dedup_by(|a, b| a.0 == b.0);
                    p
                }
                (None, Some(points)) => PiecewiseLinear {
                    points: points.iter().map(|&(t, v)| (t, vehh_to_vehs(v))).collect(),
                },
                _ => {
                    return Err(ScenarioError::invalid(
                        field,
                        "give exactly one of `trapezoid` or `points_s_veh_per_h`",
                    ))
                }
            };
            series
                .validate(&format!("{field}.points_s_veh_per_h"))
                .map_err(|err| with_field(&field, err))?;
            demand.set(od, series);
        }

        let scenario = Scenario {
            name: self.name.clone(),
            description: self.description.clone(),
            sim_step,
            control_step,
            horizon_steps: steps.round() as usize,
            mainline,
            ramp,
            topologies,
            mfd,
            trip_lengths,
            initial_accumulation: initial,
            initial_route_shares: shares,
            choice,
            mpc,
            demand,
        };
        // referential checks: routes, shares
        let model = scenario.model()?;
        scenario.initial_state(&model)?;
        Ok(scenario)
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        file.to_scenario()
    }

    /// The bundled case study.
    pub fn case_study() -> Scenario {
        Scenario::from_json(CASE_STUDY_JSON).expect("bundled scenario is valid")
    }

    pub fn model(&self) -> Result<NetworkModel, ScenarioError> {
        NetworkModel::new(
            self.mainline,
            self.ramp,
            self.topologies.clone(),
            self.mfd,
            self.trip_lengths,
            self.choice,
            self.sim_step,
            self.control_step,
        )
        .map_err(ScenarioError::from)
    }

    pub fn initial_state(&self, model: &NetworkModel) -> Result<NetworkState, ScenarioError> {
        let mut state = model.empty_state();
        for r in 0..REGIONS {
            let field = format!("subregions[{r}].initial_route_shares");
            let internal = Node::Region(r).to_string();
            let shares: Vec<(String, f64)> = if self.initial_route_shares[r].is_empty() {
                vec![(internal, 1.0)]
            } else {
                self.initial_route_shares[r].iter().map(|(k, v)| (k.clone(), *v)).collect()
            };
            for (name, share) in shares {
                let route = model
                    .routes
                    .by_name(&name)
                    .ok_or_else(|| ScenarioError::invalid(format!("{field}.{name}"), "unknown route"))?;
                if model.routes.region_classes(r)[route.id].is_none() {
                    return Err(ScenarioError::invalid(
                        format!("{field}.{name}"),
                        format!("route does not pass through subregion {}", r + 1),
                    ));
                }
                state.regions[r].accumulation[route.id] += share * self.initial_accumulation[r];
            }
        }
        Ok(state)
    }

    pub fn to_file(&self) -> ScenarioFile {
        let region_name = |r: usize| (r + 1).to_string();
        let directions = self
            .topologies
            .iter()
            .enumerate()
            .map(|(d, t)| DirectionFile {
                name: Node::Expressway(d).to_string(),
                on_ramp_cells: t.on_ramps.iter().map(|a| (region_name(a.region), a.cell + 1)).collect(),
                off_ramp_cells: t.off_ramps.iter().map(|a| (region_name(a.region), a.cell + 1)).collect(),
            })
            .collect();
        let subregions = (0..REGIONS)
            .map(|r| {
                let m = &self.mfd[r];
                SubregionFile {
                    free_flow_speed_m_per_s: m.free_flow_speed,
                    shape_xi: m.shape_xi,
                    shape_gamma: m.shape_gamma,
                    critical_accumulation_veh: m.critical_accumulation,
                    jam_accumulation_veh: m.jam_accumulation,
                    max_boundary_receiving_veh_per_h: vehs_to_vehh(m.max_boundary_receiving),
                    trip_lengths_m: PathClass::ALL
                        .into_iter()
                        .map(|c| (c.key().to_string(), self.trip_lengths[r].get(c)))
                        .collect(),
                    initial_accumulation_veh: self.initial_accumulation[r],
                    initial_route_shares: self.initial_route_shares[r].clone(),
                }
            })
            .collect();
        let demand = Od::canonical()
            .into_iter()
            .zip(self.demand.series())
            .filter(|(_, s)| s.points.iter().any(|&(_, v)| v != 0.0))
            .map(|(od, s)| DemandFile {
                od: od.to_string(),
                trapezoid: None,
                points_s_veh_per_h: Some(s.points.iter().map(|&(t, v)| (t, vehs_to_vehh(v))).collect()),
            })
            .collect();
        ScenarioFile {
            name: self.name.clone(),
            description: self.description.clone(),
            simulation: SimulationFile {
                sim_step_s: self.sim_step,
                control_step_s: self.control_step,
                horizon_s: self.sim_step * self.horizon_steps as f64,
            },
            expressway: ExpresswayFile {
                cell_count: self.topologies[0].cell_count,
                cell_length_m: self.topologies[0].cell_length,
                mainline: DiagramFile::from_si(&self.mainline),
                ramp: DiagramFile::from_si(&self.ramp),
                directions,
            },
            subregions,
            route_choice: RouteChoiceFile {
                logit_sensitivity: self.choice.logit_sensitivity,
                compliance: self.choice.compliance,
                time_unit_s: self.choice.time_unit,
            },
            mpc: MpcFile {
                prediction_horizon_steps: self.mpc.prediction_horizon,
                control_horizon_steps: self.mpc.control_horizon,
                pso: PsoFile {
                    swarm_size: self.mpc.pso.swarm_size,
                    inertia: self.mpc.pso.inertia,
                    cognitive: self.mpc.pso.cognitive,
                    social: self.mpc.pso.social,
                    iterations: self.mpc.pso.iterations,
                    seed: self.mpc.pso.seed,
                },
            },
            demand,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }

    /// SHA-256 of the normalized scenario, hex.
    pub fn hash(&self) -> String {
        let normalized = serde_json::to_string(&self.to_file()).expect("scenario serializes");
        hex::encode(Sha256::digest(normalized.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> Result<Scenario, ScenarioError> {
        let mut v: serde_json::Value = serde_json::from_str(CASE_STUDY_JSON).unwrap();
        f(&mut v);
        Scenario::from_json(&v.to_string())
    }

    #[test]
    fn bundled_scenario_loads_in_si() {
        let s = Scenario::case_study();
        assert_eq!(s.topologies[0].cell_count, 17);
        assert_eq!(s.topologies[0].cell_length, 500.0);
        assert_relative_eq!(s.mainline.free_flow_speed, 22.2222, max_relative = 1e-5);
        assert_eq!(s.sim_step, 10.0);
        assert_eq!(s.control_step, 60.0);
        assert_eq!(s.horizon_steps, 1080);
        let model = s.model().unwrap();
        let st = s.initial_state(&model).unwrap();
        assert_eq!(st.regions[0].total(), 6000.0);
        assert_eq!(st.regions[1].total(), 3000.0);
    }

    #[test]
    fn control_step_must_divide() {
        let err = edit(|v| v["simulation"]["control_step_s"] = 65.0.into()).unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid { .. }));
        assert!(err.to_string().contains("control_step must be a multiple of sim_step"), "{err}");
    }

    #[test]
    fn cfl_violation_names_the_field() {
        let err = edit(|v| v["expressway"]["mainline"]["free_flow_speed_km_per_h"] = 200.0.into()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("CFL"), "{msg}");
        assert!(msg.contains("expressway.mainline.free_flow_speed_km_per_h"), "{msg}");
    }

    #[test]
    fn unit_errors_are_distinct() {
        let err = edit(|v| v["expressway"]["cell_length_m"] = (-5.0).into()).unwrap_err();
        assert!(matches!(err, ScenarioError::Unit { .. }), "{err}");
        let err = edit(|v| {
            let m = v["expressway"]["mainline"].as_object_mut().unwrap();
            let c = m.remove("capacity_veh_per_h").unwrap();
            m.insert("capacity_veh_per_s".into(), c);
        })
        .unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)), "{err}");
    }

    #[test]
    fn bad_references_are_rejected() {
        let err = edit(|v| v["demand"][0]["od"] = "3-1".into()).unwrap_err();
        assert!(err.to_string().contains("demand[0].od"), "{err}");
        let err = edit(|v| {
            v["subregions"][0]["initial_route_shares"] = serde_json::json!({"2": 1.0});
        })
        .unwrap_err();
        assert!(err.to_string().contains("initial_route_shares"), "{err}");
    }

    #[test]
    fn round_trip_is_semantically_identity() {
        let s = Scenario::case_study();
        let again = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(again.topologies, s.topologies);
        assert_eq!(again.horizon_steps, s.horizon_steps);
        assert_eq!(again.mpc, s.mpc);
        assert_eq!(again.choice, s.choice);
        assert_eq!(again.trip_lengths, s.trip_lengths);
        assert_eq!(again.initial_accumulation, s.initial_accumulation);
        for (a, b) in [(again.mainline, s.mainline), (again.ramp, s.ramp)] {
            assert_relative_eq!(a.free_flow_speed, b.free_flow_speed, max_relative = 1e-12);
            assert_relative_eq!(a.capacity, b.capacity, max_relative = 1e-12);
            assert_relative_eq!(a.jam_density, b.jam_density, max_relative = 1e-12);
        }
        for t in [0.0, 900.0, 1800.0, 4000.0, 7000.0, 9000.0, 10000.0] {
            for (x, y) in again.demand.at(t).iter().zip(s.demand.at(t)) {
                assert_relative_eq!(*x, y, max_relative = 1e-12);
            }
        }
        assert_eq!(Scenario::from_json(&again.to_json()).unwrap().hash(), again.hash());
    }
}
