//! Receding-horizon control: NGNC (no guidance, no control), NCGC (guidance
//! and flow control optimized one after the other) and CGC (joint).

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};

use crate::demand::DemandProfile;
use crate::error::ModelError;
use crate::network::{ControlVector, Guidance, NetworkModel, NetworkState, StepRecord, Trajectory, CHOICE_SETS};
use crate::pso::{minimize, Evaluation, PsoConfig};
use crate::routes::{EXPRESSWAYS, REGIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Ngnc,
    Ncgc,
    Cgc,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Ngnc, Policy::Ncgc, Policy::Cgc];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Ngnc => "ngnc",
            Policy::Ncgc => "ncgc",
            Policy::Cgc => "cgc",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ngnc" => Ok(Policy::Ngnc),
            "ncgc" => Ok(Policy::Ncgc),
            "cgc" => Ok(Policy::Cgc),
            other => Err(format!("unknown policy `{other}` (expected ngnc, ncgc or cgc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig {
    /// Control steps predicted.
    pub prediction_horizon: usize,
    /// Control steps with free decisions; the last one is held afterwards.
    pub control_horizon: usize,
    pub pso: PsoConfig,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            prediction_horizon: 10,
            control_horizon: 5,
            pso: PsoConfig::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.control_horizon == 0 || self.control_horizon > self.prediction_horizon {
            return Err(ModelError::param(
                "mpc.control_horizon",
                "must satisfy 1 <= control_horizon <= prediction_horizon",
            ));
        }
        self.pso.validate()
    }
}

/// Which variables a PSO position encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Space {
    /// Guidance, perimeter and metering.
    Joint,
    Guidance,
    /// Perimeter and metering with drivers following their own choice.
    Flow,
}

const FLOW_VARS: usize = REGIONS + REGIONS * EXPRESSWAYS;

impl Space {
    fn width(self) -> usize {
        match self {
            Space::Joint => CHOICE_SETS + FLOW_VARS,
            Space::Guidance => CHOICE_SETS,
            Space::Flow => FLOW_VARS,
        }
    }

    fn decode(self, x: &[f64]) -> Vec<ControlVector> {
        x.chunks(self.width())
            .map(|c| {
                let mut v = ControlVector::UNCONTROLLED;
                let flow = match self {
                    Space::Joint => {
                        v.guidance = Guidance::Splits(c[..CHOICE_SETS].try_into().unwrap());
                        Some(&c[CHOICE_SETS..])
                    }
                    Space::Guidance => {
                        v.guidance = Guidance::Splits(c.try_into().unwrap());
                        None
                    }
                    Space::Flow => Some(c),
                };
                if let Some(f) = flow {
                    v.perimeter = [f[0], f[1]];
                    v.metering = [[f[2], f[3]], [f[4], f[5]]];
                }
                v
            })
            .collect()
    }

    /// Baseline position: guidance equal to the current driver splits, all
    /// flow controls open.
    fn baseline(self, driver: &[f64], slots: usize) -> Vec<f64> {
        let slot: Vec<f64> = match self {
            Space::Joint => driver.iter().copied().chain([1.0; FLOW_VARS]).collect(),
            Space::Guidance => driver.to_vec(),
            Space::Flow => vec![1.0; FLOW_VARS],
        };
        slot.repeat(slots)
    }

    /// Position of `plan` advanced by one control step, the last slot held.
    /// Guidance left to the drivers is encoded as their current splits.
    fn shifted(self, plan: &[ControlVector], driver: &[f64], slots: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.width() * slots);
        for i in 0..slots {
            let c = &plan[(i + 1).min(plan.len() - 1)];
            if self != Space::Flow {
                match &c.guidance {
                    Guidance::Splits(g) => x.extend_from_slice(g),
                    Guidance::FollowDriver => x.extend_from_slice(driver),
                }
            }
            if self != Space::Guidance {
                x.extend_from_slice(&c.perimeter);
                x.extend(c.metering.iter().flatten());
            }
        }
        x
    }
}

/// Predicted TTS plus the jam penalty of a control sequence over the
/// prediction horizon. Infeasible rollouts cost infinity.
pub fn evaluate_objective(
    model: &NetworkModel,
    state: &NetworkState,
    candidate: &[ControlVector],
    demand: &DemandProfile,
    prediction_horizon: usize,
    compliance: f64,
) -> f64 {
    let steps = prediction_horizon * model.steps_per_control;
    match model.rollout(state, candidate, demand, steps, compliance, false) {
        Ok(r) => r.tts + r.penalty,
        Err(e) => {
            debug!("rollout rejected: {e}");
            f64::INFINITY
        }
    }
}

/// Outcome of one optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub controls: Vec<ControlVector>,
    pub objective: f64,
    /// Objective of the uncontrolled, unguided sequence on the same forecast.
    pub baseline_objective: f64,
    pub history: Vec<f64>,
}

struct Problem<'a> {
    model: &'a NetworkModel,
    state: &'a NetworkState,
    demand: &'a DemandProfile,
    config: &'a MpcConfig,
    compliance: f64,
    mode: Evaluation,
}

impl Problem<'_> {
    fn objective(&self, controls: &[ControlVector]) -> f64 {
        evaluate_objective(
            self.model,
            self.state,
            controls,
            self.demand,
            self.config.prediction_horizon,
            self.compliance,
        )
    }

    /// PSO over `space`, returning the best candidate or the incumbent
    /// `fallback` unless it is strictly beaten.
    fn solve(&self, space: Space, fallback: &[ControlVector], warm: Option<&[ControlVector]>, seed: u64) -> Solution {
        let slots = self.config.control_horizon;
        let split = self.model.splits(self.state, &Guidance::FollowDriver, self.compliance);
        let mut initial = vec![space.baseline(&split.driver, slots)];
        if let Some(plan) = warm.filter(|p| !p.is_empty()) {
            initial.push(space.shifted(plan, &split.driver, slots));
        }
        let pso = PsoConfig {
            seed,
            ..self.config.pso
        };
        let f = |x: &[f64]| self.objective(&space.decode(x));
        let result = minimize(f, space.width() * slots, &initial, &pso, self.mode);
        let incumbent = self.objective(fallback);
        let baseline_objective = self.objective(&[ControlVector::UNCONTROLLED]);
        if result.best_value < incumbent {
            Solution {
                controls: space.decode(&result.best),
                objective: result.best_value,
                baseline_objective,
                history: result.history,
            }
        } else {
            Solution {
                controls: fallback.to_vec(),
                objective: incumbent,
                baseline_objective,
                history: result.history,
            }
        }
    }
}

fn step_seed(seed: u64, control_step: usize, stage: u64) -> u64 {
    seed ^ (control_step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Joint optimization of guidance, perimeter and metering. `warm` is the
/// plan found at the previous control step, if any; it seeds one particle.
#[allow(clippy::too_many_arguments)]
pub fn solve_cgc(
    model: &NetworkModel,
    state: &NetworkState,
    demand: &DemandProfile,
    config: &MpcConfig,
    compliance: f64,
    control_step: usize,
    warm: Option<&Solution>,
    mode: Evaluation,
) -> Solution {
    let p = Problem {
        model,
        state,
        demand,
        config,
        compliance,
        mode,
    };
    p.solve(
        Space::Joint,
        &[ControlVector::UNCONTROLLED],
        warm.map(|w| w.controls.as_slice()),
        step_seed(config.pso.seed, control_step, 0),
    )
}

/// The two NCGC stages.
#[derive(Debug, Clone, PartialEq)]
pub struct NcgcSolution {
    pub guidance: Solution,
    pub flow: Solution,
    /// Stage-one guidance combined with stage-two flow controls.
    pub controls: Vec<ControlVector>,
}

/// Guidance optimized with all flow controls open, then flow controls
/// optimized with drivers following their own logit choice.
#[allow(clippy::too_many_arguments)]
pub fn solve_ncgc(
    model: &NetworkModel,
    state: &NetworkState,
    demand: &DemandProfile,
    config: &MpcConfig,
    compliance: f64,
    control_step: usize,
    warm: Option<&NcgcSolution>,
    mode: Evaluation,
) -> NcgcSolution {
    let guidance_stage = Problem {
        model,
        state,
        demand,
        config,
        compliance,
        mode,
    };
    let guidance = guidance_stage.solve(
        Space::Guidance,
        &[ControlVector::UNCONTROLLED],
        warm.map(|w| w.guidance.controls.as_slice()),
        step_seed(config.pso.seed, control_step, 1),
    );
    let flow_stage = Problem {
        compliance: 0.0,
        ..guidance_stage
    };
    let flow = flow_stage.solve(
        Space::Flow,
        &[ControlVector::UNCONTROLLED],
        warm.map(|w| w.flow.controls.as_slice()),
        step_seed(config.pso.seed, control_step, 2),
    );
    let n = guidance.controls.len().max(flow.controls.len());
    let controls = (0..n)
        .map(|i| {
            let g = guidance.controls[i.min(guidance.controls.len() - 1)];
            let f = flow.controls[i.min(flow.controls.len() - 1)];
            ControlVector {
                guidance: g.guidance,
                ..f
            }
        })
        .collect();
    NcgcSolution {
        guidance,
        flow,
        controls,
    }
}

/// Averages over a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    /// veh s, queues included
    pub tts: f64,
    pub mean_accumulation: [f64; REGIONS],
    pub mean_expressway_vehicles: [f64; EXPRESSWAYS],
    /// Subregions plus expressways, queues excluded.
    pub mean_total_accumulation: f64,
    pub mean_queued: f64,
    pub mean_region_completion: [f64; REGIONS],
    /// Flow leaving the last mainline cell.
    pub mean_expressway_completion: [f64; EXPRESSWAYS],
    pub mean_total_completion: f64,
    pub mean_accumulation_gap: f64,
    pub steps: usize,
}

impl Summary {
    pub fn from_trajectory(model: &NetworkModel, trajectory: &Trajectory) -> Summary {
        let n = trajectory.records.len();
        if n == 0 {
            return Summary::default();
        }
        let dt = model.sim_step;
        let mut s = Summary {
            steps: n,
            ..Summary::default()
        };
        for (state, rec) in trajectory.states.iter().zip(&trajectory.records) {
            let c = model.vehicles(state);
            s.tts += dt * c.total();
            for r in 0..REGIONS {
                s.mean_accumulation[r] += c.regions[r];
                s.mean_region_completion[r] += rec.region_completion(r);
            }
            for d in 0..EXPRESSWAYS {
                s.mean_expressway_vehicles[d] += c.expressways[d];
                s.mean_expressway_completion[d] += rec.terminal_outflow[d];
            }
            s.mean_total_accumulation += c.on_network();
            s.mean_queued += c.total() - c.on_network();
            s.mean_accumulation_gap += (c.regions[0] - c.regions[1]).abs();
        }
        let k = n as f64;
        for v in s
            .mean_accumulation
            .iter_mut()
            .chain(s.mean_expressway_vehicles.iter_mut())
            .chain(s.mean_region_completion.iter_mut())
            .chain(s.mean_expressway_completion.iter_mut())
        {
            *v /= k;
        }
        s.mean_total_accumulation /= k;
        s.mean_queued /= k;
        s.mean_accumulation_gap /= k;
        s.mean_total_completion =
            s.mean_region_completion.iter().sum::<f64>() + s.mean_expressway_completion.iter().sum::<f64>();
        s
    }
}

/// Objectives predicted at one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecision {
    pub control_step: usize,
    pub applied: ControlVector,
    pub predicted_objective: f64,
    pub baseline_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub trajectory: Trajectory,
    pub decisions: Vec<StepDecision>,
    pub summary: Summary,
}

/// Runs the plant for `steps` simulation steps, asking `decide` for a control
/// vector at every control-step boundary. `decide` returns `None` when it
/// cannot produce a decision, in which case the previous control is kept.
pub fn run_with<F>(
    model: &NetworkModel,
    initial: &NetworkState,
    demand: &DemandProfile,
    steps: usize,
    compliance: f64,
    mut decide: F,
) -> Result<ClosedLoop, ModelError>
where
    F: FnMut(usize, &NetworkState) -> Option<StepDecision>,
{
    let spc = model.steps_per_control;
    let mut state = initial.clone();
    let mut trajectory = Trajectory {
        states: Vec::with_capacity(steps + 1),
        records: Vec::with_capacity(steps),
    };
    let mut decisions = Vec::new();
    let mut applied = ControlVector::UNCONTROLLED;
    let mut done = 0;
    let mut k = 0;
    while done < steps {
        match decide(k, &state) {
            Some(d) => {
                applied = d.applied;
                decisions.push(d);
            }
            None => warn!("control step {k}: no decision, keeping the previous control"),
        }
        let n = spc.min(steps - done);
        let r = model.rollout(&state, &[applied], demand, n, compliance, true)?;
        let mut t = r.trajectory.expect("recorded rollout");
        t.states.pop();
        trajectory.states.append(&mut t.states);
        trajectory.records.append(&mut t.records);
        state = r.state;
        done += n;
        k += 1;
    }
    trajectory.states.push(state);
    let summary = Summary::from_trajectory(model, &trajectory);
    Ok(ClosedLoop {
        trajectory,
        decisions,
        summary,
    })
}

/// Closed-loop run of a policy.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    model: &NetworkModel,
    initial: &NetworkState,
    demand: &DemandProfile,
    steps: usize,
    policy: Policy,
    config: &MpcConfig,
    compliance: f64,
    mode: Evaluation,
) -> Result<ClosedLoop, ModelError> {
    let mut last_cgc: Option<Solution> = None;
    let mut last_ncgc: Option<NcgcSolution> = None;
    run_with(model, initial, demand, steps, compliance, |k, state| {
        let (applied, predicted, baseline) = match policy {
            Policy::Ngnc => return Some(uncontrolled_decision(k)),
            Policy::Cgc => {
                let s = solve_cgc(model, state, demand, config, compliance, k, last_cgc.as_ref(), mode);
                let out = (s.controls[0], s.objective, s.baseline_objective);
                last_cgc = Some(s);
                out
            }
            Policy::Ncgc => {
                let s = solve_ncgc(model, state, demand, config, compliance, k, last_ncgc.as_ref(), mode);
                let applied = s.controls[0];
                let predicted = evaluate_objective(model, state, &s.controls, demand, config.prediction_horizon, compliance);
                let out = (applied, predicted, s.guidance.baseline_objective);
                last_ncgc = Some(s);
                out
            }
        };
        if !predicted.is_finite() {
            return None;
        }
        debug!("{policy} step {k}: predicted {predicted:.1}, baseline {baseline:.1}");
        Some(StepDecision {
            control_step: k,
            applied,
            predicted_objective: predicted,
            baseline_objective: baseline,
        })
    })
}

fn uncontrolled_decision(k: usize) -> StepDecision {
    StepDecision {
        control_step: k,
        applied: ControlVector::UNCONTROLLED,
        predicted_objective: f64::NAN,
        baseline_objective: f64::NAN,
    }
}

/// Per-step flows of a trajectory, for reporting.
pub fn completion_series(records: &[StepRecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| (0..REGIONS).map(|i| r.region_completion(i)).sum::<f64>() + r.terminal_outflow.iter().sum::<f64>())
        .collect()
}
