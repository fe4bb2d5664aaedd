//! Closed-loop experiments and the files they write.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use log::info;
use serde::Serialize;

use crate::error::{ModelError, ScenarioError};
use crate::mpc::{run_closed_loop, ClosedLoop, Policy, Summary};
use crate::network::{Guidance, NetworkModel};
use crate::pso::Evaluation;
use crate::routes::{Node, EXPRESSWAYS, REGIONS};
use crate::scenario::Scenario;

/// Version of the CSV layouts below. Bumped whenever a column is added,
/// removed or reordered.
pub const SCHEMA_VERSION: u32 = 1;

/// Compliance values of the CGC sweep run by [`compare_policies`].
pub const COMPLIANCE_SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One closed-loop run of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub policy: Policy,
    pub compliance: f64,
    pub summary: Summary,
}

/// Runs `policy` on the scenario with the PSO seed replaced by `seed`.
pub fn simulate(
    scenario: &Scenario,
    policy: Policy,
    seed: u64,
    compliance: f64,
    mode: Evaluation,
) -> Result<(NetworkModel, ClosedLoop), ExperimentError> {
    let model = scenario.model()?;
    let initial = scenario.initial_state(&model)?;
    let mut config = scenario.mpc;
    config.pso.seed = seed;
    config.validate()?;
    info!("running {policy} with compliance {compliance}");
    let run = run_closed_loop(
        &model,
        &initial,
        &scenario.demand,
        scenario.horizon_steps,
        policy,
        &config,
        compliance,
        mode,
    )?;
    info!("{policy} with compliance {compliance}: TTS {:.1} veh s", run.summary.tts);
    Ok((model, run))
}

fn region_name(r: usize) -> String {
    format!("sr{}", r + 1)
}

fn expressway_name(d: usize) -> String {
    Node::Expressway(d).to_string()
}

/// Column names of `timeseries.csv` for a model.
pub fn timeseries_columns(model: &NetworkModel) -> Vec<String> {
    let mut c: Vec<String> = vec!["step".into(), "time_s".into()];
    for r in 0..REGIONS {
        let s = region_name(r);
        c.push(format!("{s}_accumulation_veh"));
        c.push(format!("{s}_speed_m_per_s"));
        c.push(format!("{s}_origin_queue_veh"));
        for (y, route) in model.routes.routes.iter().enumerate() {
            if model.routes.region_classes(r)[y].is_some() {
                c.push(format!("{s}_route_{}_veh", route.name()));
            }
        }
    }
    for (d, e) in model.expressways.iter().enumerate() {
        let x = expressway_name(d);
        c.push(format!("{x}_vehicles_veh"));
        c.push(format!("{x}_upstream_queue_veh"));
        for quantity in ["density_veh_per_km", "speed_km_per_h", "outflow_veh_per_s"] {
            for l in 1..=e.cell_count() {
                c.push(format!("{x}_cell{l}_{quantity}"));
            }
        }
        for r in 0..REGIONS {
            c.push(format!("{x}_on_ramp_{}_density_veh_per_km", region_name(r)));
            c.push(format!("{x}_off_ramp_{}_density_veh_per_km", region_name(r)));
        }
    }
    c.push("generated_veh_per_s".into());
    for r in 0..REGIONS {
        let s = region_name(r);
        c.push(format!("{s}_admitted_veh_per_s"));
        c.push(format!("{s}_internal_completion_veh_per_s"));
        c.push(format!("{s}_boundary_transfer_veh_per_s"));
        for d in 0..EXPRESSWAYS {
            c.push(format!("{s}_to_{}_veh_per_s", expressway_name(d)));
        }
    }
    for d in 0..EXPRESSWAYS {
        let x = expressway_name(d);
        for r in 0..REGIONS {
            let s = region_name(r);
            c.push(format!("{x}_on_ramp_{s}_discharge_veh_per_s"));
            c.push(format!("{x}_off_ramp_{s}_diversion_veh_per_s"));
            c.push(format!("{x}_off_ramp_{s}_arrival_veh_per_s"));
        }
        c.push(format!("{x}_first_cell_inflow_veh_per_s"));
    }
    for r in 0..REGIONS {
        c.push(format!("u_{}{}", r + 1, 2 - r));
    }
    for d in 0..EXPRESSWAYS {
        for r in 0..REGIONS {
            c.push(format!("eta_{}_{}", expressway_name(d), region_name(r)));
        }
    }
    for cs in &model.routes.choice_sets {
        c.push(format!("guidance_{}", model.routes.ods[cs.od_index].od));
    }
    for cs in &model.routes.choice_sets {
        c.push(format!("split_{}", model.routes.ods[cs.od_index].od));
    }
    for r in 0..REGIONS {
        c.push(format!("{}_completion_veh_per_s", region_name(r)));
    }
    for d in 0..EXPRESSWAYS {
        c.push(format!("{}_completion_veh_per_s", expressway_name(d)));
    }
    c.push("total_completion_veh_per_s".into());
    c
}

/// One row per simulation step: the state at the start of the step and the
/// flows realized during it.
pub fn write_timeseries<W: Write>(mut w: W, model: &NetworkModel, run: &ClosedLoop) -> io::Result<()> {
    writeln!(w, "{}", timeseries_columns(model).join(","))?;
    let dt = model.sim_step;
    let mut row = String::new();
    let push = |row: &mut String, v: f64| {
        let _ = write!(row, ",{v}");
    };
    for (state, rec) in run.trajectory.states.iter().zip(&run.trajectory.records) {
        row.clear();
        let _ = write!(row, "{},{}", rec.step, rec.step as f64 * dt);
        for r in 0..REGIONS {
            let region = &state.regions[r];
            let n = region.total();
            push(&mut row, n);
            push(&mut row, crate::mfd::subregion_speed(n, &model.mfd[r]));
            push(&mut row, state.origin_queue[r].iter().sum());
            for (y, &a) in region.accumulation.iter().enumerate() {
                if model.routes.region_classes(r)[y].is_some() {
                    push(&mut row, a);
                }
            }
        }
        for (d, e) in model.expressways.iter().enumerate() {
            let s = &state.expressways[d];
            push(&mut row, s.vehicles_on_road(e.cell_length()));
            push(&mut row, s.queued_vehicles());
            for l in 0..e.cell_count() {
                push(&mut row, s.cell_total(l) * 1000.0);
            }
            for v in e.cell_speeds(s) {
                push(&mut row, v * 3.6);
            }
            for &q in &rec.cell_outflow[d] {
                push(&mut row, q);
            }
            for r in 0..REGIONS {
                push(&mut row, s.on_ramp_total(model.on_ramp_slot(d, r)) * 1000.0);
                push(&mut row, s.off_ramp_total(model.off_ramp_slot(d, r)) * 1000.0);
            }
        }
        push(&mut row, rec.generated);
        for r in 0..REGIONS {
            push(&mut row, rec.region_demand_admitted[r]);
            push(&mut row, rec.internal_completion[r]);
            push(&mut row, rec.boundary_transfer[r]);
            for d in 0..EXPRESSWAYS {
                push(&mut row, rec.ramp_transfer[r][d]);
            }
        }
        for d in 0..EXPRESSWAYS {
            for r in 0..REGIONS {
                push(&mut row, rec.on_ramp_discharge[d][r]);
                push(&mut row, rec.off_ramp_diversion[d][r]);
                push(&mut row, rec.off_ramp_arrival[d][r]);
            }
            push(&mut row, rec.first_cell_inflow[d]);
        }
        let c = &rec.controls;
        for &u in &c.perimeter {
            push(&mut row, u);
        }
        for m in c.metering.iter().flatten() {
            push(&mut row, *m);
        }
        for i in 0..model.routes.choice_sets.len() {
            match &c.guidance {
                Guidance::Splits(g) => push(&mut row, g[i]),
                Guidance::FollowDriver => row.push(','),
            }
        }
        for &s in &rec.realized_splits {
            push(&mut row, s);
        }
        for r in 0..REGIONS {
            push(&mut row, rec.region_completion(r));
        }
        for d in 0..EXPRESSWAYS {
            push(&mut row, rec.terminal_outflow[d]);
        }
        push(
            &mut row,
            (0..REGIONS).map(|r| rec.region_completion(r)).sum::<f64>() + rec.terminal_outflow.iter().sum::<f64>(),
        );
        writeln!(w, "{row}")?;
    }
    w.flush()
}

pub const SUMMARY_COLUMNS: [&str; 17] = [
    "label",
    "policy",
    "compliance",
    "tts_veh_s",
    "sr1_accumulation_veh",
    "sr2_accumulation_veh",
    "E12_vehicles_veh",
    "E21_vehicles_veh",
    "total_accumulation_veh",
    "queued_veh",
    "sr1_completion_veh_per_s",
    "sr2_completion_veh_per_s",
    "E12_completion_veh_per_s",
    "E21_completion_veh_per_s",
    "total_completion_veh_per_s",
    "accumulation_gap_veh",
    "steps",
];

pub fn write_summary<W: Write>(mut w: W, rows: &[RunResult]) -> io::Result<()> {
    writeln!(w, "{}", SUMMARY_COLUMNS.join(","))?;
    for r in rows {
        let s = &r.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.policy,
            r.compliance,
            s.tts,
            s.mean_accumulation[0],
            s.mean_accumulation[1],
            s.mean_expressway_vehicles[0],
            s.mean_expressway_vehicles[1],
            s.mean_total_accumulation,
            s.mean_queued,
            s.mean_region_completion[0],
            s.mean_region_completion[1],
            s.mean_expressway_completion[0],
            s.mean_expressway_completion[1],
            s.mean_total_completion,
            s.mean_accumulation_gap,
            s.steps,
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestRun {
    pub label: String,
    pub policy: String,
    pub compliance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub command: String,
    pub scenario: String,
    pub scenario_sha256: String,
    pub seed: u64,
    pub runs: Vec<ManifestRun>,
    pub files: Vec<String>,
}

impl Manifest {
    fn new(command: &str, scenario: &Scenario, seed: u64, runs: &[RunResult], files: Vec<String>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            scenario: scenario.name.clone(),
            scenario_sha256: scenario.hash(),
            seed,
            runs: runs
                .iter()
                .map(|r| ManifestRun {
                    label: r.label.clone(),
                    policy: r.policy.to_string(),
                    compliance: r.compliance,
                })
                .collect(),
            files,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, ExperimentError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<(), ExperimentError> {
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

fn prepare(out_dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))
}

/// Runs one policy and writes `timeseries.csv`, `summary.csv` and
/// `manifest.json` into `out_dir`.
pub fn run_experiment(
    scenario: &Scenario,
    policy: Policy,
    seed: u64,
    out_dir: &Path,
    mode: Evaluation,
) -> Result<RunResult, ExperimentError> {
    prepare(out_dir)?;
    let compliance = scenario.choice.compliance;
    let (model, run) = simulate(scenario, policy, seed, compliance, mode)?;
    let result = RunResult {
        label: policy.to_string(),
        policy,
        compliance,
        summary: run.summary,
    };
    let ts = out_dir.join("timeseries.csv");
    write_timeseries(create(&ts)?, &model, &run).map_err(io_err(&ts))?;
    let sm = out_dir.join("summary.csv");
    write_summary(create(&sm)?, std::slice::from_ref(&result)).map_err(io_err(&sm))?;
    let files = vec!["timeseries.csv".into(), "summary.csv".into()];
    write_manifest(out_dir, &Manifest::new("simulate", scenario, seed, std::slice::from_ref(&result), files))?;
    Ok(result)
}

/// Results of [`compare_policies`].
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
}

impl Comparison {
    pub fn get(&self, label: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.label == label)
    }

    /// CGC runs of the compliance sweep in increasing compliance.
    pub fn sweep(&self) -> Vec<&RunResult> {
        COMPLIANCE_SWEEP
            .iter()
            .filter_map(|&e| self.get(&sweep_label(e)).or_else(|| self.cgc_at(e)))
            .collect()
    }

    fn cgc_at(&self, compliance: f64) -> Option<&RunResult> {
        self.runs
            .iter()
            .find(|r| r.policy == Policy::Cgc && r.compliance == compliance)
    }
}

pub fn sweep_label(compliance: f64) -> String {
    format!("cgc_eps_{compliance:.2}")
}

/// Percentage by which `value` is below `reference`.
pub fn reduction(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        0.0
    } else {
        100.0 * (reference - value) / reference
    }
}

struct Job {
    label: String,
    policy: Policy,
    compliance: f64,
    keep_timeseries: bool,
}

type JobOutput = Result<(RunResult, Option<String>), ExperimentError>;

fn run_job(scenario: &Scenario, seed: u64, job: &Job, mode: Evaluation) -> JobOutput {
    let (model, run) = simulate(scenario, job.policy, seed, job.compliance, mode)?;
    let csv = if job.keep_timeseries {
        let mut buf = Vec::new();
        write_timeseries(&mut buf, &model, &run).expect("writing to memory");
        Some(String::from_utf8(buf).expect("CSV is UTF-8"))
    } else {
        None
    };
    Ok((
        RunResult {
            label: job.label.clone(),
            policy: job.policy,
            compliance: job.compliance,
            summary: run.summary,
        },
        csv,
    ))
}

fn run_jobs(scenario: &Scenario, seed: u64, jobs: &[Job], mode: Evaluation) -> Vec<JobOutput> {
    match mode {
        #[cfg(feature = "parallel")]
        Evaluation::Parallel => {
            use rayon::prelude::*;
            jobs.par_iter().map(|j| run_job(scenario, seed, j, mode)).collect()
        }
        _ => jobs.iter().map(|j| run_job(scenario, seed, j, mode)).collect(),
    }
}

/// Runs NGNC, NCGC and CGC at the scenario compliance plus the CGC
/// compliance sweep, and writes `comparison.csv`, `report.md`,
/// `manifest.json` and one `timeseries_<policy>.csv` per policy.
pub fn compare_policies(
    scenario: &Scenario,
    seed: u64,
    out_dir: &Path,
    mode: Evaluation,
) -> Result<Comparison, ExperimentError> {
    prepare(out_dir)?;
    let eps = scenario.choice.compliance;
    let mut jobs: Vec<Job> = Policy::ALL
        .iter()
        .map(|&p| Job {
            label: p.to_string(),
            policy: p,
            compliance: eps,
            keep_timeseries: true,
        })
        .collect();
    for &e in &COMPLIANCE_SWEEP {
        // the main CGC run already covers the scenario's own compliance
        if e != eps {
            jobs.push(Job {
                label: sweep_label(e),
                policy: Policy::Cgc,
                compliance: e,
                keep_timeseries: false,
            });
        }
    }
    let mut runs = Vec::new();
    let mut files = Vec::new();
    for output in run_jobs(scenario, seed, &jobs, mode) {
        let (result, csv) = output?;
        if let Some(csv) = csv {
            let name = format!("timeseries_{}.csv", result.label);
            let path = out_dir.join(&name);
            fs::write(&path, csv).map_err(io_err(&path))?;
            files.push(name);
        }
        runs.push(result);
    }
    let comparison = Comparison { runs };

    let path = out_dir.join("comparison.csv");
    write_summary(create(&path)?, &comparison.runs).map_err(io_err(&path))?;
    files.push("comparison.csv".into());
    let path = out_dir.join("report.md");
    fs::write(&path, report(scenario, &comparison)).map_err(io_err(&path))?;
    files.push("report.md".into());
    write_manifest(out_dir, &Manifest::new("compare", scenario, seed, &comparison.runs, files))?;
    Ok(comparison)
}

/// Tables of mean completion flows and accumulations per policy, the
/// relative differences between policies and the compliance sweep.
pub fn report(scenario: &Scenario, c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Policy comparison: {}\n", scenario.name);
    let _ = writeln!(s, "Compliance {}, scenario sha256 {}\n", scenario.choice.compliance, scenario.hash());
    let main: Vec<&RunResult> = Policy::ALL.iter().filter_map(|p| c.get(p.name())).collect();

    let _ = writeln!(s, "## Mean trip completion flow (veh/s)\n");
    let _ = writeln!(s, "| policy | SR1 | SR2 | E12 | E21 | total |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for r in &main {
        let m = &r.summary;
        let _ = writeln!(
            s,
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
            r.policy.name().to_uppercase(),
            m.mean_region_completion[0],
            m.mean_region_completion[1],
            m.mean_expressway_completion[0],
            m.mean_expressway_completion[1],
            m.mean_total_completion
        );
    }
    let _ = writeln!(s, "\n## Mean accumulation (veh)\n");
    let _ = writeln!(s, "| policy | SR1 | SR2 | E12 | E21 | total | queued | TTS (veh h) |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for r in &main {
        let m = &r.summary;
        let _ = writeln!(
            s,
            "| {} | {:.0} | {:.0} | {:.0} | {:.0} | {:.0} | {:.0} | {:.1} |",
            r.policy.name().to_uppercase(),
            m.mean_accumulation[0],
            m.mean_accumulation[1],
            m.mean_expressway_vehicles[0],
            m.mean_expressway_vehicles[1],
            m.mean_total_accumulation,
            m.mean_queued,
            m.tts / 3600.0
        );
    }
    let _ = writeln!(s, "\n## Relative differences (%)\n");
    let _ = writeln!(s, "| comparison | accumulation reduction | TTS reduction | completion gain |");
    let _ = writeln!(s, "|---|---|---|---|");
    for (a, b) in [("cgc", "ngnc"), ("cgc", "ncgc"), ("ncgc", "ngnc")] {
        if let (Some(x), Some(y)) = (c.get(a), c.get(b)) {
            let _ = writeln!(
                s,
                "| {} vs {} | {:.2} | {:.2} | {:.2} |",
                a.to_uppercase(),
                b.to_uppercase(),
                reduction(x.summary.mean_total_accumulation, y.summary.mean_total_accumulation),
                reduction(x.summary.tts, y.summary.tts),
                -reduction(x.summary.mean_total_completion, y.summary.mean_total_completion)
            );
        }
    }
    let _ = writeln!(s, "\n## CGC compliance sweep\n");
    let _ = writeln!(s, "| compliance | total accumulation (veh) | TTS (veh h) |");
    let _ = writeln!(s, "|---|---|---|");
    for r in c.sweep() {
        let _ = writeln!(
            s,
            "| {:.2} | {:.0} | {:.1} |",
            r.compliance,
            r.summary.mean_total_accumulation,
            r.summary.tts / 3600.0
        );
    }
    s
}
