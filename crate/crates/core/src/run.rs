//! Particle runs from a config: trajectory and diagnostics CSVs plus a manifest.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;
use crate::engine::{init_ensemble, msvgd_step, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::theory::{a_n, stein_fisher_particles, SmoothnessProfile};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Identifies the code that produced an artifact.
pub fn build_id() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a, T: Serialize> {
    pub build: String,
    pub command: &'a str,
    pub status: String,
    pub config: &'a RunConfig,
    pub details: T,
    pub files: Vec<&'a str>,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

pub(crate) fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Outcome of a particle run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub gamma: f64,
    pub steps_completed: usize,
    /// Set when the run stopped on a numeric failure; outputs then end at
    /// the last valid state.
    pub aborted: Option<String>,
    pub final_stein_fisher: Option<f64>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

struct Writers {
    trajectory: csv::Writer<File>,
    diagnostics: csv::Writer<File>,
}

impl Writers {
    fn create(out: &Path, d: usize) -> Result<Self> {
        let mut trajectory = csv::Writer::from_path(out.join(TRAJECTORY_FILE))?;
        let mut header = vec!["step".to_string(), "i".to_string()];
        header.extend((1..=d).map(|k| format!("theta_{k}")));
        header.extend((1..=d).map(|k| format!("x_{k}")));
        trajectory.write_record(&header)?;
        let mut diagnostics = csv::Writer::from_path(out.join(DIAGNOSTICS_FILE))?;
        diagnostics.write_record([
            "step",
            "stein_fisher",
            "a_n",
            "gamma",
            "bandwidth",
            "wallclock_ms",
            "status",
        ])?;
        Ok(Self {
            trajectory,
            diagnostics,
        })
    }

    fn positions(&mut self, ens: &ParticleEnsemble) -> Result<()> {
        let step = ens.step_index().to_string();
        for i in 0..ens.len() {
            let mut row = vec![step.clone(), i.to_string()];
            row.extend(ens.primal_particle(i).iter().map(f64::to_string));
            row.extend(ens.dual_particle(i).iter().map(f64::to_string));
            self.trajectory.write_record(&row)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.trajectory.flush()?;
        self.diagnostics.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs MSVGD as configured and writes `trajectory.csv`, `diagnostics.csv`
/// and `manifest.json` into `out`.
///
/// Rows are written for every step that is a multiple of the cadence and for
/// the last step. A run with `max_steps = 0` writes headers only. Numeric
/// failures end the run: the last valid state is written with the error in
/// the `status` column and the summary carries the message.
pub fn run(config: &RunConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    let started = unix_ms();
    let clock = Instant::now();
    std::fs::create_dir_all(out)?;
    let setup = config.build()?;
    let gamma = setup.resolve_gamma(config.step_size)?;
    let profile: Option<SmoothnessProfile> = setup.profile().ok();
    let mut kernel = setup.kernel.clone();
    let target = &setup.target;
    let d = config.dim;
    let mut writers = Writers::create(out, d)?;
    let traj_cadence = config.trajectory_cadence.unwrap_or(config.cadence);

    let mut ens = init_ensemble(&setup.map, config.particles, config.seed)?;
    let mut aborted = None;
    let mut last_sf = None;
    if config.max_steps > 0 {
        loop {
            let n = ens.step_index();
            if kernel.uses_median_heuristic() {
                kernel.update_bandwidth(ens.primal(), d);
            }
            let last = n == config.max_steps;
            if n % config.cadence == 0 || last {
                let sf = stein_fisher_particles(&ens, target, &kernel)?;
                last_sf = Some(sf);
                let an = match &profile {
                    Some(p) => Some(a_n(&ens, target, p)?),
                    None => None,
                };
                let wall = config
                    .record_wallclock
                    .then(|| clock.elapsed().as_secs_f64() * 1e3);
                writers.diagnostics.write_record([
                    n.to_string(),
                    sf.to_string(),
                    opt(an),
                    gamma.to_string(),
                    opt(kernel.bandwidth()),
                    opt(wall),
                    "ok".to_string(),
                ])?;
            }
            if n % traj_cadence == 0 || last {
                writers.positions(&ens)?;
            }
            if last {
                break;
            }
            match msvgd_step(&ens, target, &kernel, gamma) {
                Ok(next) => ens = next,
                Err(e) if e.is_numeric() => {
                    record_abort(&mut writers, &ens, target, &kernel, gamma, &e, n % traj_cadence != 0)?;
                    aborted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    writers.flush()?;
    let summary = RunSummary {
        gamma,
        steps_completed: ens.step_index(),
        aborted,
        final_stein_fisher: last_sf,
        out_dir: out.to_path_buf(),
    };
    let status = match &summary.aborted {
        Some(msg) => format!("aborted: {msg}"),
        None => "ok".into(),
    };
    let manifest = Manifest {
        build: build_id(),
        command: "run",
        status,
        config,
        details: &summary,
        files: vec![TRAJECTORY_FILE, DIAGNOSTICS_FILE],
        started_unix_ms: started,
        elapsed_ms: clock.elapsed().as_millis(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(summary)
}

fn record_abort(
    writers: &mut Writers,
    ens: &ParticleEnsemble,
    target: &crate::targets::MirroredTarget,
    kernel: &crate::kernels::Kernel,
    gamma: f64,
    error: &Error,
    write_positions: bool,
) -> Result<()> {
    let sf = stein_fisher_particles(ens, target, kernel).ok();
    writers.diagnostics.write_record([
        ens.step_index().to_string(),
        opt(sf),
        String::new(),
        gamma.to_string(),
        opt(kernel.bandwidth()),
        String::new(),
        format!("aborted: {error}"),
    ])?;
    if write_positions {
        writers.positions(ens)?;
    }
    Ok(())
}
