//! Verification suites on the quadrature flow: the descent inequality, the
//! identities between the forms of `g`, and the theory bounds.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::config::{KernelConfig, MapConfig, RunConfig, StepRule, StepSize, TargetConfig};
use crate::error::{Error, Result};
use crate::popquad::{descent_check, lemma_rhs, DescentReport, FlowRecord, Grid, GridDensity, Quadrature};
use crate::run::{build_id, unix_ms, write_json, Manifest};
use crate::theory::StepConstants;

pub const REPORT_FILE: &str = "report.json";
pub const FLOW_FILE: &str = "flow.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Descent,
    Lemmas,
    Bounds,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descent" => Ok(Suite::Descent),
            "lemmas" => Ok(Suite::Lemmas),
            "bounds" => Ok(Suite::Bounds),
            other => Err(Error::Config(format!(
                "unknown suite {other:?}; expected descent, lemmas or bounds"
            ))),
        }
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_TARGETS: [&str; 4] = ["quartic", "cubic", "gaussian", "dirichlet"];

/// One-dimensional verification setups:
///
/// * `quartic`: `pi_bar ∝ exp(-x^4)`, Euclidean map, IMQ kernel;
/// * `cubic`: `pi_bar ∝ exp(-|x|^3)`, Euclidean map, IMQ kernel;
/// * `gaussian`: `N(0, 1)`, Euclidean map, IMQ kernel;
/// * `dirichlet`: Dirichlet(2, 2) on (0, 1), entropic map, IMQ kernel.
pub fn builtin(name: &str) -> Result<RunConfig> {
    let imq = KernelConfig::Imq {
        c: 1.0,
        beta: -0.5,
        scale: None,
    };
    let (map, target, steps, step_size) = match name {
        "quartic" => (MapConfig::Euclidean, TargetConfig::PowerLaw { p: 4.0 }, 200, StepSize::Rule(StepRule::Theorem)),
        "cubic" => (MapConfig::Euclidean, TargetConfig::PowerLaw { p: 3.0 }, 200, StepSize::Rule(StepRule::Theorem)),
        "gaussian" => (
            MapConfig::Euclidean,
            TargetConfig::Gaussian {
                mean: vec![0.0],
                cov: vec![vec![1.0]],
            },
            200,
            StepSize::Rule(StepRule::Theorem),
        ),
        "dirichlet" => (
            MapConfig::EntropicSimplex,
            TargetConfig::Dirichlet {
                alpha: vec![2.0, 2.0],
            },
            100,
            StepSize::Fixed(0.05),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown verification target {other:?}; expected one of {}",
                BUILTIN_TARGETS.join(", ")
            )))
        }
    };
    let cfg = RunConfig {
        particles: 1,
        dim: 1,
        step_size,
        max_steps: steps,
        seed: 0,
        map,
        kernel: imq,
        target,
        output: None,
        cadence: 10,
        trajectory_cadence: None,
        alpha: crate::theory::default_alpha(),
        profile: None,
        quadrature: Default::default(),
        record_wallclock: false,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// One pass/fail comparison. `margin` is nonnegative exactly when the check passes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub value: f64,
    pub limit: f64,
    pub margin: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= limit`.
    fn at_most(name: &str, step: Option<usize>, value: f64, limit: f64) -> Self {
        let margin = limit - value;
        Self {
            name: name.into(),
            step,
            value,
            limit,
            margin,
            passed: margin >= 0.0,
        }
    }
}

/// Agreement of the forms of `g` and of the two Stein Fisher formulas at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityRow {
    pub step: usize,
    pub dual_vs_primal: Option<f64>,
    pub dual_vs_parts: f64,
    pub g_scale: f64,
    pub stein_fisher: f64,
    pub pairing: f64,
    pub pairing_relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub target: String,
    pub gamma: f64,
    pub gamma_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_theorem: Option<f64>,
    pub steps: usize,
    pub nodes_per_axis: usize,
    pub passed: bool,
    pub failed_checks: usize,
    pub checks: Vec<Check>,
    /// Steps at which `gamma` exceeded the per-step admissible size. Reported,
    /// not counted as failures: the fixed-step theorem does not require it.
    pub step_condition_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descent: Option<DescentReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub identities: Vec<IdentityRow>,
    pub flow: Vec<FlowRecord>,
}

/// Runs one suite. `gamma_scale` multiplies the configured step size.
pub fn verify(config: &RunConfig, suite: Suite, target_name: &str, gamma_scale: f64) -> Result<VerifyReport> {
    config.validate()?;
    if !(gamma_scale > 0.0 && gamma_scale.is_finite()) {
        return Err(Error::Config(format!("gamma scale must be positive, got {gamma_scale}")));
    }
    let setup = config.build()?;
    let d = config.dim;
    if d > 2 {
        return Err(Error::Config(format!("quadrature verification supports d <= 2, got d = {d}")));
    }
    let (profile, _) = setup.profile_with_c_pi_p()?;
    let gamma_theorem = match config.step_size {
        StepSize::Rule(rule) => Some(setup.theorem_gamma(rule)?),
        StepSize::Fixed(_) => None,
    };
    let gamma = setup.resolve_gamma(config.step_size)? * gamma_scale;
    let constants = StepConstants::new(&profile, setup.kernel.bounds(), setup.map.strong_convexity(), d);
    let q = &config.quadrature;
    let per_axis = q.per_axis(d);
    let grid = Arc::new(Grid::for_target(&setup.target, per_axis)?);
    let quad = Quadrature::new(grid.clone(), setup.target.clone(), setup.kernel.clone())?;
    let mu0 = GridDensity::standard_normal(grid)?;

    let mut checks = Vec::new();
    let mut identities = Vec::new();
    let cadence = config.cadence;
    let want_identities = suite == Suite::Lemmas;
    let (flow, _) = quad.run_flow(mu0.clone(), gamma, config.max_steps, |step, mu| {
        if want_identities && step % cadence == 0 {
            let lc = quad.lemma_check(mu)?;
            let sf = quad.stein_fisher(mu)?;
            let pairing = quad.stein_fisher_pairing(mu)?;
            let rel = (sf - pairing).abs() / sf.abs().max(f64::MIN_POSITIVE);
            identities.push(IdentityRow {
                step,
                dual_vs_primal: (!lc.dual_vs_primal.is_nan()).then_some(lc.dual_vs_primal),
                dual_vs_parts: lc.dual_vs_parts,
                g_scale: lc.scale,
                stein_fisher: sf,
                pairing,
                pairing_relative: rel,
            });
        }
        Ok(())
    })?;

    let descent = descent_check(&flow, gamma, &constants, q.tolerance, q.lemma_tolerance);
    match suite {
        Suite::Descent => {
            for s in &descent.steps {
                checks.push(Check::at_most(
                    "descent",
                    Some(s.step),
                    s.kl_next - s.kl,
                    s.bound_rhs + q.tolerance,
                ));
            }
            if let (Some(first), Some(last)) = (flow.first(), flow.last()) {
                let mut c = Check::at_most("kl_decreased", Some(last.step), last.kl, first.kl);
                c.passed = flow.len() > 1 && last.kl < first.kl;
                checks.push(c);
            }
            push_stein_fisher_bound(&mut checks, &flow, &constants, q.lemma_tolerance);
        }
        Suite::Lemmas => {
            for row in &identities {
                if let Some(v) = row.dual_vs_primal {
                    checks.push(Check::at_most("g_dual_vs_primal", Some(row.step), v, q.identity_tolerance));
                }
                checks.push(Check::at_most("g_dual_vs_parts", Some(row.step), row.dual_vs_parts, q.identity_tolerance));
                checks.push(Check::at_most(
                    "stein_fisher_pairing",
                    Some(row.step),
                    row.pairing_relative,
                    q.identity_tolerance,
                ));
            }
            push_stein_fisher_bound(&mut checks, &flow, &constants, q.lemma_tolerance);
        }
        Suite::Bounds => {
            let (kl0_upper, _) = setup.initial_constants(&profile)?;
            let kl0 = quad.kl(&mu0)?;
            checks.push(Check::at_most("initial_kl_bound", Some(0), kl0, kl0_upper));
            if let Some(g) = gamma_theorem {
                checks.push(Check::at_most("theorem_gamma_positive", None, -g, 0.0));
            }
            push_stein_fisher_bound(&mut checks, &flow, &constants, q.lemma_tolerance);
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    Ok(VerifyReport {
        suite,
        target: target_name.into(),
        gamma,
        gamma_scale,
        gamma_theorem,
        steps: config.max_steps,
        nodes_per_axis: per_axis,
        passed: failed == 0,
        failed_checks: failed,
        checks,
        step_condition_violations: descent.step_condition_violations,
        descent: (suite == Suite::Descent).then_some(descent),
        identities,
        flow,
    })
}

fn push_stein_fisher_bound(checks: &mut Vec<Check>, flow: &[FlowRecord], c: &StepConstants, tol: f64) {
    for r in flow {
        checks.push(Check::at_most(
            "stein_fisher_bound",
            Some(r.step),
            r.stein_fisher.max(0.0).sqrt(),
            lemma_rhs(r.mean_grad_v, c) + tol,
        ));
    }
}

/// Runs a suite and writes `report.json`, `flow.csv` and `manifest.json` into `out`.
pub fn verify_to_dir(
    config: &RunConfig,
    suite: Suite,
    target_name: &str,
    gamma_scale: f64,
    out: &Path,
) -> Result<VerifyReport> {
    let started = unix_ms();
    let clock = Instant::now();
    std::fs::create_dir_all(out)?;
    let report = verify(config, suite, target_name, gamma_scale)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    let mut w = csv::Writer::from_path(out.join(FLOW_FILE))?;
    w.write_record(["step", "kl", "stein_fisher", "gamma", "bound_rhs"])?;
    for r in &report.flow {
        w.write_record([
            r.step.to_string(),
            r.kl.to_string(),
            r.stein_fisher.to_string(),
            report.gamma.to_string(),
            (-0.5 * report.gamma * r.stein_fisher).to_string(),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Summary {
        suite: Suite,
        target: String,
        passed: bool,
        failed_checks: usize,
        gamma: f64,
    }
    let manifest = Manifest {
        build: build_id(),
        command: "verify",
        status: if report.passed { "passed".into() } else { "failed".into() },
        config,
        details: Summary {
            suite,
            target: target_name.into(),
            passed: report.passed,
            failed_checks: report.failed_checks,
            gamma: report.gamma,
        },
        files: vec![REPORT_FILE, FLOW_FILE],
        started_unix_ms: started,
        elapsed_ms: clock.elapsed().as_millis(),
    };
    write_json(&out.join(crate::run::MANIFEST_FILE), &manifest)?;
    Ok(report)
}
