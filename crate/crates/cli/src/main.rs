use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msvgd::config::{KernelConfig, MapConfig, Overrides, ProfileConfig, RunConfig};
use msvgd::run::run;
use msvgd::verify::{builtin, verify_to_dir, Suite};
use msvgd::Error;

#[derive(Parser)]
#[command(name = "msvgd", version, about = "Mirrored Stein variational gradient descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle sampler from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Check the descent inequality, the identities or the bounds on the quadrature flow.
    Verify {
        #[arg(long)]
        suite: Suite,
        /// Built-in setup: quartic, cubic, gaussian or dirichlet.
        #[arg(long, required_unless_present = "config")]
        target: Option<String>,
        /// Config file used instead of a built-in setup.
        #[arg(long, conflicts_with = "target")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Multiplies the configured step size.
        #[arg(long, default_value_t = 1.0)]
        gamma_scale: f64,
        /// Grid nodes per axis.
        #[arg(long)]
        nodes: Option<usize>,
        #[command(flatten)]
        overrides: OverrideArgs,
        #[arg(long)]
        force: bool,
    },
    /// Print every theory constant, both step sizes and the iteration estimates as JSON.
    Theory {
        /// Built-in setup: quartic, cubic, gaussian or dirichlet.
        #[arg(long, required_unless_present = "config")]
        target: Option<String>,
        #[arg(long, conflicts_with = "target")]
        config: Option<PathBuf>,
        /// entropic-simplex, entropic-box or euclidean.
        #[arg(long)]
        map: Option<String>,
        /// imq, rbf or dual-imq, with default parameters.
        #[arg(long)]
        kernel: Option<String>,
        /// Growth exponent of the potential's gradient.
        #[arg(short = 'p')]
        p: Option<f64>,
        /// Transport-inequality constant.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
    },
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
}

impl OverrideArgs {
    fn get(&self) -> Overrides {
        Overrides {
            gamma: self.gamma,
            steps: self.steps,
            seed: self.seed,
            particles: self.particles,
        }
    }
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn prepare_out(out: &Path, force: bool) -> Result<(), Error> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", out.display())));
        }
        let occupied = std::fs::read_dir(out)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn load(target: Option<&str>, config: Option<&Path>) -> Result<(RunConfig, String), Error> {
    match (target, config) {
        (_, Some(path)) => Ok((RunConfig::load(path)?, path.display().to_string())),
        (Some(name), None) => Ok((builtin(name)?, name.to_string())),
        (None, None) => Err(Error::Config("give --target or --config".into())),
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            out,
            overrides,
            force,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(&overrides.get())?;
            prepare_out(&out, force)?;
            let summary = run(&cfg, &out)?;
            if let Some(msg) = summary.aborted {
                return Err(Failure::Error(Error::Numeric(format!(
                    "run aborted after {} steps: {msg}",
                    summary.steps_completed
                ))));
            }
            println!(
                "{} steps, gamma {}, outputs in {}",
                summary.steps_completed,
                summary.gamma,
                out.display()
            );
            Ok(())
        }
        Command::Verify {
            suite,
            target,
            config,
            out,
            gamma_scale,
            nodes,
            overrides,
            force,
        } => {
            let (mut cfg, name) = load(target.as_deref(), config.as_deref())?;
            cfg.apply(&overrides.get())?;
            if nodes.is_some() {
                cfg.quadrature.nodes = nodes;
            }
            prepare_out(&out, force)?;
            let report = verify_to_dir(&cfg, suite, &name, gamma_scale, &out)?;
            println!(
                "{:?} suite on {name}: {} checks, {} failed, gamma {}",
                suite,
                report.checks.len(),
                report.failed_checks,
                report.gamma
            );
            if report.passed {
                Ok(())
            } else {
                let first = report.checks.iter().find(|c| !c.passed).map(|c| {
                    let at = c.step.map(|s| format!(" at step {s}")).unwrap_or_default();
                    format!("{}{at}, margin {:e}", c.name, c.margin)
                });
                Err(Failure::Verification(format!(
                    "{} of {} checks failed; first: {}",
                    report.failed_checks,
                    report.checks.len(),
                    first.unwrap_or_default()
                )))
            }
        }
        Command::Theory {
            target,
            config,
            map,
            kernel,
            p,
            lambda,
            eps,
        } => {
            let (mut cfg, _) = load(target.as_deref(), config.as_deref())?;
            if let Some(m) = map {
                cfg.map = match m.as_str() {
                    "entropic-simplex" => MapConfig::EntropicSimplex,
                    "entropic-box" => MapConfig::EntropicBox { lo: None, hi: None },
                    "euclidean" => MapConfig::Euclidean,
                    other => return Err(Error::Config(format!("unknown map {other:?}")).into()),
                };
            }
            if let Some(k) = kernel {
                cfg.kernel = match k.as_str() {
                    "imq" => KernelConfig::Imq {
                        c: 1.0,
                        beta: -0.5,
                        scale: None,
                    },
                    "rbf" => KernelConfig::Rbf {
                        bandwidth: msvgd::config::Bandwidth::Fixed(1.0),
                        scale: None,
                    },
                    "dual-imq" => KernelConfig::DualImq { c: 1.0, beta: -0.5 },
                    other => return Err(Error::Config(format!("unknown kernel {other:?}")).into()),
                };
            }
            if p.is_some() || lambda.is_some() {
                let prof = cfg.profile.get_or_insert_with(ProfileConfig::default);
                if p.is_some() {
                    prof.p = p;
                }
                if lambda.is_some() {
                    prof.lambda = lambda;
                }
            }
            let setup = cfg.build()?;
            let report = setup.theory_report(eps)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            Ok(())
        }
    }
}
