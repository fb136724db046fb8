//! Run configuration: JSON schema, validation and construction of the
//! map, kernel and target it names.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::mirror::MirrorMap;
use crate::targets::{ConstrainedTarget, MirroredTarget, TargetKind};
use crate::theory::{
    c_pi_p, default_alpha, exp_grad_bound, iteration_estimate, kl0_upper_bound, step_size_bound,
    step_size_bound_tp, w_p_standard_normal, CpiEstimate, Mode, Provenance, SmoothnessProfile,
};

/// How the step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    Rule(StepRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Constant step of the general theorem, fixed once at initialization.
    Theorem,
    /// Constant step of the transport-inequality theorem.
    TheoremTp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MapConfig {
    EntropicSimplex,
    /// `lo`/`hi` default to the target's box.
    EntropicBox {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lo: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hi: Option<Vec<f64>>,
    },
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelConfig {
    Imq {
        c: f64,
        beta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
    Rbf {
        bandwidth: Bandwidth,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
    DualImq {
        c: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    /// `alpha` has `d + 1` entries.
    Dirichlet { alpha: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    TruncatedGaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// Mirrored potential `V(x) = |x|^p`.
    PowerLaw { p: f64 },
}

/// User-supplied constants; each one overrides the analytic catalog.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_pi_p: Option<f64>,
}

/// Settings for population-limit verification runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Nodes per axis; 4096 in one dimension and 40 in two by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    /// Additive slack in the descent inequality.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Slack in the Stein Fisher bound.
    #[serde(default = "default_lemma_tolerance")]
    pub lemma_tolerance: f64,
    /// Sup-norm agreement required between the forms of `g`.
    #[serde(default = "default_identity_tolerance")]
    pub identity_tolerance: f64,
    /// Largest `s` searched for the Bolley-Villani constant.
    #[serde(default = "default_s_max")]
    pub s_max: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            nodes: None,
            tolerance: default_tolerance(),
            lemma_tolerance: default_lemma_tolerance(),
            identity_tolerance: default_identity_tolerance(),
            s_max: default_s_max(),
        }
    }
}

impl QuadratureConfig {
    pub fn per_axis(&self, d: usize) -> usize {
        self.nodes.unwrap_or(if d == 1 { 4096 } else { 40 })
    }
}

fn default_tolerance() -> f64 {
    1e-7
}
fn default_lemma_tolerance() -> f64 {
    1e-8
}
fn default_identity_tolerance() -> f64 {
    1e-6
}
fn default_s_max() -> f64 {
    10.0
}
fn default_cadence() -> usize {
    10
}
fn default_step_size() -> StepSize {
    StepSize::Rule(StepRule::Theorem)
}

/// A complete run description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub particles: usize,
    pub dim: usize,
    #[serde(default = "default_step_size")]
    pub step_size: StepSize,
    pub max_steps: usize,
    pub seed: u64,
    pub map: MapConfig,
    pub kernel: KernelConfig,
    pub target: TargetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Diagnostics are written every `cadence` steps.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    /// Particle positions are written every `trajectory_cadence` steps;
    /// defaults to `cadence`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_cadence: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileConfig>,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    /// Fill the `wallclock_ms` diagnostics column. Off by default so that
    /// output files are byte-identical across runs.
    #[serde(default)]
    pub record_wallclock: bool,
}

/// Command-line overrides applied after loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub gamma: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub particles: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(g) = o.gamma {
            self.step_size = StepSize::Fixed(g);
        }
        if let Some(s) = o.steps {
            self.max_steps = s;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.particles {
            self.particles = n;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particles must be at least 1".into()));
        }
        if self.cadence == 0 || self.trajectory_cadence == Some(0) {
            return Err(Error::Config("cadences must be at least 1".into()));
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if let StepSize::Fixed(g) = self.step_size {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("an explicit step_size must be positive, got {g}")));
            }
        }
        let setup = self.build()?;
        if let StepSize::Rule(rule) = self.step_size {
            setup.check_theorem_constants(rule)?;
        }
        Ok(())
    }

    /// Constructs the map, kernel and target.
    pub fn build(&self) -> Result<Setup> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        let map = match &self.map {
            MapConfig::EntropicSimplex => MirrorMap::entropic_simplex(d)?,
            MapConfig::Euclidean => MirrorMap::euclidean(d)?,
            MapConfig::EntropicBox { lo, hi } => {
                let (tlo, thi) = match &self.target {
                    TargetConfig::TruncatedGaussian { lo, hi, .. } => (Some(lo.clone()), Some(hi.clone())),
                    _ => (None, None),
                };
                let lo = lo.clone().or(tlo).ok_or_else(|| Error::Config("entropic-box needs lo".into()))?;
                let hi = hi.clone().or(thi).ok_or_else(|| Error::Config("entropic-box needs hi".into()))?;
                MirrorMap::entropic_box(lo, hi)?
            }
        };
        let base = match &self.target {
            TargetConfig::Dirichlet { alpha } => ConstrainedTarget::dirichlet(alpha.clone())?,
            TargetConfig::Gaussian { mean, cov } => ConstrainedTarget::gaussian(mean.clone(), matrix(cov)?)?,
            TargetConfig::TruncatedGaussian { mean, cov, lo, hi } => {
                ConstrainedTarget::truncated_gaussian(mean.clone(), matrix(cov)?, lo.clone(), hi.clone())?
            }
            TargetConfig::PowerLaw { p } => ConstrainedTarget::power_law(*p, map.clone())?,
        };
        if base.dim() != d {
            return Err(Error::Config(format!(
                "target has dimension {} but dim is {d}",
                base.dim()
            )));
        }
        let target = MirroredTarget::new(base, map.clone())?;
        let kernel = match &self.kernel {
            KernelConfig::Imq { c, beta, scale } => rescale(Kernel::imq(*c, *beta)?, *scale)?,
            KernelConfig::Rbf { bandwidth, scale } => {
                let k = match bandwidth {
                    Bandwidth::Fixed(h) => Kernel::rbf(*h)?,
                    Bandwidth::Rule(BandwidthRule::Median) => Kernel::rbf_median(),
                };
                rescale(k, *scale)?
            }
            KernelConfig::DualImq { c, beta } => Kernel::dual_imq(*c, *beta, map.clone())?,
        };
        Ok(Setup {
            map,
            kernel,
            target,
            alpha: self.alpha,
            profile_config: self.profile.clone().unwrap_or_default(),
            s_max: self.quadrature.s_max,
        })
    }
}

fn rescale(k: Kernel, scale: Option<f64>) -> Result<Kernel> {
    match scale {
        Some(s) => Kernel::rescaled(k, s),
        None => Ok(k),
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config("covariance must be a square array of rows".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// The objects a config describes, plus the theory constants derived from them.
#[derive(Debug, Clone)]
pub struct Setup {
    pub map: MirrorMap,
    pub kernel: Kernel,
    pub target: MirroredTarget,
    pub alpha: f64,
    pub profile_config: ProfileConfig,
    pub s_max: f64,
}

/// All theory constants for one setup, as reported by the `theory` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub target: String,
    pub map: String,
    pub kernel: String,
    pub d: usize,
    pub k: f64,
    pub b1: f64,
    pub b2: f64,
    pub profile: SmoothnessProfile,
    pub c_pi_p_search: Option<CpiEstimate>,
    pub w_p: f64,
    pub normalized_v0: f64,
    pub kl0_upper: f64,
    pub general: ModeReport,
    pub tp: ModeReport,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    /// Upper bound on `E |grad V|` fed into `M`.
    pub grad_bound: Option<f64>,
    pub gamma: Option<f64>,
    /// Order estimate with unit hidden constants.
    pub iterations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

impl ModeReport {
    fn from(result: Result<(f64, f64, u64)>) -> Self {
        match result {
            Ok((x, g, n)) => Self {
                grad_bound: Some(x),
                gamma: Some(g),
                iterations: Some(n),
                unavailable: None,
            },
            Err(e) => Self {
                grad_bound: None,
                gamma: None,
                iterations: None,
                unavailable: Some(e.to_string()),
            },
        }
    }
}

impl Setup {
    /// Catalog profile merged with user constants; `alpha` from the config.
    pub fn profile(&self) -> Result<SmoothnessProfile> {
        let pc = &self.profile_config;
        let user_smooth = pc.l0.is_some() && pc.l1.is_some();
        let user_growth = pc.c_p.is_some() && pc.p.is_some();
        let mut prof = match self.target.smoothness_profile() {
            Ok(p) => p,
            Err(e) => {
                let mut missing = Vec::new();
                for (name, v) in [("l0", pc.l0), ("l1", pc.l1), ("c_p", pc.c_p), ("p", pc.p)] {
                    if v.is_none() {
                        missing.push(name);
                    }
                }
                if !missing.is_empty() {
                    return Err(Error::Config(format!(
                        "no analytic smoothness profile ({e}); supply profile constants {}",
                        missing.join(", ")
                    )));
                }
                SmoothnessProfile::new(0.0, 0.0, 1.0, 1.0, Provenance::User)
            }
        };
        if let Some(v) = pc.l0 {
            prof.l0 = v;
        }
        if let Some(v) = pc.l1 {
            prof.l1 = v;
        }
        if let Some(v) = pc.c_p {
            prof.c_p = v;
        }
        if let Some(v) = pc.p {
            prof.p = v;
        }
        if user_smooth {
            prof.provenance.smoothness = Provenance::User;
        }
        if user_growth {
            prof.provenance.growth = Provenance::User;
        }
        if let Some(l) = pc.lambda {
            prof = prof.with_lambda(l, Provenance::User);
        }
        if let Some(c) = pc.c_pi_p {
            prof = prof.with_c_pi_p(c, Provenance::User);
        }
        let prof = prof.with_alpha(self.alpha);
        prof.validate()?;
        Ok(prof)
    }

    /// Profile with `c_pi_p` filled in by search when not supplied.
    pub fn profile_with_c_pi_p(&self) -> Result<(SmoothnessProfile, Option<CpiEstimate>)> {
        let prof = self.profile()?;
        if prof.c_pi_p.is_some() {
            return Ok((prof, None));
        }
        let est = c_pi_p(&self.target, prof.p, self.s_max)?;
        Ok((prof.with_c_pi_p(est.value, Provenance::Analytic), Some(est)))
    }

    fn check_theorem_constants(&self, rule: StepRule) -> Result<()> {
        let prof = self.profile()?;
        if self.target.log_normalizer().is_none() {
            return Err(Error::Config(
                "the theorem step size needs the target's normalizing constant; give an explicit step_size".into(),
            ));
        }
        match rule {
            StepRule::Theorem => {
                let d = self.target.dim();
                let quadrature_ok = d <= 2 || matches!(self.target.base().kind(), TargetKind::PowerLaw { .. });
                if prof.c_pi_p.is_none() && !quadrature_ok {
                    return Err(Error::Config(
                        "the theorem step size needs c_pi_p for d > 2; supply profile.c_pi_p or use theorem-tp with lambda".into(),
                    ));
                }
            }
            StepRule::TheoremTp => {
                if prof.lambda.is_none() {
                    return Err(Error::Config("theorem-tp needs profile.lambda".into()));
                }
                if !(1.0..=2.0).contains(&prof.p) {
                    return Err(Error::Config(format!("theorem-tp needs 1 <= p <= 2, got {}", prof.p)));
                }
            }
        }
        Ok(())
    }

    /// `(KL0 upper bound, W_p(mu_0, delta_0))` for the standard normal start.
    pub fn initial_constants(&self, prof: &SmoothnessProfile) -> Result<(f64, f64)> {
        let d = self.target.dim();
        let kl0 = kl0_upper_bound(self.target.normalized_v_at_origin()?, prof.c_p, prof.p, d)?;
        Ok((kl0, w_p_standard_normal(prof.p, d)?))
    }

    /// The step size a rule resolves to.
    pub fn theorem_gamma(&self, rule: StepRule) -> Result<f64> {
        let d = self.target.dim();
        let prof = match rule {
            StepRule::Theorem => self.profile_with_c_pi_p()?.0,
            StepRule::TheoremTp => self.profile()?,
        };
        let (kl0, w) = self.initial_constants(&prof)?;
        let k = self.map.strong_convexity();
        let bounds = self.kernel.bounds();
        match rule {
            StepRule::Theorem => step_size_bound(&prof, bounds, k, d, kl0, w),
            StepRule::TheoremTp => step_size_bound_tp(&prof, bounds, k, d, kl0, w),
        }
    }

    pub fn resolve_gamma(&self, step: StepSize) -> Result<f64> {
        match step {
            StepSize::Fixed(g) => Ok(g),
            StepSize::Rule(rule) => self.theorem_gamma(rule),
        }
    }

    /// Every constant, both step sizes and both iteration estimates.
    pub fn theory_report(&self, eps: f64) -> Result<TheoryReport> {
        let d = self.target.dim();
        let base_prof = self.profile()?;
        let (prof, search) = match self.profile_with_c_pi_p() {
            Ok(v) => v,
            Err(Error::Assumption(_)) | Err(Error::Domain(_)) => (base_prof, None),
            Err(e) => return Err(e),
        };
        let normalized_v0 = self.target.normalized_v_at_origin()?;
        let (kl0, w) = self.initial_constants(&prof)?;
        let k = self.map.strong_convexity();
        let (b1, b2) = self.kernel.bounds();
        let mode = |m: Mode| -> Result<(f64, f64, u64)> {
            let x = exp_grad_bound(kl0, kl0, w, &prof, m)?;
            let g = match m {
                Mode::General => step_size_bound(&prof, (b1, b2), k, d, kl0, w)?,
                Mode::Tp => step_size_bound_tp(&prof, (b1, b2), k, d, kl0, w)?,
            };
            Ok((x, g, iteration_estimate(&prof, eps, d, m)?))
        };
        Ok(TheoryReport {
            target: self.target.base().name().into(),
            map: self.map.name().into(),
            kernel: self.kernel.name().into(),
            d,
            k,
            b1,
            b2,
            c_pi_p_search: search,
            w_p: w,
            normalized_v0,
            kl0_upper: kl0,
            general: ModeReport::from(mode(Mode::General)),
            tp: ModeReport::from(mode(Mode::Tp)),
            profile: prof,
            eps,
        })
    }
}
