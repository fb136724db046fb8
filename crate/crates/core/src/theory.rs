//! Constants and bounds for the population-limit convergence theory.
//!
//! Everything here is a plain function of a [`SmoothnessProfile`], the kernel
//! constants `(B1, B2)`, the mirror constant `K` and the dimension. The step
//! size of the constant-step theorem is `M(x)` evaluated at an upper bound `x`
//! of `E |grad V|` along the whole trajectory.

use std::f64::consts::{E, PI};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::engine::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::targets::{norm, MirroredTarget, TargetKind};

/// Where a constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Analytic,
    Empirical,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileProvenance {
    /// Source of `l0` and `l1`.
    pub smoothness: Provenance,
    /// Source of `c_p` and `p`.
    pub growth: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_pi_p: Option<Provenance>,
}

/// Every constant entering the step-size and complexity formulas.
///
/// `|hess V| <= l0 + l1 |grad V|`, `|grad V(x)| <= c_p (|x|^p + 1)`,
/// `lambda` is a transport-inequality constant and `c_pi_p` the Bolley-Villani
/// constant of the mirrored target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessProfile {
    pub l0: f64,
    pub l1: f64,
    pub c_p: f64,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_pi_p: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub provenance: ProfileProvenance,
}

pub fn default_alpha() -> f64 {
    2.0
}

impl SmoothnessProfile {
    pub fn new(l0: f64, l1: f64, c_p: f64, p: f64, source: Provenance) -> Self {
        Self {
            l0,
            l1,
            c_p,
            p,
            lambda: None,
            c_pi_p: None,
            alpha: default_alpha(),
            provenance: ProfileProvenance {
                smoothness: source,
                growth: source,
                lambda: None,
                c_pi_p: None,
            },
        }
    }

    pub fn with_lambda(mut self, lambda: f64, source: Provenance) -> Self {
        self.lambda = Some(lambda);
        self.provenance.lambda = Some(source);
        self
    }

    pub fn with_c_pi_p(mut self, c: f64, source: Provenance) -> Self {
        self.c_pi_p = Some(c);
        self.provenance.c_pi_p = Some(source);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")))
            }
        };
        nonneg("l0", self.l0)?;
        nonneg("l1", self.l1)?;
        if !(self.c_p > 0.0 && self.c_p.is_finite()) {
            return Err(Error::Config(format!("c_p must be positive, got {}", self.c_p)));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("p must be at least 1, got {}", self.p)));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
        }
        if let Some(c) = self.c_pi_p {
            nonneg("c_pi_p", c)?;
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One row of run diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub stein_fisher: f64,
    pub a_n: Option<f64>,
    pub gamma: f64,
    pub kl: Option<f64>,
    pub bandwidth: Option<f64>,
}

/// Which complexity regime a bound is evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Moment condition plus the Bolley-Villani constant.
    General,
    /// Talagrand transport inequality with constant `lambda`, `1 <= p <= 2`.
    Tp,
}

/// Kernel, mirror and smoothness constants consumed by `M(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConstants {
    pub b1: f64,
    pub b2: f64,
    pub k: f64,
    pub d: usize,
    pub l0: f64,
    pub l1: f64,
    pub alpha: f64,
}

impl StepConstants {
    pub fn new(profile: &SmoothnessProfile, bounds: (f64, f64), k: f64, d: usize) -> Self {
        Self {
            b1: bounds.0,
            b2: bounds.1,
            k,
            d,
            l0: profile.l0,
            l1: profile.l1,
            alpha: profile.alpha,
        }
    }
}

/// `G_p(x) = x^(1/p) + (x/2)^(1/(2p))`.
pub fn g_p(x: f64, p: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("G_p needs a finite x >= 0, got {x}")));
    }
    if !(p >= 1.0) {
        return Err(Error::Domain(format!("G_p needs p >= 1, got {p}")));
    }
    Ok(x.powf(1.0 / p) + (x / 2.0).powf(1.0 / (2.0 * p)))
}

/// The step-size function `M(x)`, where `x` bounds `E |grad V|`.
///
/// `1 / (B1 L1)` is read as `+inf` when `L1 = 0`.
pub fn m_function(x: f64, c: &StepConstants) -> f64 {
    let d = c.d as f64;
    let inv_l1 = if c.l1 == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (c.b1 * c.l1)
    };
    let ratio = (c.alpha - 1.0) * c.k / (c.alpha * c.b2 * d);
    let first = inv_l1.min(ratio) * c.k / (c.k * c.b1 * x + c.b2 * d);
    let second = c.k * c.k
        / (c.alpha * c.alpha * c.b2 * c.b2 * d * d
            + c.k * c.k * c.b1 * c.b1 * (E - 1.0) * (c.l1 * x + c.l0));
    first.min(second)
}

/// Per-step admissible step size given the current Stein Fisher information
/// and `A_n = L0 + L1 E |grad V|`.
pub fn per_step_bound(stein_fisher: f64, a_n: f64, c: &StepConstants) -> f64 {
    let d = c.d as f64;
    let root = stein_fisher.max(0.0).sqrt();
    let first = (c.alpha - 1.0) * c.k / (c.alpha * c.b2 * d * root);
    let second = 1.0 / (c.b1 * root * c.l1);
    let third = c.k * c.k
        / (c.alpha * c.alpha * c.b2 * c.b2 * d * d + c.k * c.k * (E - 1.0) * c.b1 * c.b1 * a_n);
    [first, second, third]
        .into_iter()
        .map(|v| if v.is_nan() { f64::INFINITY } else { v })
        .fold(f64::INFINITY, f64::min)
}

/// Upper bound on `E_{mu_n} |grad V|` from the KL values at steps `n` and 0
/// and `w = W_p(mu_0, delta_0)`.
pub fn exp_grad_bound(
    kl_n: f64,
    kl_0: f64,
    w: f64,
    profile: &SmoothnessProfile,
    mode: Mode,
) -> Result<f64> {
    let p = profile.p;
    let (kl_n, kl_0) = (kl_n.max(0.0), kl_0.max(0.0));
    let inner = match mode {
        Mode::General => {
            let c = profile.c_pi_p.ok_or_else(|| {
                Error::Config(
                    "the general bound needs c_pi_p; compute it or supply lambda and use the tp mode"
                        .into(),
                )
            })?;
            c * (g_p(kl_n, p)? + g_p(kl_0, p)?) + w
        }
        Mode::Tp => {
            let lambda = tp_lambda(profile)?;
            (2.0 * kl_n / lambda).sqrt() + (2.0 * kl_0 / lambda).sqrt() + w
        }
    };
    Ok(profile.c_p * inner.powf(p) + profile.c_p)
}

fn tp_lambda(profile: &SmoothnessProfile) -> Result<f64> {
    let lambda = profile
        .lambda
        .ok_or_else(|| Error::Config("the tp mode needs lambda".into()))?;
    if !(1.0..=2.0).contains(&profile.p) {
        return Err(Error::Config(format!(
            "the tp mode needs 1 <= p <= 2, got p = {}",
            profile.p
        )));
    }
    Ok(lambda)
}

/// Constant step size of the general theorem, `M(C_p(2 C G_p(KL0) + W)^p + C_p)`.
pub fn step_size_bound(
    profile: &SmoothnessProfile,
    kernel_bounds: (f64, f64),
    k: f64,
    d: usize,
    kl0_upper: f64,
    w_p_mu0: f64,
) -> Result<f64> {
    profile.validate()?;
    let x = exp_grad_bound(kl0_upper, kl0_upper, w_p_mu0, profile, Mode::General)?;
    checked_gamma(m_function(x, &StepConstants::new(profile, kernel_bounds, k, d)))
}

/// Constant step size of the transport-inequality theorem, with `KL(mu_n)`
/// replaced by its upper bound `KL(mu_0)`.
pub fn step_size_bound_tp(
    profile: &SmoothnessProfile,
    kernel_bounds: (f64, f64),
    k: f64,
    d: usize,
    kl0_upper: f64,
    w_p_mu0: f64,
) -> Result<f64> {
    profile.validate()?;
    let x = exp_grad_bound(kl0_upper, kl0_upper, w_p_mu0, profile, Mode::Tp)?;
    checked_gamma(m_function(x, &StepConstants::new(profile, kernel_bounds, k, d)))
}

fn checked_gamma(gamma: f64) -> Result<f64> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(gamma)
    } else {
        Err(Error::Numeric(format!("step-size bound evaluated to {gamma}")))
    }
}

fn gamma_ratio(a: f64, b: f64) -> f64 {
    if a < 170.0 && b < 170.0 {
        let r = libm::tgamma(a) / libm::tgamma(b);
        if r.is_finite() && r > 0.0 {
            return r;
        }
    }
    (libm::lgamma(a) - libm::lgamma(b)).exp()
}

/// `E |X|^(p+1)` for `X ~ N(0, I_d)`: `2^((p+1)/2) Gamma((p+d+1)/2) / Gamma(d/2)`.
pub fn gaussian_moment(p: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Domain("dimension must be positive".into()));
    }
    let d = d as f64;
    if !(p > -d - 1.0) {
        return Err(Error::Domain(format!("moment exponent p = {p} must exceed -d-1")));
    }
    Ok(2f64.powf((p + 1.0) / 2.0) * gamma_ratio((p + d + 1.0) / 2.0, d / 2.0))
}

/// `W_p(N(0, I_d), delta_0) = (E |X|^p)^(1/p)`.
pub fn w_p_standard_normal(p: f64, d: usize) -> Result<f64> {
    Ok(gaussian_moment(p - 1.0, d)?.powf(1.0 / p))
}

/// Upper bound on `KL(N(0, I_d) | pi_bar)`, where `v0` is the potential of
/// the normalized mirrored target at the origin.
pub fn kl0_upper_bound(v0: f64, c_p: f64, p: f64, d: usize) -> Result<f64> {
    let df = d as f64;
    let moment = gaussian_moment(p, d)?;
    let first = (p + 1.0) * 2f64.sqrt() * gamma_ratio((df + 1.0) / 2.0, df / 2.0);
    Ok(0.5 * df * (1.0 / (2.0 * PI * E)).ln() + v0 + c_p / (p + 1.0) * (moment + first))
}

/// Order estimate of the iteration count for accuracy `eps`, with the
/// constants hidden by the asymptotic notation set to 1.
pub fn iteration_estimate(profile: &SmoothnessProfile, eps: f64, d: usize, mode: Mode) -> Result<u64> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let p = profile.p;
    let df = d as f64;
    let n = match mode {
        Mode::General => {
            let c = profile
                .c_pi_p
                .ok_or_else(|| Error::Config("the general estimate needs c_pi_p".into()))?;
            let ratio = gamma_ratio((p + df + 1.0) / 2.0, df / 2.0);
            8f64.powf(p) * c.powf(p) * ratio * ratio / ((p + 1.0) * (p + 1.0) * eps)
        }
        Mode::Tp => {
            let lambda = tp_lambda(profile)?;
            df.powf((p + 2.0) * (p + 1.0) / 4.0) / (lambda.powf(p / 2.0) * eps)
        }
    };
    if !n.is_finite() || n > u64::MAX as f64 {
        return Err(Error::Numeric(format!("iteration estimate overflowed: {n}")));
    }
    Ok(n.ceil() as u64)
}

/// `A_n = L0 + L1 * mean |grad V(x_i)|` over the ensemble.
pub fn a_n(ensemble: &ParticleEnsemble, target: &MirroredTarget, profile: &SmoothnessProfile) -> Result<f64> {
    if profile.l1 == 0.0 {
        return Ok(profile.l0);
    }
    let mut total = 0.0;
    for i in 0..ensemble.len() {
        total += norm(&target.grad_v_at_primal(ensemble.primal_particle(i))?);
    }
    Ok(profile.l0 + profile.l1 * total / ensemble.len() as f64)
}

/// Particle estimate of the mirrored Stein Fisher information.
///
/// This is the V-statistic of the Langevin-Stein kernel of `pi_bar` built on
/// `k_psi(x, y) = k(grad_psi_star(x), grad_psi_star(y))`:
/// `s(x).s(y) k + s(x).grad_y k + grad_x k.s(y) + tr(grad_x grad_y k)` with
/// `s = -grad V`. Every term is evaluated through primal quantities.
pub fn stein_fisher_particles(
    ensemble: &ParticleEnsemble,
    target: &MirroredTarget,
    kernel: &Kernel,
) -> Result<f64> {
    let map = target.map();
    let n = ensemble.len();
    let d = ensemble.dim();
    let mut scores = Vec::with_capacity(n);
    let mut hinv = Vec::with_capacity(n);
    for i in 0..n {
        let theta = ensemble.primal_particle(i);
        let s: Vec<f64> = target.grad_v_at_primal(theta)?.iter().map(|v| -v).collect();
        scores.push(DVector::from_vec(s));
        hinv.push(map.hess_psi_inv(theta)?);
    }
    let mut grad = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..n {
        let ti = ensemble.primal_particle(i);
        for j in i..n {
            let tj = ensemble.primal_particle(j);
            let k = kernel.grad1_into(ti, tj, &mut grad)?;
            let gx = &hinv[i] * DVector::from_column_slice(&grad);
            kernel.grad1_into(tj, ti, &mut grad)?;
            let gy = &hinv[j] * DVector::from_column_slice(&grad);
            let cross = &hinv[i] * kernel.cross_hessian(ti, tj)? * &hinv[j];
            let value = k * scores[i].dot(&scores[j]) + scores[i].dot(&gy) + gx.dot(&scores[j]) + cross.trace();
            total += if i == j { value } else { 2.0 * value };
        }
    }
    let est = total / (n * n) as f64;
    if !est.is_finite() {
        return Err(Error::Numeric("stein fisher estimate is not finite".into()));
    }
    Ok(est)
}

/// Result of the Bolley-Villani constant search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpiEstimate {
    /// Upper bound on the infimum (the minimum over the sampled grid).
    pub value: f64,
    /// The `s` attaining the grid minimum.
    pub s: f64,
    pub x0: Vec<f64>,
    /// Largest sampled `s` for which the exponential moment was finite.
    pub largest_convergent_s: f64,
    pub sampled: usize,
    pub divergent: usize,
}

/// Upper bound on
/// `C = 2 inf_{s > 0} ((3/2 + log ∫ exp(s |x - x0|^p) dpi_bar) / s)^(1/p)`
/// from 64 log-spaced `s` in `[1e-3, s_max]` and `x0` the mean of `pi_bar`.
///
/// Works in `d <= 2` by quadrature, and in any `d` for power-law targets
/// through the radial integral.
pub fn c_pi_p(target: &MirroredTarget, p: f64, s_max: f64) -> Result<CpiEstimate> {
    if !(p >= 1.0) {
        return Err(Error::Domain(format!("c_pi_p needs p >= 1, got {p}")));
    }
    if !(s_max > 1e-3) {
        return Err(Error::Domain(format!("s_max must exceed 1e-3, got {s_max}")));
    }
    let d = target.dim();
    if let TargetKind::PowerLaw { p: q, .. } = target.base().kind() {
        // Radial integral about x0 = 0, the mean by symmetry. The sphere
        // area cancels between the moment and the normalizer.
        let (q, df) = (*q, d as f64);
        let base = 80f64.powf(1.0 / q).max(1.0);
        let radial = |s: f64| {
            log_integral_radial(&|r: f64| s * r.powf(p) - r.powf(q) + (df - 1.0) * r.ln(), base)
        };
        let log_z = radial(0.0)
            .ok_or_else(|| Error::Numeric("normalizing integral did not converge".into()))?;
        return c_pi_p_grid(p, s_max, vec![0.0; d], |s| radial(s).map(|v| v - log_z));
    }
    match d {
        1 => {
            let v = |x: f64| target.v(&[x]).unwrap_or(f64::INFINITY);
            let base = support_radius_1d(&v)?;
            let mean = mean_1d(&v, base);
            let log_z = log_integral_1d(&|x: f64| -v(x), base)
                .ok_or_else(|| Error::Numeric("normalizing integral did not converge".into()))?;
            c_pi_p_grid(p, s_max, vec![mean], |s| {
                log_integral_1d(&|x: f64| s * (x - mean).abs().powf(p) - v(x), base).map(|li| li - log_z)
            })
        }
        2 => {
            let v = |x: f64, y: f64| target.v(&[x, y]).unwrap_or(f64::INFINITY);
            let base = support_radius_2d(&v)?;
            let mean = mean_2d(&v, base);
            let log_z = log_integral_2d(&|x, y| -v(x, y), base)
                .ok_or_else(|| Error::Numeric("normalizing integral did not converge".into()))?;
            c_pi_p_grid(p, s_max, mean.to_vec(), |s| {
                log_integral_2d(
                    &|x, y| {
                        let r = ((x - mean[0]).powi(2) + (y - mean[1]).powi(2)).sqrt();
                        s * r.powf(p) - v(x, y)
                    },
                    base,
                )
                .map(|li| li - log_z)
            })
        }
        _ => Err(Error::Domain(format!(
            "c_pi_p by quadrature supports d <= 2 (or power-law targets), got d = {d}"
        ))),
    }
}

fn c_pi_p_grid(
    p: f64,
    s_max: f64,
    x0: Vec<f64>,
    log_moment: impl Fn(f64) -> Option<f64>,
) -> Result<CpiEstimate> {
    const COUNT: usize = 64;
    let (lo, hi) = (1e-3f64.ln(), s_max.ln());
    let mut best: Option<(f64, f64)> = None;
    let mut largest = 0.0f64;
    let mut divergent = 0;
    for i in 0..COUNT {
        let s = (lo + (hi - lo) * i as f64 / (COUNT - 1) as f64).exp();
        match log_moment(s) {
            Some(lm) if lm.is_finite() => {
                largest = largest.max(s);
                let value = 2.0 * ((1.5 + lm) / s).max(0.0).powf(1.0 / p);
                if best.is_none_or(|(b, _)| value < b) {
                    best = Some((value, s));
                }
            }
            _ => divergent += 1,
        }
    }
    let (value, s) = best.ok_or_else(|| {
        Error::Assumption(format!(
            "exp(s |x - x0|^{p}) is not integrable against the target for any sampled s"
        ))
    })?;
    Ok(CpiEstimate {
        value,
        s,
        x0,
        largest_convergent_s: largest,
        sampled: COUNT,
        divergent,
    })
}

const TAIL_DROP: f64 = 50.0;
const MAX_DOUBLINGS: usize = 8;
// Probe far past the window so slowly divergent integrands are not truncated into convergence.
const FAR: f64 = 1e4;

/// Radius beyond which `exp(-V)` is negligible relative to its peak.
fn support_radius_1d(v: &dyn Fn(f64) -> f64) -> Result<f64> {
    let mut r = 1.0;
    for _ in 0..16 {
        let peak = linspace(-r, r, 2001).map(v).fold(f64::INFINITY, f64::min);
        if v(r) - peak > 60.0 && v(-r) - peak > 60.0 {
            return Ok(r);
        }
        r *= 2.0;
    }
    Err(Error::Assumption("target has too heavy tails for quadrature".into()))
}

fn support_radius_2d(v: &dyn Fn(f64, f64) -> f64) -> Result<f64> {
    let mut r = 1.0;
    for _ in 0..16 {
        let grid: Vec<f64> = linspace(-r, r, 201).collect();
        let mut peak = f64::INFINITY;
        let mut edge = f64::INFINITY;
        for (a, &x) in grid.iter().enumerate() {
            for (b, &y) in grid.iter().enumerate() {
                let val = v(x, y);
                peak = peak.min(val);
                if a == 0 || b == 0 || a == grid.len() - 1 || b == grid.len() - 1 {
                    edge = edge.min(val);
                }
            }
        }
        if edge - peak > 60.0 {
            return Ok(r);
        }
        r *= 2.0;
    }
    Err(Error::Assumption("target has too heavy tails for quadrature".into()))
}

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log ∫_{-R}^{R} exp(f)`, doubling `R` from `base` until the boundary
/// values are negligible. `None` when they never become negligible.
fn log_integral_1d(f: &dyn Fn(f64) -> f64, base: f64) -> Option<f64> {
    let mut r = base;
    for _ in 0..MAX_DOUBLINGS {
        let n = 8001;
        let h = 2.0 * r / (n - 1) as f64;
        let vals: Vec<f64> = linspace(-r, r, n).map(f).collect();
        let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if vals[0] < peak - TAIL_DROP && vals[n - 1] < peak - TAIL_DROP {
            if !(f(-FAR * r) < peak - TAIL_DROP && f(FAR * r) < peak - TAIL_DROP) {
                return None;
            }
            let weights = vals
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i == 0 || i == n - 1 { (0.5 * h).ln() } else { h.ln() });
            return Some(log_sum_exp(weights.collect::<Vec<_>>().into_iter()));
        }
        r *= 2.0;
    }
    None
}

fn log_integral_radial(f: &dyn Fn(f64) -> f64, base: f64) -> Option<f64> {
    let mut r = base;
    for _ in 0..MAX_DOUBLINGS {
        let n = 8001;
        let h = r / (n - 1) as f64;
        // Skip r = 0 where log r diverges; the integrand vanishes there for d > 1.
        let vals: Vec<f64> = linspace(0.0, r, n).map(|x| if x == 0.0 { f(h * 1e-9) } else { f(x) }).collect();
        let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if vals[n - 1] < peak - TAIL_DROP {
            if !(f(FAR * r) < peak - TAIL_DROP) {
                return None;
            }
            let weights = vals
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i == 0 || i == n - 1 { (0.5 * h).ln() } else { h.ln() });
            return Some(log_sum_exp(weights.collect::<Vec<_>>().into_iter()));
        }
        r *= 2.0;
    }
    None
}

fn log_integral_2d(f: &dyn Fn(f64, f64) -> f64, base: f64) -> Option<f64> {
    let mut r = base;
    for _ in 0..MAX_DOUBLINGS {
        let n = 401;
        let h = 2.0 * r / (n - 1) as f64;
        let grid: Vec<f64> = linspace(-r, r, n).collect();
        let mut vals = Vec::with_capacity(n * n);
        let mut edge = f64::NEG_INFINITY;
        for (a, &x) in grid.iter().enumerate() {
            let wa = if a == 0 || a == n - 1 { 0.5 } else { 1.0 };
            for (b, &y) in grid.iter().enumerate() {
                let wb = if b == 0 || b == n - 1 { 0.5 } else { 1.0 };
                let v = f(x, y);
                if a == 0 || b == 0 || a == n - 1 || b == n - 1 {
                    edge = edge.max(v);
                }
                vals.push(v + (wa * wb * h * h).ln());
            }
        }
        let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if edge < peak - TAIL_DROP {
            let far = FAR * r;
            let probes = [(far, 0.0), (-far, 0.0), (0.0, far), (0.0, -far), (far, far), (-far, -far), (far, -far), (-far, far)];
            if !probes.iter().all(|&(x, y)| f(x, y) < peak - TAIL_DROP) {
                return None;
            }
            return Some(log_sum_exp(vals.into_iter()));
        }
        r *= 2.0;
    }
    None
}

fn mean_1d(v: &dyn Fn(f64) -> f64, r: f64) -> f64 {
    let xs: Vec<f64> = linspace(-r, r, 8001).collect();
    let vmin = xs.iter().map(|&x| v(x)).fold(f64::INFINITY, f64::min);
    let (mut m0, mut m1) = (0.0, 0.0);
    for &x in &xs {
        let w = (vmin - v(x)).exp();
        m0 += w;
        m1 += w * x;
    }
    m1 / m0
}

fn mean_2d(v: &dyn Fn(f64, f64) -> f64, r: f64) -> [f64; 2] {
    let xs: Vec<f64> = linspace(-r, r, 401).collect();
    let mut vals = Vec::with_capacity(xs.len() * xs.len());
    for &x in &xs {
        for &y in &xs {
            vals.push((x, y, v(x, y)));
        }
    }
    let vmin = vals.iter().map(|t| t.2).fold(f64::INFINITY, f64::min);
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (x, y, val) in vals {
        let w = (vmin - val).exp();
        m0 += w;
        mx += w * x;
        my += w * y;
    }
    [mx / m0, my / m0]
}
