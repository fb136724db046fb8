//! Target densities `pi ∝ exp(-F)` on a constraint set and their mirrored
//! counterparts `pi_bar = grad_psi # pi ∝ exp(-V)` on `R^d`.
//!
//! For a primal target the mirrored potential is
//! `V(x) = F(theta) - log det hess_psi_star(x)` with `theta = grad_psi_star(x)`,
//! and its gradient reduces to primal quantities only:
//! `grad V(x) = -(hess_psi_inv(theta) grad log pi(theta) + div hess_psi_inv(theta))`.
//!
//! [`TargetKind::PowerLaw`] goes the other way: it is specified by
//! `V(x) = |x|^p` in dual space and its primal density is the pullback.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mirror::{simplex_remainder, Domain, MirrorMap};
use crate::theory::{Provenance, SmoothnessProfile};

#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    /// Dirichlet on the `d`-coordinate simplex chart; `alpha` has `d + 1` entries.
    Dirichlet { alpha: Vec<f64> },
    /// Gaussian `N(mean, cov)`, restricted to an open box when `bounds` is set.
    Gaussian {
        mean: Vec<f64>,
        cov: DMatrix<f64>,
        precision: DMatrix<f64>,
        bounds: Option<(Vec<f64>, Vec<f64>)>,
    },
    /// Dual-space `V(x) = |x|^p`, pulled back through `map`.
    PowerLaw { p: f64, map: MirrorMap },
}

/// A density on a constraint set, known up to a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedTarget {
    kind: TargetKind,
    domain: Domain,
}

impl ConstrainedTarget {
    pub fn dirichlet(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::Config(
                "dirichlet needs at least two concentrations".into(),
            ));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!(
                "dirichlet concentrations must be positive, got {a}"
            )));
        }
        let dim = alpha.len() - 1;
        Ok(Self {
            kind: TargetKind::Dirichlet { alpha },
            domain: Domain::Simplex { dim },
        })
    }

    /// Unrestricted Gaussian on `R^d`.
    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        let precision = gaussian_precision(&mean, &cov)?;
        Ok(Self {
            kind: TargetKind::Gaussian {
                mean,
                cov,
                precision,
                bounds: None,
            },
            domain: Domain::Euclidean { dim },
        })
    }

    /// Gaussian restricted to the open box `(lo, hi)`.
    pub fn truncated_gaussian(
        mean: Vec<f64>,
        cov: DMatrix<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Result<Self> {
        let precision = gaussian_precision(&mean, &cov)?;
        if lo.len() != mean.len() || hi.len() != mean.len() {
            return Err(Error::Config("box bounds must match the mean's length".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(Error::Config("box bounds need finite lo < hi".into()));
        }
        Ok(Self {
            kind: TargetKind::Gaussian {
                mean,
                cov,
                precision,
                bounds: Some((lo.clone(), hi.clone())),
            },
            domain: Domain::Box { lo, hi },
        })
    }

    /// The target whose mirrored potential under `map` is `|x|^p`.
    pub fn power_law(p: f64, map: MirrorMap) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(Error::Config(format!("power-law exponent must be >= 1, got {p}")));
        }
        Ok(Self {
            domain: map.domain().clone(),
            kind: TargetKind::PowerLaw { p, map },
        })
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            TargetKind::Dirichlet { .. } => "dirichlet",
            TargetKind::Gaussian { bounds: None, .. } => "gaussian",
            TargetKind::Gaussian { .. } => "truncated-gaussian",
            TargetKind::PowerLaw { .. } => "power-law",
        }
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if self.domain.contains(theta) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "{theta:?} is not strictly inside the target's domain"
            )))
        }
    }

    /// `log pi(theta)` up to an additive constant.
    pub fn log_density_unnorm(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        Ok(match &self.kind {
            TargetKind::Dirichlet { alpha } => {
                let d = theta.len();
                theta
                    .iter()
                    .zip(alpha)
                    .map(|(t, a)| (a - 1.0) * t.ln())
                    .sum::<f64>()
                    + (alpha[d] - 1.0) * simplex_remainder(theta).ln()
            }
            TargetKind::Gaussian {
                mean, precision, ..
            } => {
                let r = DVector::from_iterator(mean.len(), theta.iter().zip(mean).map(|(t, m)| t - m));
                -0.5 * r.dot(&(precision * &r))
            }
            TargetKind::PowerLaw { p, map } => {
                let x = map.grad_psi(theta)?;
                -norm(&x).powf(*p) - map.log_det_hess_psi_inv(theta)?
            }
        })
    }

    /// `grad log pi(theta)`.
    pub fn grad_log_density(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        Ok(match &self.kind {
            TargetKind::Dirichlet { alpha } => {
                let d = theta.len();
                let tail = (alpha[d] - 1.0) / simplex_remainder(theta);
                theta
                    .iter()
                    .zip(alpha)
                    .map(|(t, a)| (a - 1.0) / t - tail)
                    .collect()
            }
            TargetKind::Gaussian {
                mean, precision, ..
            } => {
                let r = DVector::from_iterator(mean.len(), theta.iter().zip(mean).map(|(t, m)| t - m));
                (-(precision * r)).as_slice().to_vec()
            }
            // log pi = -V(grad_psi) - log det H^{-1}, and the gradient of the
            // log-determinant in theta is hess_psi times div H^{-1}.
            TargetKind::PowerLaw { p, map } => {
                let x = map.grad_psi(theta)?;
                let mut v = power_law_grad(&x, *p);
                for (vi, di) in v.iter_mut().zip(map.div_hess_psi_inv(theta)?) {
                    *vi += di;
                }
                let g = map.hess_psi(theta)? * DVector::from_vec(v);
                g.iter().map(|c| -c).collect()
            }
        })
    }
}

fn gaussian_precision(mean: &[f64], cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = mean.len();
    if d == 0 || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Config(format!(
            "covariance must be {d}x{d}, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::Config("covariance must be symmetric".into()));
    }
    cov.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Config("covariance must be positive definite".into()))
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `grad |x|^p = p |x|^(p-2) x`, taken as 0 at the origin.
fn power_law_grad(x: &[f64], p: f64) -> Vec<f64> {
    let r = norm(x);
    if r == 0.0 {
        return vec![0.0; x.len()];
    }
    let scale = p * r.powf(p - 2.0);
    x.iter().map(|v| scale * v).collect()
}

fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// A constrained target viewed through a mirror map.
#[derive(Debug, Clone, PartialEq)]
pub struct MirroredTarget {
    base: ConstrainedTarget,
    map: MirrorMap,
}

impl MirroredTarget {
    pub fn new(base: ConstrainedTarget, map: MirrorMap) -> Result<Self> {
        if base.domain() != map.domain() {
            return Err(Error::Config(format!(
                "target domain {:?} does not match the {} map's domain {:?}",
                base.domain(),
                map.name(),
                map.domain()
            )));
        }
        if let TargetKind::PowerLaw { map: own, .. } = base.kind() {
            if own != &map {
                return Err(Error::Config(
                    "a power-law target must be mirrored through the map it was defined with".into(),
                ));
            }
        }
        Ok(Self { base, map })
    }

    pub fn base(&self) -> &ConstrainedTarget {
        &self.base
    }

    pub fn map(&self) -> &MirrorMap {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    /// Mirrored potential `V(x)`, with the same additive constant as
    /// [`ConstrainedTarget::log_density_unnorm`].
    pub fn v(&self, x: &[f64]) -> Result<f64> {
        if let TargetKind::PowerLaw { p, .. } = self.base.kind() {
            check_finite(x)?;
            return Ok(norm(x).powf(*p));
        }
        let theta = self.map.grad_psi_star(x)?;
        Ok(-self.base.log_density_unnorm(&theta)? - self.map.log_det_hess_psi_inv(&theta)?)
    }

    pub fn grad_v(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let TargetKind::PowerLaw { p, .. } = self.base.kind() {
            check_finite(x)?;
            return Ok(power_law_grad(x, *p));
        }
        let theta = self.map.grad_psi_star(x)?;
        self.grad_v_at_primal(&theta)
    }

    /// `grad V` at `x = grad_psi(theta)`, computed from primal quantities.
    pub fn grad_v_at_primal(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if let TargetKind::PowerLaw { p, .. } = self.base.kind() {
            return Ok(power_law_grad(&self.map.grad_psi(theta)?, *p));
        }
        let score = DVector::from_vec(self.base.grad_log_density(theta)?);
        let drift = self.map.hess_psi_inv(theta)? * score;
        let div = self.map.div_hess_psi_inv(theta)?;
        Ok(drift.iter().zip(div).map(|(a, b)| -(a + b)).collect())
    }

    /// `log ∫ exp(-V(x)) dx` where a closed form is available.
    pub fn log_normalizer(&self) -> Option<f64> {
        let d = self.dim() as f64;
        match self.base.kind() {
            TargetKind::Dirichlet { alpha } => {
                let total: f64 = alpha.iter().sum();
                Some(alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>() - ln_gamma(total))
            }
            TargetKind::Gaussian { mean, cov, bounds, .. } => {
                let log_det = cov.clone().cholesky()?.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
                let mut z = 0.5 * d * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det;
                if let Some((lo, hi)) = bounds {
                    let diagonal = (0..mean.len())
                        .all(|i| (0..mean.len()).all(|j| i == j || cov[(i, j)] == 0.0));
                    if !diagonal {
                        return None;
                    }
                    for i in 0..mean.len() {
                        let s = cov[(i, i)].sqrt();
                        let mass = normal_interval((lo[i] - mean[i]) / s, (hi[i] - mean[i]) / s);
                        z += mass.ln();
                    }
                }
                Some(z)
            }
            TargetKind::PowerLaw { p, .. } => Some(
                std::f64::consts::LN_2 + 0.5 * d * std::f64::consts::PI.ln() + ln_gamma(d / p)
                    - p.ln()
                    - ln_gamma(0.5 * d),
            ),
        }
    }

    /// `V(0) + log Z`, the potential of the normalized mirrored density at the origin.
    pub fn normalized_v_at_origin(&self) -> Result<f64> {
        let log_z = self.log_normalizer().ok_or_else(|| {
            Error::Assumption("no closed-form normalizing constant for this target".into())
        })?;
        Ok(self.v(&vec![0.0; self.dim()])? + log_z)
    }

    /// Smoothness and growth constants from the analytic catalog.
    ///
    /// Returns an assumption error when the pair is not cataloged or the
    /// potential is not `(L0, L1)`-smooth; use [`MirroredTarget::empirical_profile`]
    /// for an advisory estimate.
    pub fn smoothness_profile(&self) -> Result<SmoothnessProfile> {
        let analytic = |l0, l1, c_p, p, lambda| {
            let mut prof = SmoothnessProfile::new(l0, l1, c_p, p, Provenance::Analytic);
            if let Some(l) = lambda {
                prof = prof.with_lambda(l, Provenance::Analytic);
            }
            prof
        };
        match self.base.kind() {
            TargetKind::PowerLaw { p: q, .. } => {
                let q = *q;
                let growth = (q - 1.0).max(1.0);
                if q > 2.0 {
                    Ok(analytic(q * (q - 1.0).powf(q - 1.0), 1.0, q, growth, None))
                } else if q == 2.0 {
                    Ok(analytic(2.0, 0.0, 2.0, 1.0, Some(2.0)))
                } else {
                    Err(Error::Assumption(format!(
                        "|x|^{q} has a Hessian that is unbounded at the origin; L0 and L1 are unknown"
                    )))
                }
            }
            TargetKind::Gaussian {
                mean,
                precision,
                bounds: None,
                ..
            } => {
                let eig = SymmetricEigen::new(precision.clone()).eigenvalues;
                let top = eig.max();
                let bottom = eig.min();
                let c_p = top * norm(mean).max(1.0);
                Ok(analytic(top, 0.0, c_p, 1.0, Some(bottom)))
            }
            TargetKind::Dirichlet { alpha } => {
                let total: f64 = alpha.iter().sum();
                let d = alpha.len() - 1;
                let l0 = if d == 1 { total / 4.0 } else { total / 2.0 };
                let c_p = norm(&alpha[..d]) + total;
                Ok(analytic(l0, 0.0, c_p, 1.0, None))
            }
            TargetKind::Gaussian { .. } => Err(Error::Assumption(
                "no analytic smoothness profile for a truncated gaussian; use an empirical profile"
                    .into(),
            )),
        }
    }

    /// Advisory smoothness constants measured over a cloud of dual points
    /// (row-major, `dim` columns). Hessians are central differences of `grad_v`.
    ///
    /// `L1` is chosen from {0, 1} to minimise `L0 + L1 * mean |grad V|`, and
    /// the growth constant uses `p = 1`.
    pub fn empirical_profile(&self, points: &[f64]) -> Result<SmoothnessProfile> {
        let d = self.dim();
        if points.is_empty() || !points.len().is_multiple_of(d) {
            return Err(Error::Config("empirical profile needs a non-empty point cloud".into()));
        }
        let h = 1e-5;
        let mut max_hess = 0.0f64;
        let mut max_excess = f64::NEG_INFINITY;
        let mut grad_sum = 0.0;
        let mut c_p = 0.0f64;
        let mut count = 0usize;
        let mut shifted = vec![0.0; d];
        for x in points.chunks(d) {
            let g = self.grad_v(x)?;
            let gnorm = norm(&g);
            let mut hess = DMatrix::zeros(d, d);
            for j in 0..d {
                shifted.copy_from_slice(x);
                shifted[j] = x[j] + h;
                let plus = self.grad_v(&shifted)?;
                shifted[j] = x[j] - h;
                let minus = self.grad_v(&shifted)?;
                for i in 0..d {
                    hess[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
                }
            }
            let sym = (&hess + hess.transpose()) * 0.5;
            let op = SymmetricEigen::new(sym).eigenvalues.amax();
            if !op.is_finite() || !gnorm.is_finite() {
                return Err(Error::Numeric(format!("non-finite derivative of V at {x:?}")));
            }
            max_hess = max_hess.max(op);
            max_excess = max_excess.max(op - gnorm);
            grad_sum += gnorm;
            c_p = c_p.max(gnorm / (norm(x) + 1.0));
            count += 1;
        }
        let mean_grad = grad_sum / count as f64;
        let l0_with_l1 = max_excess.max(0.0);
        let (l0, l1) = if l0_with_l1 + mean_grad < max_hess {
            (l0_with_l1, 1.0)
        } else {
            (max_hess, 0.0)
        };
        Ok(SmoothnessProfile::new(l0, l1, c_p, 1.0, Provenance::Empirical))
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numeric(format!("non-finite dual coordinate {v}"))),
        None => Ok(()),
    }
}

/// `P(a < Z < b)` for a standard normal `Z`.
fn normal_interval(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if a >= 0.0 {
        0.5 * (libm::erfc(a * s) - libm::erfc(b * s))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * s) - libm::erfc(-a * s))
    } else {
        1.0 - 0.5 * (libm::erfc(-a * s) + libm::erfc(b * s))
    }
}
