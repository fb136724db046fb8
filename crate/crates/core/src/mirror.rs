//! Mirror functions on convex constraint sets.
//!
//! A [`MirrorMap`] bundles a strongly convex function `psi` on an open set
//! together with everything the sampler needs from it: the mirror map
//! `grad_psi` onto the dual space, its inverse `grad_psi_star`, the inverse
//! Hessian and the row-wise divergence of that inverse Hessian.
//!
//! Three maps are provided:
//!
//! | name               | domain                                   | psi                                      |
//! |--------------------|------------------------------------------|------------------------------------------|
//! | `entropic-simplex` | `{theta_i > 0, sum theta_i < 1}`         | `sum t log t + (1 - sum t) log(1 - sum t)` |
//! | `entropic-box`     | `prod (lo_i, hi_i)`                      | coordinatewise `(t-lo)log(t-lo) + (hi-t)log(hi-t)` |
//! | `euclidean`        | `R^d`                                    | `|theta|^2 / 2`                          |
//!
//! All closed forms (inverse Hessian, divergence, log-determinant) are
//! certified against finite-difference oracles in the test suite.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// The constraint set a mirror map lives on.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// The open probability simplex in its `d`-coordinate chart.
    Simplex { dim: usize },
    /// An open axis-aligned box.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// All of `R^d`.
    Euclidean { dim: usize },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Simplex { dim } | Domain::Euclidean { dim } => *dim,
            Domain::Box { lo, .. } => lo.len(),
        }
    }

    /// Strict-interior membership test.
    pub fn contains(&self, theta: &[f64]) -> bool {
        if theta.len() != self.dim() || theta.iter().any(|t| !t.is_finite()) {
            return false;
        }
        match self {
            Domain::Simplex { .. } => {
                theta.iter().all(|&t| t > 0.0) && simplex_remainder(theta) > 0.0
            }
            Domain::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&t, (&l, &h))| t > l && t < h),
            Domain::Euclidean { .. } => true,
        }
    }
}

/// `1 - sum(theta)` with compensated summation.
pub fn simplex_remainder(theta: &[f64]) -> f64 {
    let mut sum = 1.0f64;
    let mut comp = 0.0f64;
    for &t in theta {
        let v = -t;
        let s = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - s) + v;
        } else {
            comp += (v - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorKind {
    EntropicSimplex,
    EntropicBox,
    Euclidean,
}

/// A strongly convex mirror function with its derivatives.
///
/// Values are immutable after construction; every method is a pure function.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorMap {
    kind: MirrorKind,
    domain: Domain,
    strong_convexity: f64,
}

impl MirrorMap {
    /// Entropic mirror function on the `d`-dimensional simplex chart (1-strongly convex).
    pub fn entropic_simplex(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("simplex dimension must be at least 1".into()));
        }
        Ok(Self {
            kind: MirrorKind::EntropicSimplex,
            domain: Domain::Simplex { dim },
            strong_convexity: 1.0,
        })
    }

    /// Coordinatewise entropic mirror function on an open box.
    ///
    /// The Hessian is `diag(w_i / ((t_i - lo_i)(hi_i - t_i)))`, minimised at the
    /// box centre, so the strong-convexity constant is `4 / max_i w_i`.
    pub fn entropic_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Config(
                "box bounds must be non-empty and of equal length".into(),
            ));
        }
        let mut widest = 0.0f64;
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && h > l) {
                return Err(Error::Config(format!(
                    "box coordinate {i}: need finite lo < hi, got ({l}, {h})"
                )));
            }
            widest = widest.max(h - l);
        }
        Ok(Self {
            kind: MirrorKind::EntropicBox,
            domain: Domain::Box { lo, hi },
            strong_convexity: 4.0 / widest,
        })
    }

    /// `psi = |theta|^2 / 2`; the mirror map is the identity.
    pub fn euclidean(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        Ok(Self {
            kind: MirrorKind::Euclidean,
            domain: Domain::Euclidean { dim },
            strong_convexity: 1.0,
        })
    }

    pub fn kind(&self) -> MirrorKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MirrorKind::EntropicSimplex => "entropic-simplex",
            MirrorKind::EntropicBox => "entropic-box",
            MirrorKind::Euclidean => "euclidean",
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// The constant `K` with `psi` strongly `K`-convex.
    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.domain.contains(theta)
    }

    fn check_interior(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Domain(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                theta.len()
            )));
        }
        if self.domain.contains(theta) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "{theta:?} is not strictly inside the {} domain",
                self.name()
            )))
        }
    }

    pub fn psi(&self, theta: &[f64]) -> Result<f64> {
        self.check_interior(theta)?;
        Ok(match &self.domain {
            Domain::Simplex { .. } => {
                let r = simplex_remainder(theta);
                theta.iter().map(|&t| t * t.ln()).sum::<f64>() + r * r.ln()
            }
            Domain::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&t, (&l, &h))| (t - l) * (t - l).ln() + (h - t) * (h - t).ln())
                .sum(),
            Domain::Euclidean { .. } => 0.5 * theta.iter().map(|t| t * t).sum::<f64>(),
        })
    }

    /// The mirror map `grad psi: Omega -> R^d`.
    pub fn grad_psi(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_interior(theta)?;
        Ok(match &self.domain {
            Domain::Simplex { .. } => {
                let log_r = simplex_remainder(theta).ln();
                theta.iter().map(|&t| t.ln() - log_r).collect()
            }
            Domain::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&t, (&l, &h))| (t - l).ln() - (h - t).ln())
                .collect(),
            Domain::Euclidean { .. } => theta.to_vec(),
        })
    }

    /// The inverse mirror map `grad psi*: R^d -> Omega`.
    ///
    /// Never clamps: if the result underflows onto the boundary a numeric
    /// error is returned instead.
    pub fn grad_psi_star(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Numeric(format!(
                "expected {} dual coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite dual coordinate {bad}")));
        }
        let theta: Vec<f64> = match &self.domain {
            Domain::Simplex { .. } => {
                let shift = x.iter().copied().fold(0.0f64, f64::max);
                let implicit = (-shift).exp();
                let exps: Vec<f64> = x.iter().map(|&v| (v - shift).exp()).collect();
                let denom = implicit + exps.iter().sum::<f64>();
                exps.into_iter().map(|e| e / denom).collect()
            }
            Domain::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&v, (&l, &h))| {
                    let w = h - l;
                    if v >= 0.0 {
                        h - w * logistic(-v)
                    } else {
                        l + w * logistic(v)
                    }
                })
                .collect(),
            Domain::Euclidean { .. } => x.to_vec(),
        };
        if !self.domain.contains(&theta) {
            return Err(Error::Numeric(format!(
                "inverse mirror map of {x:?} left the open {} domain (underflow)",
                self.name()
            )));
        }
        Ok(theta)
    }

    /// Hessian of `psi`.
    pub fn hess_psi(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_interior(theta)?;
        let d = self.dim();
        Ok(match &self.domain {
            Domain::Simplex { .. } => {
                let inv_r = 1.0 / simplex_remainder(theta);
                DMatrix::from_fn(d, d, |i, j| {
                    if i == j {
                        1.0 / theta[i] + inv_r
                    } else {
                        inv_r
                    }
                })
            }
            Domain::Box { lo, hi } => DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    let (a, b) = (theta[i] - lo[i], hi[i] - theta[i]);
                    (hi[i] - lo[i]) / (a * b)
                } else {
                    0.0
                }
            }),
            Domain::Euclidean { .. } => DMatrix::identity(d, d),
        })
    }

    /// Inverse Hessian of `psi`, equal to the Hessian of `psi*` at `grad_psi(theta)`.
    pub fn hess_psi_inv(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_interior(theta)?;
        let d = self.dim();
        Ok(match &self.domain {
            // Sherman-Morrison on diag(1/t) + 11^T / r gives diag(t) - t t^T.
            Domain::Simplex { .. } => DMatrix::from_fn(d, d, |i, j| {
                let outer = theta[i] * theta[j];
                if i == j {
                    theta[i] - outer
                } else {
                    -outer
                }
            }),
            Domain::Box { lo, hi } => DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    (theta[i] - lo[i]) * (hi[i] - theta[i]) / (hi[i] - lo[i])
                } else {
                    0.0
                }
            }),
            Domain::Euclidean { .. } => DMatrix::identity(d, d),
        })
    }

    /// Row-wise divergence `sum_j d/dtheta_j [hess_psi_inv]_{ij}`.
    pub fn div_hess_psi_inv(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_interior(theta)?;
        let d = self.dim();
        Ok(match &self.domain {
            Domain::Simplex { .. } => {
                theta.iter().map(|&t| 1.0 - (d as f64 + 1.0) * t).collect()
            }
            Domain::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&t, (&l, &h))| (h + l - 2.0 * t) / (h - l))
                .collect(),
            Domain::Euclidean { .. } => vec![0.0; d],
        })
    }

    /// `log det hess_psi_inv(theta)`, i.e. `log det` of the Hessian of `psi*`.
    pub fn log_det_hess_psi_inv(&self, theta: &[f64]) -> Result<f64> {
        self.check_interior(theta)?;
        Ok(match &self.domain {
            // Matrix determinant lemma: det(diag(t) - t t^T) = prod(t) (1 - sum t).
            Domain::Simplex { .. } => {
                theta.iter().map(|t| t.ln()).sum::<f64>() + simplex_remainder(theta).ln()
            }
            Domain::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&t, (&l, &h))| ((t - l) * (h - t) / (h - l)).ln())
                .sum(),
            Domain::Euclidean { .. } => 0.0,
        })
    }
}

/// Numerically stable logistic function.
pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
