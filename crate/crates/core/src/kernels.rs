//! Scalar positive-definite kernels on the constraint set.
//!
//! Every kernel exposes its value, the gradient in its first argument and the
//! mixed second derivative `d^2 k / (da_i db_j)`, together with the constants
//! `B1` (`k(t, t) <= B1^2`) and `B2` (mixed derivative at coincidence
//! `<= B2^2`) that enter the step-size formulas.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mirror::MirrorMap;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    /// `(c^2 + |a - b|^2)^beta` with `c > 0` and `-1 < beta < 0`.
    Imq { c: f64, beta: f64 },
    /// `exp(-|a - b|^2 / (2 h^2))`; with `median` set the bandwidth is
    /// re-estimated from the particles before every step.
    Rbf { bandwidth: f64, median: bool },
    /// `inner(a / scale, b / scale)`.
    Rescaled { inner: Box<Kernel>, scale: f64 },
    /// Inverse multiquadric evaluated on dual coordinates:
    /// `k(a, b) = (c^2 + |grad_psi(a) - grad_psi(b)|^2)^beta`.
    DualImq { c: f64, beta: f64, map: MirrorMap },
}

/// A kernel together with its bound constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    kind: KernelKind,
    b1: f64,
    b2: f64,
}

/// Radial profile `f(u)` with `u = |a - b|^2`, and its first two derivatives.
#[derive(Debug, Clone, Copy)]
enum Radial {
    Imq { c2: f64, beta: f64 },
    Rbf { inv_two_h2: f64 },
}

impl Radial {
    #[inline]
    fn f(self, u: f64) -> (f64, f64, f64) {
        match self {
            Radial::Imq { c2, beta } => {
                let base = c2 + u;
                let v = base.powf(beta);
                let d1 = beta * v / base;
                let d2 = (beta - 1.0) * d1 / base;
                (v, d1, d2)
            }
            Radial::Rbf { inv_two_h2 } => {
                let v = (-u * inv_two_h2).exp();
                (v, -inv_two_h2 * v, inv_two_h2 * inv_two_h2 * v)
            }
        }
    }

    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        self.f(sq_dist(a, b)).0
    }

    fn grad1(self, a: &[f64], b: &[f64], out: &mut [f64]) -> f64 {
        let (v, d1, _) = self.f(sq_dist(a, b));
        for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
            *o = 2.0 * d1 * (ai - bi);
        }
        v
    }

    fn cross_hessian(self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        let (_, d1, d2) = self.f(sq_dist(a, b));
        let d = a.len();
        DMatrix::from_fn(d, d, |i, j| {
            let diag = if i == j { -2.0 * d1 } else { 0.0 };
            diag - 4.0 * d2 * (a[i] - b[i]) * (a[j] - b[j])
        })
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(a: &[f64], b: &[f64]) -> Result<()> {
    if a.iter().chain(b).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "kernel evaluated at non-finite point {a:?}, {b:?}"
        )))
    }
}

fn check_imq(c: f64, beta: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("imq: c must be positive, got {c}")));
    }
    if !(beta > -1.0 && beta < 0.0) {
        return Err(Error::Config(format!("imq: beta must lie in (-1, 0), got {beta}")));
    }
    Ok(())
}

/// Largest central-difference mixed second derivative at coincidence, sampled
/// over a few base points.
fn sampled_mixed_derivative(f: impl Fn(f64, f64) -> f64, length_scale: f64) -> f64 {
    let h = 1e-4 * length_scale;
    [0.0, 0.37, -1.9]
        .iter()
        .map(|&p| {
            let p = p * length_scale;
            (f(p + h, p + h) - f(p + h, p - h) - f(p - h, p + h) + f(p - h, p - h)) / (4.0 * h * h)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

impl Kernel {
    /// Inverse multiquadric kernel. `B2` is measured numerically here.
    pub fn imq(c: f64, beta: f64) -> Result<Self> {
        check_imq(c, beta)?;
        let radial = Radial::Imq { c2: c * c, beta };
        let mixed = sampled_mixed_derivative(|a, b| radial.eval(&[a], &[b]), c);
        Ok(Self {
            kind: KernelKind::Imq { c, beta },
            b1: c.powf(beta),
            b2: mixed.max(0.0).sqrt(),
        })
    }

    /// Gaussian kernel with a fixed bandwidth.
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "rbf: bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            kind: KernelKind::Rbf {
                bandwidth,
                median: false,
            },
            b1: 1.0,
            b2: 1.0 / bandwidth,
        })
    }

    /// Gaussian kernel whose bandwidth follows the median heuristic.
    /// Starts at bandwidth 1 until [`Kernel::update_bandwidth`] is called.
    pub fn rbf_median() -> Self {
        Self {
            kind: KernelKind::Rbf {
                bandwidth: 1.0,
                median: true,
            },
            b1: 1.0,
            b2: 1.0,
        }
    }

    /// `inner(a / scale, b / scale)`; `B2` shrinks by the scale.
    pub fn rescaled(inner: Kernel, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("rescale factor must be positive, got {scale}")));
        }
        let (b1, b2) = inner.bounds();
        Ok(Self {
            kind: KernelKind::Rescaled {
                inner: Box::new(inner),
                scale,
            },
            b1,
            b2: b2 / scale,
        })
    }

    /// Inverse multiquadric on dual coordinates.
    ///
    /// The reported `B2` is the dual-coordinate mixed-derivative bound; on
    /// the primal chart the mixed derivative is unbounded near the boundary.
    pub fn dual_imq(c: f64, beta: f64, map: MirrorMap) -> Result<Self> {
        check_imq(c, beta)?;
        let radial = Radial::Imq { c2: c * c, beta };
        let mixed = sampled_mixed_derivative(|a, b| radial.eval(&[a], &[b]), c);
        Ok(Self {
            kind: KernelKind::DualImq { c, beta, map },
            b1: c.powf(beta),
            b2: mixed.max(0.0).sqrt(),
        })
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            KernelKind::Imq { .. } => "imq",
            KernelKind::Rbf { .. } => "rbf",
            KernelKind::Rescaled { inner, .. } => inner.name(),
            KernelKind::DualImq { .. } => "dual-imq",
        }
    }

    /// `(B1, B2)`.
    pub fn bounds(&self) -> (f64, f64) {
        (self.b1, self.b2)
    }

    /// True when the kernel is defined through dual coordinates.
    pub fn is_dual(&self) -> bool {
        match &self.kind {
            KernelKind::DualImq { .. } => true,
            KernelKind::Rescaled { inner, .. } => inner.is_dual(),
            _ => false,
        }
    }

    /// Current bandwidth for Gaussian kernels (possibly nested in a rescale).
    pub fn bandwidth(&self) -> Option<f64> {
        match &self.kind {
            KernelKind::Rbf { bandwidth, .. } => Some(*bandwidth),
            KernelKind::Rescaled { inner, .. } => inner.bandwidth(),
            _ => None,
        }
    }

    pub fn uses_median_heuristic(&self) -> bool {
        match &self.kind {
            KernelKind::Rbf { median, .. } => *median,
            KernelKind::Rescaled { inner, .. } => inner.uses_median_heuristic(),
            _ => false,
        }
    }

    /// Median heuristic: `h^2 = median(|a_i - a_j|^2) / (2 log(N + 1))`.
    ///
    /// `points` is row-major with `dim` columns. No-op for kernels without a
    /// median bandwidth, and when every pairwise distance is zero.
    pub fn update_bandwidth(&mut self, points: &[f64], dim: usize) {
        match &mut self.kind {
            KernelKind::Rbf {
                bandwidth,
                median: true,
            } => {
                if let Some(h) = median_bandwidth(points, dim) {
                    *bandwidth = h;
                    self.b2 = 1.0 / h;
                }
            }
            KernelKind::Rescaled { inner, scale } => {
                let scaled: Vec<f64> = points.iter().map(|p| p / *scale).collect();
                inner.update_bandwidth(&scaled, dim);
                let (b1, b2) = inner.bounds();
                self.b1 = b1;
                self.b2 = b2 / *scale;
            }
            _ => {}
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_finite(a, b)?;
        Ok(match &self.kind {
            KernelKind::Imq { c, beta } => Radial::Imq { c2: c * c, beta: *beta }.eval(a, b),
            KernelKind::Rbf { bandwidth, .. } => Radial::Rbf {
                inv_two_h2: 0.5 / (bandwidth * bandwidth),
            }
            .eval(a, b),
            KernelKind::Rescaled { inner, scale } => {
                let (sa, sb) = (scale_point(a, *scale), scale_point(b, *scale));
                inner.eval(&sa, &sb)?
            }
            KernelKind::DualImq { c, beta, map } => {
                let (xa, xb) = (map.grad_psi(a)?, map.grad_psi(b)?);
                Radial::Imq { c2: c * c, beta: *beta }.eval(&xa, &xb)
            }
        })
    }

    /// Gradient in the first argument, written into `out`; returns `k(a, b)`.
    pub fn grad1_into(&self, a: &[f64], b: &[f64], out: &mut [f64]) -> Result<f64> {
        check_finite(a, b)?;
        Ok(match &self.kind {
            KernelKind::Imq { c, beta } => {
                Radial::Imq { c2: c * c, beta: *beta }.grad1(a, b, out)
            }
            KernelKind::Rbf { bandwidth, .. } => Radial::Rbf {
                inv_two_h2: 0.5 / (bandwidth * bandwidth),
            }
            .grad1(a, b, out),
            KernelKind::Rescaled { inner, scale } => {
                let (sa, sb) = (scale_point(a, *scale), scale_point(b, *scale));
                let v = inner.grad1_into(&sa, &sb, out)?;
                out.iter_mut().for_each(|o| *o /= *scale);
                v
            }
            KernelKind::DualImq { c, beta, map } => {
                let (xa, xb) = (map.grad_psi(a)?, map.grad_psi(b)?);
                let mut dual = vec![0.0; a.len()];
                let v = Radial::Imq { c2: c * c, beta: *beta }.grad1(&xa, &xb, &mut dual);
                let hess = map.hess_psi(a)?;
                let g = hess * nalgebra::DVector::from_vec(dual);
                out.copy_from_slice(g.as_slice());
                v
            }
        })
    }

    pub fn grad1(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; a.len()];
        self.grad1_into(a, b, &mut out)?;
        Ok(out)
    }

    /// Mixed second derivative matrix `C_ij = d^2 k(a, b) / (da_i db_j)`.
    pub fn cross_hessian(&self, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
        check_finite(a, b)?;
        Ok(match &self.kind {
            KernelKind::Imq { c, beta } => {
                Radial::Imq { c2: c * c, beta: *beta }.cross_hessian(a, b)
            }
            KernelKind::Rbf { bandwidth, .. } => Radial::Rbf {
                inv_two_h2: 0.5 / (bandwidth * bandwidth),
            }
            .cross_hessian(a, b),
            KernelKind::Rescaled { inner, scale } => {
                let (sa, sb) = (scale_point(a, *scale), scale_point(b, *scale));
                inner.cross_hessian(&sa, &sb)? / (scale * scale)
            }
            KernelKind::DualImq { c, beta, map } => {
                let (xa, xb) = (map.grad_psi(a)?, map.grad_psi(b)?);
                let dual = Radial::Imq { c2: c * c, beta: *beta }.cross_hessian(&xa, &xb);
                map.hess_psi(a)? * dual * map.hess_psi(b)?
            }
        })
    }
}

fn scale_point(p: &[f64], scale: f64) -> Vec<f64> {
    p.iter().map(|v| v / scale).collect()
}

/// Median-heuristic bandwidth, or `None` when it is undefined (fewer than
/// two distinct points).
pub fn median_bandwidth(points: &[f64], dim: usize) -> Option<f64> {
    let n = points.len().checked_div(dim).unwrap_or(0);
    if n < 2 {
        return None;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = &points[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            dists.push(sq_dist(a, &points[j * dim..(j + 1) * dim]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    let h2 = med / (2.0 * ((n + 1) as f64).ln());
    (h2 > 0.0 && h2.is_finite()).then(|| h2.sqrt())
}
