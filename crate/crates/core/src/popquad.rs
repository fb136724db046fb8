//! Population-limit MSVGD on dual-space grids.
//!
//! A density `mu_bar` on `R^d` (`d <= 2`) is represented by its log-values on
//! a uniform product grid. One step of the population flow is the pushforward
//! `mu_bar <- (I - gamma g)# mu_bar` with
//! `g(y) = ∫ k(grad_psi_star(x), grad_psi_star(y)) grad log(mu_bar / pi_bar)(x) dmu_bar(x)`.
//! Integrals use the trapezoid rule; `grad log mu_bar` uses fourth-order
//! central differences.
//!
//! Kernel values and first-argument gradients between all pairs of nodes are
//! tabulated once per [`Quadrature`], which costs `O(n^2 d)` memory.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::targets::{norm, MirroredTarget};
use crate::theory::{per_step_bound, StepConstants};

/// Tail mass allowed outside the grid for both the initial and the target density.
pub const TAIL_MASS: f64 = 1e-12;

/// A uniform product grid on a box in `R^d`, `d` in {1, 2}.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    per_axis: usize,
    lo: Vec<f64>,
    spacing: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    /// `per_axis` nodes on each `[lo, hi]` interval.
    pub fn new(bounds: &[(f64, f64)], per_axis: usize) -> Result<Self> {
        let dim = bounds.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("quadrature grids support d = 1 or 2, got {dim}")));
        }
        if per_axis < 8 {
            return Err(Error::Config("a quadrature grid needs at least 8 nodes per axis".into()));
        }
        if bounds.iter().any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(Error::Config(format!("invalid grid bounds {bounds:?}")));
        }
        let lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
        let spacing: Vec<f64> = bounds
            .iter()
            .map(|(l, h)| (h - l) / (per_axis - 1) as f64)
            .collect();
        let axis = |k: usize, i: usize| lo[k] + spacing[k] * i as f64;
        let trap = |i: usize| if i == 0 || i == per_axis - 1 { 0.5 } else { 1.0 };
        let n = per_axis.pow(dim as u32);
        let mut nodes = Vec::with_capacity(n * dim);
        let mut weights = Vec::with_capacity(n);
        if dim == 1 {
            for i in 0..per_axis {
                nodes.push(axis(0, i));
                weights.push(trap(i) * spacing[0]);
            }
        } else {
            for i in 0..per_axis {
                for j in 0..per_axis {
                    nodes.push(axis(0, i));
                    nodes.push(axis(1, j));
                    weights.push(trap(i) * trap(j) * spacing[0] * spacing[1]);
                }
            }
        }
        Ok(Self {
            dim,
            per_axis,
            lo,
            spacing,
            nodes,
            weights,
        })
    }

    /// Symmetric grid `[-L, L]^d` with `L` chosen so that both `N(0, I)` and
    /// the mirrored target leave less than [`TAIL_MASS`] outside.
    pub fn for_target(target: &MirroredTarget, per_axis: usize) -> Result<Self> {
        let half = half_width(target)?;
        Grid::new(&vec![(-half, half); target.dim()], per_axis)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∑ w_i f_i`.
    pub fn integrate(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + self.spacing[axis] * i as f64
    }
}

/// Two-sided standard normal tail cut-off: `P(|Z| > L) = TAIL_MASS`.
fn normal_half_width(dim: usize) -> f64 {
    // Per-axis budget so the union over axes stays below the total.
    let target = TAIL_MASS / dim as f64;
    let (mut a, mut b) = (0.0f64, 20.0f64);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if libm::erfc(m / std::f64::consts::SQRT_2) > target {
            a = m;
        } else {
            b = m;
        }
    }
    b
}

fn half_width(target: &MirroredTarget) -> Result<f64> {
    let d = target.dim();
    let normal = normal_half_width(d);
    // Find a box holding essentially all of pi_bar, then shrink to the tail budget.
    let mut outer = normal;
    let n = if d == 1 { 20001 } else { 301 };
    for _ in 0..12 {
        let grid = Grid::new(&vec![(-outer, outer); d], n)?;
        let v: Vec<f64> = (0..grid.len())
            .map(|i| target.v(grid.node(i)).unwrap_or(f64::INFINITY))
            .collect();
        let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
        let dens: Vec<f64> = v.iter().map(|x| (vmin - x).exp()).collect();
        let total = grid.integrate(dens.iter().copied());
        let edge = edge_max(&grid, &dens);
        if edge / dens.iter().copied().fold(0.0, f64::max) > 1e-20 {
            outer *= 1.5;
            continue;
        }
        // Smallest L in a scan whose complement carries less than the budget.
        let steps = 400;
        for s in 1..=steps {
            let l = outer * s as f64 / steps as f64;
            let inside: f64 = (0..grid.len())
                .filter(|&i| grid.node(i).iter().all(|c| c.abs() <= l))
                .map(|i| grid.weights()[i] * dens[i])
                .sum();
            if 1.0 - inside / total < TAIL_MASS {
                return Ok(l.max(normal));
            }
        }
        return Ok(outer.max(normal));
    }
    Err(Error::Assumption(
        "mirrored target has too heavy tails for a truncated quadrature grid".into(),
    ))
}

fn edge_max(grid: &Grid, values: &[f64]) -> f64 {
    let m = grid.per_axis;
    (0..grid.len())
        .filter(|&i| {
            if grid.dim == 1 {
                i == 0 || i == m - 1
            } else {
                let (a, b) = (i / m, i % m);
                a == 0 || b == 0 || a == m - 1 || b == m - 1
            }
        })
        .map(|i| values[i])
        .fold(0.0, f64::max)
}

/// A probability density on a grid, stored as log-values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Arc<Grid>,
    log_density: Vec<f64>,
}

impl GridDensity {
    /// Normalizes `exp(log_values)` to unit trapezoid mass.
    pub fn from_log_values(grid: Arc<Grid>, mut log_values: Vec<f64>) -> Result<Self> {
        if log_values.len() != grid.len() {
            return Err(Error::Config("density length does not match the grid".into()));
        }
        if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric("density has NaN or infinite log-values".into()));
        }
        let peak = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::Numeric("density vanishes on the whole grid".into()));
        }
        let mass = grid.integrate(log_values.iter().map(|v| (v - peak).exp()));
        let shift = peak + mass.ln();
        log_values.iter_mut().for_each(|v| *v -= shift);
        Ok(Self {
            grid,
            log_density: log_values,
        })
    }

    pub fn from_log_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.node(i))).collect();
        Self::from_log_values(grid, values)
    }

    /// `N(0, I_d)` restricted to the grid.
    pub fn standard_normal(grid: Arc<Grid>) -> Result<Self> {
        Self::from_log_fn(grid, |x| -0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    pub fn density(&self) -> Vec<f64> {
        self.log_density.iter().map(|v| v.exp()).collect()
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(self.log_density.iter().map(|v| v.exp()))
    }

    /// `grad log mu` at the nodes by fourth-order differences, row-major `n x d`.
    pub fn grad_log_density(&self) -> Vec<f64> {
        let g = &self.grid;
        let (m, d) = (g.per_axis, g.dim);
        let mut out = vec![0.0; g.len() * d];
        if d == 1 {
            for i in 0..m {
                out[i] = fd4(&self.log_density, i, m, 1, 0, g.spacing[0]);
            }
        } else {
            for a in 0..m {
                for b in 0..m {
                    let i = a * m + b;
                    out[i * 2] = fd4(&self.log_density, a, m, m, b, g.spacing[0]);
                    out[i * 2 + 1] = fd4(&self.log_density, b, m, 1, a * m, g.spacing[1]);
                }
            }
        }
        out
    }

    /// Log-density at an arbitrary point by (tensor) cubic Lagrange interpolation;
    /// extrapolates the edge cubic outside the grid.
    pub fn interpolate_log(&self, x: &[f64]) -> f64 {
        let g = &self.grid;
        let m = g.per_axis;
        let stencil = |axis: usize, v: f64| {
            let t = (v - g.lo[axis]) / g.spacing[axis];
            let base = (t.floor() as isize - 1).clamp(0, m as isize - 4) as usize;
            (base, lagrange4(t - base as f64))
        };
        if g.dim == 1 {
            let (b, w) = stencil(0, x[0]);
            (0..4).map(|k| w[k] * self.log_density[b + k]).sum()
        } else {
            let (b0, w0) = stencil(0, x[0]);
            let (b1, w1) = stencil(1, x[1]);
            let mut acc = 0.0;
            for (k0, wk0) in w0.iter().enumerate() {
                for (k1, wk1) in w1.iter().enumerate() {
                    acc += wk0 * wk1 * self.log_density[(b0 + k0) * m + b1 + k1];
                }
            }
            acc
        }
    }
}

/// Fourth-order first derivative along a strided line of `m` values.
fn fd4(f: &[f64], i: usize, m: usize, stride: usize, offset: usize, h: f64) -> f64 {
    let at = |k: usize| f[offset + k * stride];
    let s = 12.0 * h;
    if i >= 2 && i + 2 < m {
        (at(i - 2) - 8.0 * at(i - 1) + 8.0 * at(i + 1) - at(i + 2)) / s
    } else if i == 0 {
        (-25.0 * at(0) + 48.0 * at(1) - 36.0 * at(2) + 16.0 * at(3) - 3.0 * at(4)) / s
    } else if i == 1 {
        (-3.0 * at(0) - 10.0 * at(1) + 18.0 * at(2) - 6.0 * at(3) + at(4)) / s
    } else if i == m - 2 {
        (3.0 * at(m - 1) + 10.0 * at(m - 2) - 18.0 * at(m - 3) + 6.0 * at(m - 4) - at(m - 5)) / s
    } else {
        (25.0 * at(m - 1) - 48.0 * at(m - 2) + 36.0 * at(m - 3) - 16.0 * at(m - 4) + 3.0 * at(m - 5)) / s
    }
}

/// Cubic Lagrange weights on nodes 0..3 at local coordinate `t`.
fn lagrange4(t: f64) -> [f64; 4] {
    [
        -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0,
        t * (t - 2.0) * (t - 3.0) / 2.0,
        -t * (t - 1.0) * (t - 3.0) / 2.0,
        t * (t - 1.0) * (t - 2.0) / 6.0,
    ]
}

/// Derivative at `xs[centre]` of the interpolating polynomial through `(xs, ys)`.
fn lagrange_derivative(xs: &[f64], ys: &[f64], centre: usize) -> f64 {
    let x = xs[centre];
    let mut total = 0.0;
    for j in 0..xs.len() {
        let mut dj = 0.0;
        for m in 0..xs.len() {
            if m == j {
                continue;
            }
            let mut prod = 1.0 / (xs[j] - xs[m]);
            for l in 0..xs.len() {
                if l != j && l != m {
                    prod *= (x - xs[l]) / (xs[j] - xs[l]);
                }
            }
            dj += prod;
        }
        total += dj * ys[j];
    }
    total
}

/// A vector field `g` with its Jacobian at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dim: usize,
    values: Vec<f64>,
    jacobian: Vec<f64>,
    repr: FieldRepr,
}

#[derive(Debug, Clone, PartialEq)]
enum FieldRepr {
    /// Off-grid values come from Hermite interpolation (1D only).
    Nodal,
    /// `g(y) = ∑_a k_psi(x_a, y) c_a`.
    Kernel { coeffs: Vec<f64> },
    Constant(Vec<f64>),
}

impl Field {
    /// The constant field `c` on every node.
    pub fn constant(grid: &Grid, c: &[f64]) -> Result<Self> {
        if c.len() != grid.dim() {
            return Err(Error::Config("constant field has the wrong dimension".into()));
        }
        let n = grid.len();
        Ok(Self {
            dim: grid.dim(),
            values: c.repeat(n),
            jacobian: vec![0.0; n * c.len() * c.len()],
            repr: FieldRepr::Constant(c.to_vec()),
        })
    }

    /// Values at the nodes, row-major `n x d`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Jacobians at the nodes, row-major `n x d x d`.
    pub fn jacobian(&self) -> &[f64] {
        &self.jacobian
    }

    /// `max_i |J g(x_i)|_op`.
    pub fn max_jacobian_norm(&self) -> (f64, usize) {
        let d = self.dim;
        let mut best = (0.0, 0);
        for (i, block) in self.jacobian.chunks(d * d).enumerate() {
            let op = if d == 1 {
                block[0].abs()
            } else {
                let m = DMatrix::from_row_slice(d, d, block);
                m.singular_values().max()
            };
            if op > best.0 {
                best = (op, i);
            }
        }
        best
    }
}

/// The three equivalent expressions of `g` evaluated on one density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaCheck {
    /// Sup-norm difference between the dual log-derivative form and the primal form.
    pub dual_vs_primal: f64,
    /// Sup-norm difference between the log-derivative form and the integrated-by-parts form.
    pub dual_vs_parts: f64,
    /// Sup-norm of the log-derivative form, for scale.
    pub scale: f64,
}

/// Tabulated quadrature for one `(target, map, kernel)` triple on one grid.
#[derive(Debug, Clone)]
pub struct Quadrature {
    grid: Arc<Grid>,
    target: MirroredTarget,
    kernel: Kernel,
    theta: Vec<f64>,
    hinv: Vec<DMatrix<f64>>,
    grad_v: Vec<f64>,
    log_target: Vec<f64>,
    kmat: Vec<f64>,
    /// `d/dx_a k_psi(x_a, x_b)` at `[(a * n + b) * d + c]`.
    dx: Vec<f64>,
}

impl Quadrature {
    pub fn new(grid: Arc<Grid>, target: MirroredTarget, kernel: Kernel) -> Result<Self> {
        if grid.dim() != target.dim() {
            return Err(Error::Config(format!(
                "grid has d = {} but the target has d = {}",
                grid.dim(),
                target.dim()
            )));
        }
        if kernel.uses_median_heuristic() {
            return Err(Error::Config(
                "the median bandwidth is defined from particles; give the quadrature a fixed bandwidth".into(),
            ));
        }
        let map = target.map().clone();
        let (n, d) = (grid.len(), grid.dim());
        let mut theta = Vec::with_capacity(n * d);
        let mut hinv = Vec::with_capacity(n);
        let mut grad_v = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let x = grid.node(i);
            let t = map.grad_psi_star(x)?;
            hinv.push(map.hess_psi_inv(&t)?);
            theta.extend_from_slice(&t);
            grad_v.extend(target.grad_v(x)?);
            v.push(target.v(x)?);
        }
        let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
        let log_z = -vmin + grid.integrate(v.iter().map(|x| (vmin - x).exp())).ln();
        let log_target = v.iter().map(|x| -x - log_z).collect();

        let mut kmat = vec![0.0; n * n];
        let mut dx = vec![0.0; n * n * d];
        let mut ga = vec![0.0; d];
        let mut gb = vec![0.0; d];
        for a in 0..n {
            let ta = &theta[a * d..(a + 1) * d];
            for b in a..n {
                let tb = &theta[b * d..(b + 1) * d];
                let k = kernel.grad1_into(ta, tb, &mut ga)?;
                kernel.grad1_into(tb, ta, &mut gb)?;
                kmat[a * n + b] = k;
                kmat[b * n + a] = k;
                let da = &hinv[a] * DVector::from_column_slice(&ga);
                let db = &hinv[b] * DVector::from_column_slice(&gb);
                dx[(a * n + b) * d..(a * n + b + 1) * d].copy_from_slice(da.as_slice());
                dx[(b * n + a) * d..(b * n + a + 1) * d].copy_from_slice(db.as_slice());
            }
        }
        Ok(Self {
            grid,
            target,
            kernel,
            theta,
            hinv,
            grad_v,
            log_target,
            kmat,
            dx,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn target(&self) -> &MirroredTarget {
        &self.target
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// The mirrored target normalized on the grid.
    pub fn target_density(&self) -> Result<GridDensity> {
        GridDensity::from_log_values(self.grid.clone(), self.log_target.clone())
    }

    fn check_density(&self, mu: &GridDensity) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, mu.grid()) && *self.grid != **mu.grid() {
            return Err(Error::Config("density lives on a different grid".into()));
        }
        Ok(())
    }

    /// `u = grad log(mu / pi_bar)` at the nodes.
    fn score_difference(&self, mu: &GridDensity) -> Result<Vec<f64>> {
        if mu.log_density().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "density vanishes at a grid node; log-derivative undefined".into(),
            ));
        }
        let mut u = mu.grad_log_density();
        for (ui, gv) in u.iter_mut().zip(&self.grad_v) {
            *ui += gv;
        }
        Ok(u)
    }

    /// `c_a = w_a mu_a u_a`.
    fn coefficients(&self, mu: &GridDensity, u: &[f64]) -> Vec<f64> {
        let d = self.grid.dim();
        let mut c = u.to_vec();
        for (a, ca) in c.chunks_mut(d).enumerate() {
            let wm = self.grid.weights()[a] * mu.log_density()[a].exp();
            ca.iter_mut().for_each(|v| *v *= wm);
        }
        c
    }

    fn apply_kernel(&self, c: &[f64]) -> Vec<f64> {
        let (n, d) = (self.grid.len(), self.grid.dim());
        let mut g = vec![0.0; n * d];
        for b in 0..n {
            let row = &self.kmat[b * n..(b + 1) * n];
            if d == 1 {
                g[b] = dot(row, c);
                continue;
            }
            let out = &mut g[b * d..(b + 1) * d];
            for (a, k) in row.iter().enumerate() {
                for (o, ca) in out.iter_mut().zip(&c[a * d..(a + 1) * d]) {
                    *o += k * ca;
                }
            }
        }
        g
    }

    /// `g_mu` at the nodes from the log-derivative form, with its Jacobian.
    pub fn g_field(&self, mu: &GridDensity) -> Result<Field> {
        Ok(self.field_and_coefficients(mu)?.0)
    }

    fn field_and_coefficients(&self, mu: &GridDensity) -> Result<(Field, Vec<f64>)> {
        self.check_density(mu)?;
        let (n, d) = (self.grid.len(), self.grid.dim());
        let u = self.score_difference(mu)?;
        let c = self.coefficients(mu, &u);
        let values = self.apply_kernel(&c);
        // d g_i / d y_j at node b = ∑_a c_{a,i} d/dy_j k_psi(x_a, x_b), and the
        // y-gradient is the first-argument gradient with the roles swapped.
        let mut jacobian = vec![0.0; n * d * d];
        for b in 0..n {
            if d == 1 {
                jacobian[b] = dot(&self.dx[b * n..(b + 1) * n], &c);
                continue;
            }
            let jb = &mut jacobian[b * d * d..(b + 1) * d * d];
            for a in 0..n {
                let dy = &self.dx[(b * n + a) * d..(b * n + a + 1) * d];
                let ca = &c[a * d..(a + 1) * d];
                for i in 0..d {
                    for j in 0..d {
                        jb[i * d + j] += ca[i] * dy[j];
                    }
                }
            }
        }
        let repr = if d == 1 {
            FieldRepr::Nodal
        } else {
            FieldRepr::Kernel { coeffs: c.clone() }
        };
        let field = Field {
            dim: d,
            values,
            jacobian,
            repr,
        };
        Ok((field, c))
    }

    /// `g_mu` from the integrated-by-parts form `∫ (k grad V - grad_x k) dmu`,
    /// which needs no derivative of the density.
    pub fn g_by_parts(&self, mu: &GridDensity) -> Result<Vec<f64>> {
        self.check_density(mu)?;
        let (n, d) = (self.grid.len(), self.grid.dim());
        let mut g = vec![0.0; n * d];
        let wm: Vec<f64> = (0..n)
            .map(|a| self.grid.weights()[a] * mu.log_density()[a].exp())
            .collect();
        for b in 0..n {
            let out = &mut g[b * d..(b + 1) * d];
            for a in 0..n {
                let k = self.kmat[a * n + b];
                let dxk = &self.dx[(a * n + b) * d..(a * n + b + 1) * d];
                for c in 0..d {
                    out[c] += wm[a] * (k * self.grad_v[a * d + c] - dxk[c]);
                }
            }
        }
        Ok(g)
    }

    /// `g_mu` from the primal form
    /// `∫ k(theta, .) hess_psi_inv(theta) grad_theta log(mu / pi)(theta) dmu(theta)`,
    /// differentiating the primal log-densities on the (non-uniform) primal nodes.
    /// One-dimensional grids only.
    pub fn g_primal(&self, mu: &GridDensity) -> Result<Vec<f64>> {
        self.check_density(mu)?;
        if self.grid.dim() != 1 {
            return Err(Error::Config("the primal form is implemented for d = 1".into()));
        }
        let n = self.grid.len();
        let map = self.target.map();
        let base = self.target.base();
        let mut ratio = Vec::with_capacity(n);
        for a in 0..n {
            let t = &self.theta[a..a + 1];
            let log_mu = mu.log_density()[a] - map.log_det_hess_psi_inv(t)?;
            ratio.push(log_mu - base.log_density_unnorm(t)?);
        }
        let mut drift = Vec::with_capacity(n);
        for a in 0..n {
            let lo = a.saturating_sub(2).min(n - 5);
            let xs = &self.theta[lo..lo + 5];
            let grad = lagrange_derivative(xs, &ratio[lo..lo + 5], a - lo);
            drift.push(self.grid.weights()[a] * mu.log_density()[a].exp() * self.hinv[a][(0, 0)] * grad);
        }
        Ok(self.apply_kernel(&drift))
    }

    /// Sup-norm agreement of the three forms of `g` on `mu`.
    pub fn lemma_check(&self, mu: &GridDensity) -> Result<LemmaCheck> {
        let a = self.g_field(mu)?;
        let c = self.g_by_parts(mu)?;
        let sup = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let dual_vs_primal = if self.grid.dim() == 1 {
            sup(a.values(), &self.g_primal(mu)?)
        } else {
            f64::NAN
        };
        Ok(LemmaCheck {
            dual_vs_primal,
            dual_vs_parts: sup(a.values(), &c),
            scale: a.values().iter().map(|v| v.abs()).fold(0.0, f64::max),
        })
    }

    /// `KL(mu | pi_bar)`; `+inf` when `mu` charges a node where the target vanishes.
    pub fn kl(&self, mu: &GridDensity) -> Result<f64> {
        self.check_density(mu)?;
        let mut total = 0.0;
        for (i, (lm, lt)) in mu.log_density().iter().zip(&self.log_target).enumerate() {
            let m = lm.exp();
            if m == 0.0 {
                continue;
            }
            if !lt.is_finite() {
                return Ok(f64::INFINITY);
            }
            total += self.grid.weights()[i] * m * (lm - lt);
        }
        Ok(total)
    }

    /// Mirrored Stein Fisher information as the double sum
    /// `∑_a ∑_b k_psi(x_a, x_b) <c_a, c_b>` with `c = w mu grad log(mu / pi_bar)`.
    pub fn stein_fisher(&self, mu: &GridDensity) -> Result<f64> {
        self.check_density(mu)?;
        let u = self.score_difference(mu)?;
        let c = self.coefficients(mu, &u);
        Ok(dot(&c, &self.apply_kernel(&c)))
    }

    /// `<g, grad log(mu / pi_bar)>_{L2(mu)}` using the integrated-by-parts `g`.
    pub fn stein_fisher_pairing(&self, mu: &GridDensity) -> Result<f64> {
        let u = self.score_difference(mu)?;
        let c = self.coefficients(mu, &u);
        Ok(dot(&c, &self.g_by_parts(mu)?))
    }

    /// `E_mu |grad V|`.
    pub fn mean_grad_v(&self, mu: &GridDensity) -> f64 {
        let d = self.grid.dim();
        self.grid.integrate(
            mu.log_density()
                .iter()
                .enumerate()
                .map(|(i, lm)| lm.exp() * norm(&self.grad_v[i * d..(i + 1) * d])),
        )
    }

    /// Evaluates a field and its Jacobian at an arbitrary dual point.
    fn field_at(&self, field: &Field, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = field.dim;
        match &field.repr {
            FieldRepr::Constant(c) => Ok((c.clone(), vec![0.0; d * d])),
            FieldRepr::Nodal => {
                let (g, dg) = hermite_1d(&self.grid, field, x[0]);
                Ok((vec![g], vec![dg]))
            }
            FieldRepr::Kernel { coeffs } => {
                let map = self.target.map();
                let ty = map.grad_psi_star(x)?;
                let hy = map.hess_psi_inv(&ty)?;
                let mut g = vec![0.0; d];
                let mut jac = vec![0.0; d * d];
                let mut grad = vec![0.0; d];
                for a in 0..self.grid.len() {
                    let ta = &self.theta[a * d..(a + 1) * d];
                    let k = self.kernel.grad1_into(&ty, ta, &mut grad)?;
                    let dy = &hy * DVector::from_column_slice(&grad);
                    let ca = &coeffs[a * d..(a + 1) * d];
                    for i in 0..d {
                        g[i] += k * ca[i];
                        for j in 0..d {
                            jac[i * d + j] += ca[i] * dy[j];
                        }
                    }
                }
                Ok((g, jac))
            }
        }
    }

    /// `(I - gamma g)# mu` by the change-of-variables formula with a
    /// numerically inverted map, renormalized to unit mass.
    pub fn pushforward(&self, mu: &GridDensity, field: &Field, gamma: f64) -> Result<GridDensity> {
        self.check_density(mu)?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("step size must be finite and >= 0, got {gamma}")));
        }
        if gamma == 0.0 {
            return Ok(mu.clone());
        }
        let (jmax, at) = field.max_jacobian_norm();
        if gamma * jmax >= 1.0 {
            return Err(Error::Numeric(format!(
                "pushforward is not injective: gamma |J g| = {} at node {at} ({:?})",
                gamma * jmax,
                self.grid.node(at)
            )));
        }
        let n = self.grid.len();
        let mut out = Vec::with_capacity(n);
        if self.grid.dim() == 1 {
            let gmax = field.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let h = self.grid.spacing()[0];
            for b in 0..n {
                let y = self.grid.node(b)[0];
                let phi = |x: f64| x - gamma * hermite_1d(&self.grid, field, x).0;
                let (mut lo, mut hi) = (y - gamma * gmax - h, y + gamma * gmax + h);
                while phi(lo) > y {
                    lo -= h;
                }
                while phi(hi) < y {
                    hi += h;
                }
                while hi - lo > 1e-12 {
                    let mid = 0.5 * (lo + hi);
                    if mid == lo || mid == hi {
                        break;
                    }
                    if phi(mid) < y {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let x = 0.5 * (lo + hi);
                let jac = 1.0 - gamma * hermite_1d(&self.grid, field, x).1;
                if jac <= 0.0 {
                    return Err(Error::Numeric(format!("pushforward folds near x = {x}")));
                }
                out.push(mu.interpolate_log(&[x]) - jac.ln());
            }
        } else {
            for b in 0..n {
                let y = Vector2::from_column_slice(self.grid.node(b));
                let mut x = y;
                let mut converged = false;
                let mut jac_phi = Matrix2::identity();
                for _ in 0..60 {
                    let (g, jg) = self.field_at(field, x.as_slice())?;
                    jac_phi = Matrix2::identity() - gamma * Matrix2::from_row_slice(&jg);
                    let resid = x - gamma * Vector2::from_column_slice(&g) - y;
                    let step = jac_phi.lu().solve(&resid).ok_or_else(|| {
                        Error::Numeric(format!("singular pushforward Jacobian near {x:?}"))
                    })?;
                    x -= step;
                    if step.amax() < 1e-12 {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::Numeric(format!(
                        "inverse pushforward did not converge for node {b}"
                    )));
                }
                let det = jac_phi.determinant();
                if det <= 0.0 {
                    return Err(Error::Numeric(format!("pushforward folds near {x:?}")));
                }
                out.push(mu.interpolate_log(x.as_slice()) - det.ln());
            }
        }
        GridDensity::from_log_values(self.grid.clone(), out)
    }

    /// Evolves `mu0` for `steps` pushforward steps, recording KL, Stein Fisher
    /// information and `E |grad V|` before each step and after the last one.
    /// `observe` sees every density with its field.
    pub fn run_flow(
        &self,
        mu0: GridDensity,
        gamma: f64,
        steps: usize,
        mut observe: impl FnMut(usize, &GridDensity) -> Result<()>,
    ) -> Result<(Vec<FlowRecord>, GridDensity)> {
        let mut mu = mu0;
        let mut records = Vec::with_capacity(steps + 1);
        for step in 0..=steps {
            observe(step, &mu)?;
            let (field, c) = self.field_and_coefficients(&mu)?;
            records.push(FlowRecord {
                step,
                kl: self.kl(&mu)?,
                stein_fisher: dot(&c, field.values()),
                mean_grad_v: self.mean_grad_v(&mu),
                mass: mu.mass(),
            });
            if step < steps {
                mu = self.pushforward(&mu, &field, gamma)?;
            }
        }
        Ok((records, mu))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cubic Hermite interpolation of a 1D nodal field and its derivative;
/// linear extrapolation outside the grid.
fn hermite_1d(grid: &Grid, field: &Field, x: f64) -> (f64, f64) {
    let m = grid.per_axis;
    let h = grid.spacing[0];
    let (g, dg) = (&field.values, &field.jacobian);
    let first = grid.axis_coord(0, 0);
    let last = grid.axis_coord(0, m - 1);
    if x <= first {
        return (g[0] + dg[0] * (x - first), dg[0]);
    }
    if x >= last {
        return (g[m - 1] + dg[m - 1] * (x - last), dg[m - 1]);
    }
    let i = (((x - first) / h).floor() as usize).min(m - 2);
    let t = (x - grid.axis_coord(0, i)) / h;
    let (t2, t3) = (t * t, t * t * t);
    let (p0, p1, m0, m1) = (g[i], g[i + 1], dg[i] * h, dg[i + 1] * h);
    let value = (2.0 * t3 - 3.0 * t2 + 1.0) * p0
        + (t3 - 2.0 * t2 + t) * m0
        + (-2.0 * t3 + 3.0 * t2) * p1
        + (t3 - t2) * m1;
    let slope = ((6.0 * t2 - 6.0 * t) * p0
        + (3.0 * t2 - 4.0 * t + 1.0) * m0
        + (-6.0 * t2 + 6.0 * t) * p1
        + (3.0 * t2 - 2.0 * t) * m1)
        / h;
    (value, slope)
}

/// Quantities recorded along a quadrature flow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord {
    pub step: usize,
    pub kl: f64,
    pub stein_fisher: f64,
    pub mean_grad_v: f64,
    pub mass: f64,
}

/// Per-step outcome of the descent check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentStep {
    pub step: usize,
    pub kl: f64,
    pub kl_next: f64,
    pub stein_fisher: f64,
    pub gamma: f64,
    /// `-(gamma / 2) I(mu_n)`.
    pub bound_rhs: f64,
    /// `bound_rhs + tolerance - (KL_{n+1} - KL_n)`; negative means a violation.
    pub descent_margin: f64,
    pub a_n: f64,
    /// Largest step size allowed at this step by the per-step condition.
    pub step_bound: f64,
    /// `B1 E|grad V| + B2 d / K - sqrt(I)`.
    pub lemma_margin: f64,
}

/// Result of checking the descent inequality along a quadrature flow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentReport {
    pub gamma: f64,
    pub tolerance: f64,
    pub steps: Vec<DescentStep>,
    pub descent_violations: usize,
    pub step_condition_violations: usize,
    pub lemma_violations: usize,
    pub kl_decreased: bool,
    /// The smallest descent margin, for scale.
    pub worst_descent_margin: f64,
    pub worst_lemma_margin: f64,
}

impl DescentReport {
    /// The descent inequality held at every step and KL decreased overall.
    pub fn descent_holds(&self) -> bool {
        self.descent_violations == 0 && self.kl_decreased
    }
}

/// Checks `KL(mu_{n+1}) - KL(mu_n) <= -(gamma/2) I(mu_n) + tolerance` along a
/// recorded flow, together with the per-step step-size condition and the
/// bound `sqrt(I) <= B1 E|grad V| + B2 d / K` (up to `lemma_tolerance`).
pub fn descent_check(
    records: &[FlowRecord],
    gamma: f64,
    constants: &StepConstants,
    tolerance: f64,
    lemma_tolerance: f64,
) -> DescentReport {
    let mut steps = Vec::new();
    let (mut dv, mut sv, mut lv) = (0, 0, 0);
    let mut worst = f64::INFINITY;
    let mut worst_lemma = f64::INFINITY;
    for pair in records.windows(2) {
        let (now, next) = (&pair[0], &pair[1]);
        let bound_rhs = -0.5 * gamma * now.stein_fisher;
        let margin = bound_rhs + tolerance - (next.kl - now.kl);
        let a_n = constants.l0 + constants.l1 * now.mean_grad_v;
        let step_bound = per_step_bound(now.stein_fisher, a_n, constants);
        let lemma_margin = lemma_rhs(now.mean_grad_v, constants) - now.stein_fisher.max(0.0).sqrt();
        dv += usize::from(margin < 0.0);
        sv += usize::from(gamma > step_bound);
        lv += usize::from(lemma_margin < -lemma_tolerance);
        worst = worst.min(margin);
        worst_lemma = worst_lemma.min(lemma_margin);
        steps.push(DescentStep {
            step: now.step,
            kl: now.kl,
            kl_next: next.kl,
            stein_fisher: now.stein_fisher,
            gamma,
            bound_rhs,
            descent_margin: margin,
            a_n,
            step_bound,
            lemma_margin,
        });
    }
    if let Some(last) = records.last() {
        let m = lemma_rhs(last.mean_grad_v, constants) - last.stein_fisher.max(0.0).sqrt();
        lv += usize::from(m < -lemma_tolerance);
        worst_lemma = worst_lemma.min(m);
    }
    let kl_decreased = match (records.first(), records.last()) {
        (Some(a), Some(b)) if records.len() > 1 => b.kl < a.kl,
        _ => false,
    };
    DescentReport {
        gamma,
        tolerance,
        steps,
        descent_violations: dv,
        step_condition_violations: sv,
        lemma_violations: lv,
        kl_decreased,
        worst_descent_margin: worst,
        worst_lemma_margin: worst_lemma,
    }
}

/// `B1 E|grad V| + B2 d / K`.
pub fn lemma_rhs(mean_grad_v: f64, c: &StepConstants) -> f64 {
    c.b1 * mean_grad_v + c.b2 * c.d as f64 / c.k
}
