//! Finite-particle MSVGD.
//!
//! Particles live in the dual space `x = grad_psi(theta)`; each step moves
//! them along the kernelized Stein direction built from primal quantities
//! and maps them back through `grad_psi_star`. With the Euclidean map this is
//! plain SVGD.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::mirror::MirrorMap;
use crate::targets::MirroredTarget;

/// `N` particles in both charts, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    primal: Vec<f64>,
    dual: Vec<f64>,
    step_index: usize,
}

impl ParticleEnsemble {
    /// Builds an ensemble from dual positions; primal positions are `grad_psi_star(x)`.
    pub fn from_dual(map: &MirrorMap, dual: Vec<f64>) -> Result<Self> {
        let dim = map.dim();
        if dual.is_empty() || !dual.len().is_multiple_of(dim) {
            return Err(Error::Config(format!(
                "dual positions must be a non-empty multiple of d = {dim}"
            )));
        }
        let mut primal = Vec::with_capacity(dual.len());
        for (i, x) in dual.chunks(dim).enumerate() {
            let theta = map.grad_psi_star(x).map_err(|e| particle_error(0, i, e))?;
            primal.extend(theta);
        }
        Ok(Self {
            dim,
            primal,
            dual,
            step_index: 0,
        })
    }

    /// Builds an ensemble from primal positions; dual positions are `grad_psi(theta)`.
    pub fn from_primal(map: &MirrorMap, primal: Vec<f64>) -> Result<Self> {
        let dim = map.dim();
        if primal.is_empty() || !primal.len().is_multiple_of(dim) {
            return Err(Error::Config(format!(
                "primal positions must be a non-empty multiple of d = {dim}"
            )));
        }
        let mut dual = Vec::with_capacity(primal.len());
        for (i, t) in primal.chunks(dim).enumerate() {
            dual.extend(map.grad_psi(t).map_err(|e| particle_error(0, i, e))?);
        }
        Ok(Self {
            dim,
            primal,
            dual,
            step_index: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.primal.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.primal.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn primal(&self) -> &[f64] {
        &self.primal
    }

    pub fn dual(&self) -> &[f64] {
        &self.dual
    }

    pub fn primal_particle(&self, i: usize) -> &[f64] {
        &self.primal[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dual_particle(&self, i: usize) -> &[f64] {
        &self.dual[i * self.dim..(i + 1) * self.dim]
    }
}

fn particle_error(step: usize, particle: usize, source: Error) -> Error {
    Error::Particle {
        step,
        particle,
        source: Box::new(source),
    }
}

/// Standard normal dual positions from a seeded ChaCha8 stream, mapped to
/// the primal chart.
pub fn init_ensemble(map: &MirrorMap, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::Config("need at least one particle".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dual: Vec<f64> = (0..n * map.dim())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    ParticleEnsemble::from_dual(map, dual)
}

/// Dual velocities of every particle, row-major `N x d`:
///
/// `v_i = (1/N) sum_j [ k(t_i, t_j) (H^-1(t_j) s(t_j) + div H^-1(t_j)) + H^-1(t_j) grad_1 k(t_j, t_i) ]`
///
/// where `H^-1` is the inverse Hessian of `psi` and `s` the primal score.
/// The inner sum runs in index order so results are reproducible bit for bit.
pub fn update_field(
    ensemble: &ParticleEnsemble,
    target: &MirroredTarget,
    kernel: &Kernel,
) -> Result<Vec<f64>> {
    let map = target.map();
    let n = ensemble.len();
    let d = ensemble.dim();
    let step = ensemble.step_index();
    let mut drift = Vec::with_capacity(n);
    let mut hinv = Vec::with_capacity(n);
    for j in 0..n {
        let theta = ensemble.primal_particle(j);
        let wrap = |e| particle_error(step, j, e);
        // H^-1 s + div H^-1 is exactly -grad V at x_j.
        let g = target.grad_v_at_primal(theta).map_err(wrap)?;
        drift.push(DVector::from_iterator(d, g.into_iter().map(|v| -v)));
        hinv.push(map.hess_psi_inv(theta).map_err(wrap)?);
    }
    let mut out = vec![0.0; n * d];
    let mut grad = vec![0.0; d];
    let mut acc = DVector::zeros(d);
    for i in 0..n {
        let ti = ensemble.primal_particle(i);
        acc.fill(0.0);
        for j in 0..n {
            let tj = ensemble.primal_particle(j);
            let k = kernel
                .grad1_into(tj, ti, &mut grad)
                .map_err(|e| particle_error(step, j, e))?;
            acc.axpy(k, &drift[j], 1.0);
            acc.gemv(1.0, &hinv[j], &DVector::from_column_slice(&grad), 1.0);
        }
        let row = &mut out[i * d..(i + 1) * d];
        for (o, a) in row.iter_mut().zip(acc.iter()) {
            *o = a / n as f64;
        }
    }
    Ok(out)
}

/// One MSVGD step: `x += gamma * v`, `theta = grad_psi_star(x)`.
pub fn msvgd_step(
    ensemble: &ParticleEnsemble,
    target: &MirroredTarget,
    kernel: &Kernel,
    gamma: f64,
) -> Result<ParticleEnsemble> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("step size must be finite and >= 0, got {gamma}")));
    }
    let step = ensemble.step_index();
    if gamma == 0.0 {
        let mut next = ensemble.clone();
        next.step_index += 1;
        return Ok(next);
    }
    let velocity = update_field(ensemble, target, kernel)?;
    let d = ensemble.dim();
    if let Some(pos) = velocity.iter().position(|v| !v.is_finite()) {
        return Err(particle_error(
            step,
            pos / d,
            Error::Numeric("non-finite velocity".into()),
        ));
    }
    let dual: Vec<f64> = ensemble
        .dual
        .iter()
        .zip(&velocity)
        .map(|(x, v)| x + gamma * v)
        .collect();
    let map = target.map();
    let mut primal = Vec::with_capacity(dual.len());
    for (i, x) in dual.chunks(d).enumerate() {
        primal.extend(map.grad_psi_star(x).map_err(|e| particle_error(step, i, e))?);
    }
    Ok(ParticleEnsemble {
        dim: d,
        primal,
        dual,
        step_index: step + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::ConstrainedTarget;

    #[test]
    fn single_symmetric_particle_does_not_move() {
        let map = MirrorMap::entropic_simplex(1).unwrap();
        let target = MirroredTarget::new(ConstrainedTarget::dirichlet(vec![1.0, 1.0]).unwrap(), map.clone()).unwrap();
        let kernel = Kernel::imq(1.0, -0.5).unwrap();
        let ens = ParticleEnsemble::from_primal(&map, vec![0.5]).unwrap();
        assert_eq!(update_field(&ens, &target, &kernel).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_step_is_identity() {
        let map = MirrorMap::entropic_simplex(2).unwrap();
        let target = MirroredTarget::new(ConstrainedTarget::dirichlet(vec![2.0, 3.0, 4.0]).unwrap(), map.clone()).unwrap();
        let kernel = Kernel::rbf(0.5).unwrap();
        let ens = init_ensemble(&map, 7, 3).unwrap();
        let next = msvgd_step(&ens, &target, &kernel, 0.0).unwrap();
        assert_eq!(next.primal(), ens.primal());
        assert_eq!(next.dual(), ens.dual());
        assert_eq!(next.step_index(), 1);
        assert!(msvgd_step(&ens, &target, &kernel, -1.0).is_err());
    }

    #[test]
    fn euclidean_init_has_equal_charts() {
        let map = MirrorMap::euclidean(3).unwrap();
        let ens = init_ensemble(&map, 10, 42).unwrap();
        assert_eq!(ens.primal(), ens.dual());
        assert_eq!(init_ensemble(&map, 10, 42).unwrap(), ens);
        assert_ne!(init_ensemble(&map, 10, 43).unwrap(), ens);
    }
}
