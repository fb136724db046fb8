use std::f64::consts::{E, PI};
use std::sync::Arc;

use msvgd::popquad::{Grid, GridDensity, Quadrature};
use msvgd::theory::*;
use msvgd::{
    init_ensemble, ConstrainedTarget, Error, Kernel, MirrorMap, MirroredTarget, ParticleEnsemble, Provenance,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn quartic() -> MirroredTarget {
    let map = MirrorMap::euclidean(1).unwrap();
    MirroredTarget::new(ConstrainedTarget::power_law(4.0, map.clone()).unwrap(), map).unwrap()
}

fn profile(l0: f64, l1: f64, c_p: f64, p: f64) -> SmoothnessProfile {
    SmoothnessProfile::new(l0, l1, c_p, p, Provenance::User)
}

#[test]
fn g_p_examples() {
    for p in [1.0, 2.0, 3.5] {
        assert_eq!(g_p(0.0, p).unwrap(), 0.0);
    }
    assert_eq!(g_p(2.0, 1.0).unwrap(), 3.0);
    assert!((g_p(4.0, 2.0).unwrap() - (2.0 + 2f64.powf(0.25))).abs() < 1e-15);
    assert!((g_p(4.0, 2.0).unwrap() - 3.18921).abs() < 1e-5);
    assert!(matches!(g_p(-1.0, 1.0), Err(Error::Domain(_))));
    let mut last = 0.0;
    for i in 1..200 {
        let v = g_p(i as f64 * 0.05, 2.5).unwrap();
        assert!(v > last);
        last = v;
    }
}

#[test]
fn m_reduces_in_the_smooth_small_b2_limit() {
    let c = StepConstants {
        b1: 1.3,
        b2: 1e-12,
        k: 0.7,
        d: 3,
        l0: 5.0,
        l1: 0.0,
        alpha: 2.0,
    };
    let want = 1.0 / ((E - 1.0) * c.b1 * c.b1 * c.l0);
    for x in [0.0, 1.0, 100.0] {
        let m = m_function(x, &c);
        assert!((m - want).abs() < 1e-9 * want, "{m} {want}");
    }
}

/// Reimplementation of `M(x)` in plain arithmetic.
#[allow(clippy::too_many_arguments)]
fn m_oracle(x: f64, b1: f64, b2: f64, k: f64, d: f64, l0: f64, l1: f64, a: f64) -> f64 {
    let t1 = if l1 > 0.0 { 1.0 / (b1 * l1) } else { f64::INFINITY };
    let t2 = (a - 1.0) * k / (a * b2 * d);
    let branch1 = t1.min(t2) * k / (k * b1 * x + b2 * d);
    let branch2 = k * k / (a * a * b2 * b2 * d * d + k * k * b1 * b1 * (E - 1.0) * (l1 * x + l0));
    branch1.min(branch2)
}

#[test]
fn theorem_step_for_the_quartic_matches_plain_arithmetic() {
    let target = quartic();
    let kernel = Kernel::imq(1.0, -0.5).unwrap();
    let (b1, b2) = kernel.bounds();
    let prof = target.smoothness_profile().unwrap();
    let c = c_pi_p(&target, prof.p, 10.0).unwrap().value;
    let prof = prof.with_c_pi_p(c, Provenance::Analytic);

    // Constants by hand: L0 = 4 * 3^3, L1 = 1, C_p = 4, p = 3.
    let (l0, l1, cp, p) = (108.0, 1.0, 4.0, 3.0);
    assert_eq!((prof.l0, prof.l1, prof.c_p, prof.p), (l0, l1, cp, p));
    // E|X|^3 = 2 sqrt(2/pi) for X ~ N(0, 1).
    let w = (2.0 * (2.0 / PI).sqrt()).powf(1.0 / 3.0);
    // log Z of exp(-x^4) is log(2 Gamma(5/4)).
    let v0 = (2.0 * libm::tgamma(1.25)).ln();
    // E|X|^4 = 3, Gamma(1) / Gamma(1/2) = 1 / sqrt(pi).
    let kl0 = -0.5 * (2.0 * PI * E).ln() + v0 + cp / (p + 1.0) * (3.0 + (p + 1.0) * 2f64.sqrt() / PI.sqrt());
    let gp = kl0.powf(1.0 / p) + (kl0 / 2.0).powf(1.0 / (2.0 * p));
    let x = cp * (2.0 * c * gp + w).powf(p) + cp;
    let want = m_oracle(x, b1, b2, 1.0, 1.0, l0, l1, 2.0);

    let w_lib = w_p_standard_normal(p, 1).unwrap();
    let kl0_lib = kl0_upper_bound(target.normalized_v_at_origin().unwrap(), cp, p, 1).unwrap();
    assert!((w_lib - w).abs() < 1e-14);
    assert!((kl0_lib - kl0).abs() < 1e-12);
    let got = step_size_bound(&prof, (b1, b2), 1.0, 1, kl0_lib, w_lib).unwrap();
    assert!((got - want).abs() <= 1e-12 * want, "{got} {want}");
    let xg = exp_grad_bound(kl0_lib, kl0_lib, w_lib, &prof, Mode::General).unwrap();
    assert!((xg - x).abs() <= 1e-12 * x);
}

#[test]
fn tp_step_examples() {
    let (b1, b2, k, d) = (1.0, 0.8, 1.0, 2);
    let prof = profile(2.0, 0.0, 1.5, 2.0).with_lambda(1.0, Provenance::User);
    let w = w_p_standard_normal(2.0, d).unwrap();
    let at_zero = step_size_bound_tp(&prof, (b1, b2), k, d, 0.0, w).unwrap();
    let arg = 1.5 * w.powi(2) + 1.5;
    assert!((at_zero - m_oracle(arg, b1, b2, k, d as f64, 2.0, 0.0, 2.0)).abs() < 1e-15);
    let huge = prof.clone().with_lambda(1e300, Provenance::User);
    let limit = step_size_bound_tp(&huge, (b1, b2), k, d, 3.0, w).unwrap();
    assert!((limit - at_zero).abs() < 1e-12 * at_zero);

    let two = profile(2.0, 0.0, 1.5, 2.0).with_lambda(2.0, Provenance::User);
    let x = exp_grad_bound(2.0, 2.0, 0.3, &two, Mode::Tp).unwrap();
    assert!((x - (1.5 * (2.0 * 2f64.sqrt() + 0.3).powi(2) + 1.5)).abs() < 1e-12);
    // p = 2, lambda = 1 at the KL bound 1.7
    let one = profile(2.0, 0.0, 1.5, 2.0).with_lambda(1.0, Provenance::User);
    let g = step_size_bound_tp(&one, (b1, b2), k, d, 1.7, w).unwrap();
    let arg = 1.5 * (2.0 * (2.0f64 * 1.7).sqrt() + w).powi(2) + 1.5;
    assert!((g - m_oracle(arg, b1, b2, k, d as f64, 2.0, 0.0, 2.0)).abs() < 1e-15);

    let no_lambda = profile(2.0, 0.0, 1.5, 2.0);
    assert!(matches!(step_size_bound_tp(&no_lambda, (b1, b2), k, d, 1.0, w), Err(Error::Config(_))));
    let high_p = profile(2.0, 0.0, 1.5, 3.0).with_lambda(1.0, Provenance::User);
    assert!(step_size_bound_tp(&high_p, (b1, b2), k, d, 1.0, w).is_err());
    assert!(matches!(step_size_bound(&no_lambda, (b1, b2), k, d, 1.0, w), Err(Error::Config(_))));
}

#[test]
fn exp_grad_bound_at_zero_is_c_p() {
    let prof = profile(1.0, 1.0, 2.5, 3.0).with_c_pi_p(4.0, Provenance::User);
    assert_eq!(exp_grad_bound(0.0, 0.0, 0.0, &prof, Mode::General).unwrap(), 2.5);
    let a = exp_grad_bound(0.5, 1.0, 0.2, &prof, Mode::General).unwrap();
    let b = exp_grad_bound(0.6, 1.0, 0.2, &prof, Mode::General).unwrap();
    let c = exp_grad_bound(0.6, 1.1, 0.2, &prof, Mode::General).unwrap();
    assert!(a < b && b < c);
}

#[test]
fn per_step_bound_treats_undefined_branches_as_unbounded() {
    let c = StepConstants {
        b1: 1.0,
        b2: 1.0,
        k: 1.0,
        d: 1,
        l0: 2.0,
        l1: 0.0,
        alpha: 2.0,
    };
    let third = 1.0 / (4.0 + (E - 1.0) * 2.0);
    assert!((per_step_bound(0.0, 2.0, &c) - third).abs() < 1e-15);
    let with_info = per_step_bound(0.25, 2.0, &c);
    assert!((with_info - (0.5 / 0.5f64).min(third)).abs() < 1e-15);
}

#[test]
fn gaussian_moment_examples() {
    assert_eq!(gaussian_moment(1.0, 2).unwrap(), 2.0);
    for d in [1, 2, 5] {
        assert!((gaussian_moment(-1.0 + 1e-12, d).unwrap() - 1.0).abs() < 1e-9);
        assert!((gaussian_moment(1.0, d).unwrap() - d as f64).abs() < 1e-12);
    }
    assert!(gaussian_moment(-3.0, 1).is_err());
    // large d goes through the log-gamma path
    let big = gaussian_moment(1.0, 400).unwrap();
    assert!((big - 400.0).abs() < 1e-8 * 400.0);
}

#[test]
fn gaussian_moment_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (p, d, n) in [(2.0, 3, 1_000_000)]
        .into_iter()
        .chain([1.0, 2.0, 3.0].into_iter().flat_map(|p| [1, 2, 3, 5].map(move |d| (p, d, 200_000))))
    {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let r2: f64 = (0..d).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z * z).sum();
            let v = r2.powf((p + 1.0) / 2.0);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = gaussian_moment(p, d).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "p={p} d={d}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn kl0_bound_examples() {
    let got = kl0_upper_bound(0.0, 1.0, 1.0, 1).unwrap();
    let want = -0.5 * (2.0 * PI * E).ln() + 0.5 * (1.0 + 2.0 * 2f64.sqrt() / PI.sqrt());
    assert!((got - want).abs() < 1e-14);
    let shifted = kl0_upper_bound(1.75, 1.0, 1.0, 1).unwrap();
    assert!((shifted - got - 1.75).abs() < 1e-14);
}

#[test]
fn kl0_bound_dominates_the_true_initial_kl() {
    let euc = MirrorMap::euclidean(1).unwrap();
    let targets = [
        ConstrainedTarget::gaussian(vec![0.0], DMatrix::identity(1, 1)).unwrap(),
        ConstrainedTarget::power_law(4.0, euc.clone()).unwrap(),
        ConstrainedTarget::power_law(3.0, euc.clone()).unwrap(),
    ];
    for base in targets {
        let t = MirroredTarget::new(base, euc.clone()).unwrap();
        let prof = t.smoothness_profile().unwrap();
        let bound = kl0_upper_bound(t.normalized_v_at_origin().unwrap(), prof.c_p, prof.p, 1).unwrap();
        let grid = Arc::new(Grid::for_target(&t, 4096).unwrap());
        let q = Quadrature::new(grid.clone(), t.clone(), Kernel::imq(1.0, -0.5).unwrap()).unwrap();
        let kl = q.kl(&GridDensity::standard_normal(grid).unwrap()).unwrap();
        assert!(bound >= kl, "{}: {bound} < {kl}", t.base().name());
    }
}

#[test]
fn iteration_estimate_examples() {
    let prof = profile(1.0, 0.0, 1.0, 1.0).with_c_pi_p(2.0, Provenance::User);
    for d in [1usize, 2, 4, 7] {
        let n = iteration_estimate(&prof, 0.01, d, Mode::General).unwrap();
        let want = 8.0 * 2.0 * (d as f64 / 2.0).powi(2) / (4.0 * 0.01);
        assert!(n.abs_diff(want.round() as u64) <= 1, "{n} {want}");
        let half = iteration_estimate(&prof, 0.005, d, Mode::General).unwrap();
        assert!(half.abs_diff(2 * n) <= 1);
    }
    let tp = profile(1.0, 0.0, 1.0, 2.0).with_lambda(1.0, Provenance::User);
    assert_eq!(iteration_estimate(&tp, 0.1, 4, Mode::Tp).unwrap(), 640);
    assert!(iteration_estimate(&profile(1.0, 0.0, 1.0, 1.0), 0.1, 2, Mode::General).is_err());
}

#[test]
fn a_n_examples() {
    let t = quartic();
    let map = t.map().clone();
    let ens = ParticleEnsemble::from_dual(&map, vec![0.5, -1.0, 2.0]).unwrap();
    let prof = t.smoothness_profile().unwrap();
    let hand = 108.0 + (4.0 * 0.125 + 4.0 * 1.0 + 4.0 * 8.0) / 3.0;
    assert!((a_n(&ens, &t, &prof).unwrap() - hand).abs() < 1e-12);
    let flat = profile(7.0, 0.0, 1.0, 1.0);
    assert_eq!(a_n(&ens, &t, &flat).unwrap(), 7.0);
    let gauss = MirroredTarget::new(
        ConstrainedTarget::gaussian(vec![0.0], DMatrix::from_element(1, 1, 2.0)).unwrap(),
        map.clone(),
    )
    .unwrap();
    let half = MirroredTarget::new(ConstrainedTarget::gaussian(vec![0.0], DMatrix::identity(1, 1)).unwrap(), map).unwrap();
    assert_eq!(a_n(&ens, &half, &half.smoothness_profile().unwrap()).unwrap(), 1.0);
    assert!((a_n(&ens, &gauss, &gauss.smoothness_profile().unwrap()).unwrap() - 0.5).abs() < 1e-15);
}

/// Standard KSD V-statistic with the IMQ kernel `(c^2 + |x - y|^2)^beta`
/// and score `s`, in Euclidean coordinates.
fn ksd_reference(x: &[[f64; 2]], s: impl Fn([f64; 2]) -> [f64; 2], c: f64, beta: f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for a in x {
        for b in x {
            let r = [a[0] - b[0], a[1] - b[1]];
            let r2 = r[0] * r[0] + r[1] * r[1];
            let base = c * c + r2;
            let k = base.powf(beta);
            let f1 = beta * base.powf(beta - 1.0);
            let f2 = beta * (beta - 1.0) * base.powf(beta - 2.0);
            let (sa, sb) = (s(*a), s(*b));
            // grad_x k = 2 f1 r, grad_y k = -2 f1 r
            let gx = [2.0 * f1 * r[0], 2.0 * f1 * r[1]];
            // tr(d_x d_y k) = -(2 d f1 + 4 f2 r2)
            let tr = -(4.0 * f1 + 4.0 * f2 * r2);
            total += k * (sa[0] * sb[0] + sa[1] * sb[1]) - (sa[0] * gx[0] + sa[1] * gx[1]) + (gx[0] * sb[0] + gx[1] * sb[1]) + tr;
        }
    }
    total / (n * n) as f64
}

#[test]
fn euclidean_stein_fisher_is_the_ksd_v_statistic() {
    let map = MirrorMap::euclidean(2).unwrap();
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let p = cov.clone().try_inverse().unwrap();
    let mean = [0.2, -0.4];
    let t = MirroredTarget::new(ConstrainedTarget::gaussian(mean.to_vec(), cov).unwrap(), map.clone()).unwrap();
    let kernel = Kernel::imq(1.2, -0.5).unwrap();
    let ens = init_ensemble(&map, 30, 4).unwrap();
    let pts: Vec<[f64; 2]> = ens.dual().chunks(2).map(|c| [c[0], c[1]]).collect();
    let score = |x: [f64; 2]| {
        let d = [x[0] - mean[0], x[1] - mean[1]];
        [-(p[(0, 0)] * d[0] + p[(0, 1)] * d[1]), -(p[(1, 0)] * d[0] + p[(1, 1)] * d[1])]
    };
    let want = ksd_reference(&pts, score, 1.2, -0.5);
    let got = stein_fisher_particles(&ens, &t, &kernel).unwrap();
    assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} {want}");
}

#[test]
fn single_symmetric_particle_keeps_only_the_trace_term() {
    let map = MirrorMap::entropic_simplex(1).unwrap();
    let t = MirroredTarget::new(ConstrainedTarget::dirichlet(vec![1.0, 1.0]).unwrap(), map.clone()).unwrap();
    let ens = ParticleEnsemble::from_primal(&map, vec![0.5]).unwrap();
    // score 0, kernel gradient 0; the mixed derivative of IMQ(1, -1/2) at
    // coincidence is 1, sandwiched by H^-1 = 1/4 on both sides.
    let v = stein_fisher_particles(&ens, &t, &Kernel::imq(1.0, -0.5).unwrap()).unwrap();
    assert!((v - 0.0625).abs() < 1e-15, "{v}");
}

#[test]
fn particle_estimate_agrees_with_quadrature() {
    // mu = N(0, 1) against pi_bar ∝ exp(-x^4); the diagonal of the
    // V-statistic is 16 x^6 + 1 here and is removed to get an unbiased U-statistic.
    let t = quartic();
    let map = t.map().clone();
    let kernel = Kernel::imq(1.0, -0.5).unwrap();
    let grid = Arc::new(Grid::for_target(&t, 4096).unwrap());
    let q = Quadrature::new(grid.clone(), t.clone(), kernel.clone()).unwrap();
    let exact = q.stein_fisher(&GridDensity::standard_normal(grid).unwrap()).unwrap();
    let (reps, n) = (12, 800);
    let mut us = Vec::new();
    for r in 0..reps {
        let ens = init_ensemble(&map, n, 1000 + r).unwrap();
        let v = stein_fisher_particles(&ens, &t, &kernel).unwrap();
        let diag = ens.dual().iter().map(|x| 16.0 * x.powi(6) + 1.0).sum::<f64>() / n as f64;
        us.push((n as f64 * v - diag) / (n as f64 - 1.0));
    }
    let mean = us.iter().sum::<f64>() / reps as f64;
    let sd = (us.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn c_pi_p_for_the_standard_normal_is_twice_the_grid_minimum() {
    let map = MirrorMap::euclidean(1).unwrap();
    let t = MirroredTarget::new(ConstrainedTarget::gaussian(vec![0.0], DMatrix::identity(1, 1)).unwrap(), map).unwrap();
    let est = c_pi_p(&t, 1.0, 10.0).unwrap();
    assert_eq!(est.divergent, 0);
    assert_eq!(est.sampled, 64);
    // log E exp(s|X|) = s^2/2 + log(2 Phi(s)) for X ~ N(0, 1).
    let mut best = f64::INFINITY;
    for i in 0..64 {
        let s = (1e-3f64.ln() + (10f64.ln() - 1e-3f64.ln()) * i as f64 / 63.0).exp();
        let phi = 1.0 - 0.5 * libm::erfc(s / 2f64.sqrt());
        let lm = s * s / 2.0 + (2.0 * phi).ln();
        best = best.min(2.0 * (1.5 + lm) / s);
    }
    assert!((est.value - best).abs() < 1e-6 * best, "{} {best}", est.value);
    assert!(est.x0[0].abs() < 1e-9);
}

#[test]
fn c_pi_p_detects_divergent_moments() {
    let t = quartic();
    // |x|^4 moments diverge for s >= 1 against exp(-x^4)
    let est = c_pi_p(&t, 4.0, 10.0).unwrap();
    assert!(est.divergent > 0);
    assert!(est.largest_convergent_s < 1.0);
    assert!(est.value.is_finite());
    // |x|^3 is dominated by x^4, so every s converges
    let est3 = c_pi_p(&t, 3.0, 10.0).unwrap();
    assert_eq!(est3.divergent, 0);
    let map = MirrorMap::euclidean(1).unwrap();
    let flat = MirroredTarget::new(ConstrainedTarget::power_law(1.0, map.clone()).unwrap(), map).unwrap();
    assert!(matches!(c_pi_p(&flat, 2.0, 10.0), Err(Error::Assumption(_))));
}

#[test]
fn c_pi_p_grows_slowly_with_dimension() {
    for p in [2.0, 3.0] {
        let est = |d: usize| {
            let map = MirrorMap::euclidean(d).unwrap();
            let t = MirroredTarget::new(ConstrainedTarget::power_law(p, map.clone()).unwrap(), map).unwrap();
            c_pi_p(&t, p - 1.0f64.max(0.0), 10.0).map(|e| e.value)
        };
        let (c1, c2) = (est(1).unwrap(), est(2).unwrap());
        let ratio = c2 / c1;
        assert!(ratio > 1.0 && ratio < 2.0 * 2f64.powf(1.0 / p), "p={p}: {c1} {c2}");
    }
}

#[test]
fn c_pi_p_quadrature_in_two_dimensions() {
    let map = MirrorMap::entropic_simplex(2).unwrap();
    let t = MirroredTarget::new(ConstrainedTarget::dirichlet(vec![3.0, 3.0, 3.0]).unwrap(), map).unwrap();
    let est = c_pi_p(&t, 1.0, 10.0).unwrap();
    assert!(est.value.is_finite() && est.value > 0.0);
    let map = MirrorMap::euclidean(2).unwrap();
    let radial = MirroredTarget::new(ConstrainedTarget::power_law(2.0, map.clone()).unwrap(), map).unwrap();
    let g = MirroredTarget::new(
        ConstrainedTarget::gaussian(vec![0.0; 2], DMatrix::identity(2, 2) * 0.5).unwrap(),
        MirrorMap::euclidean(2).unwrap(),
    )
    .unwrap();
    // exp(-|x|^2) is N(0, I/2): radial and grid quadrature must agree.
    let a = c_pi_p(&radial, 1.0, 10.0).unwrap().value;
    let b = c_pi_p(&g, 1.0, 10.0).unwrap().value;
    assert!((a - b).abs() < 1e-4 * a, "{a} {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn m_is_nonincreasing(
        b1 in 0.01f64..10.0, b2 in 0.01f64..10.0, k in 0.01f64..10.0, d in 1usize..50,
        l0 in 0.0f64..100.0, l1 in prop_oneof![Just(0.0), 0.0f64..10.0], alpha in 1.01f64..10.0,
        x1 in 0.0f64..1e4, dx in 0.0f64..1e4,
    ) {
        let c = StepConstants { b1, b2, k, d, l0, l1, alpha };
        let (a, b) = (m_function(x1, &c), m_function(x1 + dx, &c));
        prop_assert!(a >= b);
        prop_assert!(a > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stein_fisher_is_nonnegative(seed in 0u64..10_000, n in 1usize..12, which in 0usize..3) {
        let map = MirrorMap::entropic_simplex(2).unwrap();
        let t = MirroredTarget::new(ConstrainedTarget::dirichlet(vec![0.7, 2.0, 4.0]).unwrap(), map.clone()).unwrap();
        let kernel = match which {
            0 => Kernel::imq(1.0, -0.5).unwrap(),
            1 => Kernel::rbf(0.3).unwrap(),
            _ => Kernel::dual_imq(1.0, -0.5, map.clone()).unwrap(),
        };
        let ens = init_ensemble(&map, n, seed).unwrap();
        prop_assert!(stein_fisher_particles(&ens, &t, &kernel).unwrap() >= -1e-10);
    }
}
