//! Per-iteration-noise baselines.
//!
//! - BST14 with a constant number of epochs: with-replacement sampling and
//!   Gaussian gradient noise, privacy by advanced composition over `T` steps.
//! - SCS13-style noisy mini-batch PSGD: Laplace-ball noise on every batch
//!   gradient, per-step sensitivity `2L`, budget `ε/k` per pass.
//!
//! Batched BST14 runs `T = k⌊m/b⌋` steps of `b` sampled examples each and
//! uses the sampling rate `b/m` for amplification; with `b = 1` this is the
//! original listing.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::Loss;
use crate::noise::{sample_laplace_ball, PrivacyBudget};
use crate::rng::{self, Stream};
use crate::sgd::{project, psgd_perturbed, SgdConfig, StepSchedule};

/// Per-iteration L2-sensitivity multiplier of the BST14 noise. Per-example
/// gradients of logistic and Huber losses on normalized data have norm ≤ 1.
pub const IOTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bst14Params {
    /// `T`
    pub iterations: usize,
    pub delta1: f64,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub sigma2: f64,
}

/// Left-hand side of the composition equation minus `ε`.
fn composition_residual(e1: f64, epsilon: f64, t: f64, delta1: f64) -> f64 {
    t * e1 * e1.exp_m1() + (2.0 * t * (1.0 / delta1).ln()).sqrt() * e1 - epsilon
}

/// Positive root `ε₁` of `ε = T·ε₁(e^{ε₁} − 1) + sqrt(2T ln(1/δ₁))·ε₁`.
pub fn solve_bst14_epsilon1(epsilon: f64, t: usize, delta1: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", format!("{epsilon} must be finite and > 0")));
    }
    if t < 1 {
        return Err(Error::param("T", "must be at least 1"));
    }
    if !(delta1 > 0.0 && delta1 < 1.0) {
        return Err(Error::param("delta1", format!("{delta1} not in (0, 1)")));
    }
    let t = t as f64;
    let f = |x: f64| composition_residual(x, epsilon, t, delta1);

    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    let residual = f(root).abs();
    if residual < 1e-10 && root > 0.0 {
        Ok(root)
    } else {
        Err(Error::NoConvergence(format!(
            "epsilon1 bisection ended at {root} with residual {residual:e}"
        )))
    }
}

pub fn bst14_params(epsilon: f64, delta: f64, m: usize, k: usize, b: usize) -> Result<Bst14Params> {
    if delta <= 0.0 {
        return Err(Error::param("delta", "BST14 needs delta > 0"));
    }
    if k < 1 || b < 1 || b > m {
        return Err(Error::param("passes/batch", format!("need k ≥ 1 and 1 ≤ b ≤ m (k={k}, b={b}, m={m})")));
    }
    let n = m / b;
    let iterations = k * n;
    let delta1 = delta / iterations as f64;
    let epsilon1 = solve_bst14_epsilon1(epsilon, iterations, delta1)?;
    let epsilon2 = (n as f64 * epsilon1 / 2.0).min(1.0);
    let sigma2 = 2.0 * (1.25 / delta1).ln() / (epsilon2 * epsilon2);
    Ok(Bst14Params {
        iterations,
        delta1,
        epsilon1,
        epsilon2,
        sigma2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    /// Released model.
    pub w: Vec<f64>,
    pub iterations: usize,
    pub max_iterate_norm: f64,
    /// Wall time of the whole run, noise included.
    pub seconds: f64,
    pub bst14: Option<Bst14Params>,
}

#[derive(Clone, Copy)]
enum Bst14Step {
    Convex { g: f64 },
    StronglyConvex { gamma: f64 },
}

impl Bst14Step {
    fn eta(&self, t: usize, radius: f64) -> f64 {
        let t = t as f64;
        match *self {
            Bst14Step::Convex { g } => 2.0 * radius / (g * t.sqrt()),
            Bst14Step::StronglyConvex { gamma } => 1.0 / (gamma * t),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bst14_run<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    passes: usize,
    budget: &PrivacyBudget,
    radius: f64,
    b: usize,
    seed: u64,
    strongly_convex: bool,
) -> Result<BaselineRun> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::param("radius", "BST14 needs a finite radius"));
    }
    let start = Instant::now();
    let params = bst14_params(budget.epsilon, budget.delta, ds.len(), passes, b)?;
    let consts = loss.constants();
    let d = ds.dim();
    let step = if strongly_convex {
        Bst14Step::StronglyConvex { gamma: consts.strong_convexity }
    } else {
        let bl = b as f64 * consts.lipschitz;
        Bst14Step::Convex { g: (d as f64 * params.sigma2 + bl * bl).sqrt() }
    };
    let sigma = (params.sigma2 * IOTA).sqrt();

    let mut sampler = rng::seeded(seed, Stream::Sampling);
    let mut noise = rng::seeded(seed, Stream::IterationNoise);
    let m = ds.len();
    let mut w = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut max_norm: f64 = 0.0;
    for t in 1..=params.iterations {
        g.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..b {
            let i = sampler.random_range(0..m);
            loss.accumulate_gradient(&w, ds.get(i), 1.0, &mut g);
        }
        for v in g.iter_mut() {
            *v += sigma * noise.sample::<f64, _>(StandardNormal);
        }
        linalg::axpy(-step.eta(t, radius), &g, &mut w);
        project(&mut w, Some(radius));
        max_norm = max_norm.max(linalg::norm(&w));
    }
    Ok(BaselineRun {
        w,
        iterations: params.iterations,
        max_iterate_norm: max_norm,
        seconds: start.elapsed().as_secs_f64(),
        bst14: Some(params),
    })
}

/// Convex BST14 with `k` epochs: `η_t = 2R/(G√t)`, `G = sqrt(dσ² + b²L²)`.
pub fn bst14_convex<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    passes: usize,
    budget: &PrivacyBudget,
    radius: f64,
    b: usize,
    seed: u64,
) -> Result<BaselineRun> {
    if loss.constants().is_strongly_convex() {
        return Err(Error::param("loss", "convex BST14 expects an unregularized loss"));
    }
    bst14_run(ds, loss, passes, budget, radius, b, seed, false)
}

/// Strongly convex BST14 with `k` epochs: `η_t = 1/(γt)`.
pub fn bst14_strongly_convex<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    passes: usize,
    budget: &PrivacyBudget,
    radius: f64,
    b: usize,
    seed: u64,
) -> Result<BaselineRun> {
    if !loss.constants().is_strongly_convex() {
        return Err(Error::param("loss", "strongly convex BST14 needs lambda > 0"));
    }
    bst14_run(ds, loss, passes, budget, radius, b, seed, true)
}

/// Noisy mini-batch PSGD. Each batch-average gradient receives `κ_t/b`, with
/// `κ_t` Laplace-ball noise of sensitivity `2L` at budget `ε/k`.
///
/// Batches of a pass are disjoint (parallel composition); passes compose
/// sequentially. The released model follows `cfg.averaging`.
pub fn scs13<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    schedule: &StepSchedule,
    cfg: &SgdConfig,
    epsilon: f64,
) -> Result<BaselineRun> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", format!("{epsilon} must be finite and > 0")));
    }
    cfg.validate(ds.len())?;
    let start = Instant::now();
    let per_pass = epsilon / cfg.passes as f64;
    let step_sensitivity = 2.0 * loss.constants().lipschitz;
    let inv_b = 1.0 / cfg.batch_size as f64;
    let d = ds.dim();
    let mut noise = rng::seeded(cfg.seed, Stream::IterationNoise);
    let orders = cfg.pass_orders(ds.len())?;
    let run = psgd_perturbed(ds, loss, schedule, cfg, &orders, |_, g| {
        let kappa = sample_laplace_ball(d, step_sensitivity, per_pass, &mut noise)?;
        linalg::axpy(inv_b, &kappa, g);
        Ok(())
    })?;
    Ok(BaselineRun {
        w: run.released(cfg.averaging).to_vec(),
        iterations: run.iterations,
        max_iterate_norm: run.max_iterate_norm,
        seconds: start.elapsed().as_secs_f64(),
        bst14: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::losses::{LossConstants, LossModel};
    use crate::sgd::{psgd_run, Averaging};

    fn toy(m: usize) -> Dataset {
        let ex = (0..m)
            .map(|i| {
                let s = if i % 3 == 0 { -1.0 } else { 1.0 };
                Example::new(vec![0.5 * s, 0.1 * (i % 7) as f64, -0.2], s).unwrap().normalized()
            })
            .collect();
        Dataset::new(ex).unwrap()
    }

    /// Oracle: plain bisection on the residual with its own bracket.
    fn bisect(epsilon: f64, t: f64, delta1: f64) -> f64 {
        let f = |x: f64| t * x * (x.exp() - 1.0) + (2.0 * t * (1.0 / delta1).ln()).sqrt() * x - epsilon;
        let (mut lo, mut hi) = (0.0_f64, epsilon);
        while hi - lo > 1e-15 {
            let mid = (lo + hi) / 2.0;
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (lo + hi) / 2.0
    }

    #[test]
    fn epsilon1_root() {
        let root = solve_bst14_epsilon1(1.0, 1000, 1e-6).unwrap();
        let oracle = bisect(1.0, 1000.0, 1e-6);
        assert!((root - oracle).abs() < 1e-12, "{root} vs {oracle}");
        assert!(composition_residual(root, 1.0, 1000.0, 1e-6).abs() < 1e-10);
        assert!(solve_bst14_epsilon1(1.0, 2000, 1e-6).unwrap() < root);
    }

    #[test]
    fn epsilon1_grid() {
        for eps in [0.1, 1.0, 4.0] {
            for t in [100, 1000, 10_000, 100_000] {
                for delta1 in [1e-8, 1e-7, 1e-6, 1e-5, 1e-4] {
                    let r = solve_bst14_epsilon1(eps, t, delta1).unwrap();
                    assert!(r > 0.0);
                    assert!(composition_residual(r, eps, t as f64, delta1).abs() < 1e-10);
                }
            }
        }
        assert!(solve_bst14_epsilon1(0.0, 10, 1e-6).is_err());
        assert!(solve_bst14_epsilon1(1.0, 0, 1e-6).is_err());
        assert!(solve_bst14_epsilon1(1.0, 10, 0.0).is_err());
    }

    #[test]
    fn params_formulae() {
        let p = bst14_params(1.0, 1e-6, 100, 2, 1).unwrap();
        assert_eq!(p.iterations, 200);
        assert!((p.delta1 - 5e-9).abs() < 1e-24);
        assert_eq!(p.epsilon2, (100.0 * p.epsilon1 / 2.0).min(1.0));
        assert!((p.sigma2 - 2.0 * (1.25 / p.delta1).ln() / p.epsilon2.powi(2)).abs() < 1e-9);
        assert!(bst14_params(1.0, 0.0, 100, 2, 1).is_err());
    }

    #[test]
    fn bst14_steps_and_radius() {
        assert_eq!(Bst14Step::StronglyConvex { gamma: 0.01 }.eta(10, 100.0), 10.0);
        assert_eq!(Bst14Step::Convex { g: 4.0 }.eta(1, 3.0), 1.5);
        let ds = toy(60);
        let budget = PrivacyBudget::new(0.5, 1e-4).unwrap();
        let sc = LossModel::logistic(0.01, Some(100.0)).unwrap();
        let a = bst14_strongly_convex(&ds, &sc, 2, &budget, 100.0, 5, 3).unwrap();
        assert!(a.max_iterate_norm <= 100.0);
        let b = bst14_strongly_convex(&ds, &sc, 2, &budget, 100.0, 5, 3).unwrap();
        assert_eq!(a.w, b.w);
        let convex = LossModel::logistic(0.0, None).unwrap();
        let c = bst14_convex(&ds, &convex, 1, &budget, 2.0, 1, 3).unwrap();
        assert!(c.max_iterate_norm <= 2.0);
        assert_eq!(c.iterations, 60);
        assert!(bst14_convex(&ds, &sc, 1, &budget, 2.0, 1, 3).is_err());
        assert!(bst14_strongly_convex(&ds, &convex, 1, &budget, 2.0, 1, 3).is_err());
    }

    #[test]
    fn scs13_structure_and_large_epsilon() {
        let ds = toy(2);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let cfg = SgdConfig { batch_size: 2, radius: Some(5.0), ..Default::default() };
        let r = scs13(&ds, &loss, &StepSchedule::Constant { eta: 1.0 }, &cfg, 1.0).unwrap();
        assert_eq!(r.iterations, 1);

        let ds = toy(40);
        let cfg = SgdConfig { passes: 2, batch_size: 4, radius: Some(5.0), averaging: Averaging::LastIterate, seed: 4, ..Default::default() };
        let sched = StepSchedule::Constant { eta: 0.5 };
        let plain = psgd_run(&ds, &loss, &sched, &cfg).unwrap();
        let noisy = scs13(&ds, &loss, &sched, &cfg, 1e6).unwrap();
        assert!(linalg::distance(&plain.w, &noisy.w) < 1e-3);
        assert!(scs13(&ds, &loss, &sched, &cfg, 0.0).is_err());
    }

    /// Zero gradients but a declared `L = 1`, so the noise alone moves `w`.
    struct NoiseOnly;

    impl Loss for NoiseOnly {
        fn value(&self, _: &[f64], _: &Example) -> f64 {
            0.0
        }
        fn accumulate_gradient(&self, _: &[f64], _: &Example, _: f64, _: &mut [f64]) {}
        fn constants(&self) -> LossConstants {
            LossConstants::new(1.0, 1.0, 0.0).unwrap()
        }
    }

    #[test]
    fn scs13_noise_scale() {
        // one update of size η from w = 0: ‖w‖ = η‖κ‖/b, E‖κ‖ = d·2L·k/ε
        let ds = toy(2);
        let (d, eps, eta, b) = (3.0, 2.0, 0.5, 2.0);
        let trials = 20_000;
        let mean: f64 = (0..trials)
            .map(|seed| {
                let cfg = SgdConfig { batch_size: 2, averaging: Averaging::LastIterate, seed, ..Default::default() };
                let r = scs13(&ds, &NoiseOnly, &StepSchedule::Constant { eta }, &cfg, eps).unwrap();
                linalg::norm(&r.w) * b / eta
            })
            .sum::<f64>()
            / trials as f64;
        let expected = d * 2.0 / eps;
        assert!((mean / expected - 1.0).abs() < 0.02, "{mean} vs {expected}");
    }
}
