//! Output-perturbation ("bolt-on") private training.
//!
//! Run PSGD unchanged, bound the L2-sensitivity of the released model, and
//! add one noise vector to it. Nothing inside the training loop depends on
//! the privacy budget, so the SGD phase is bit-identical to [`psgd_run`].

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::Loss;
use crate::noise::{Mechanism, PrivacyBudget};
use crate::rng::{self, Stream};
use crate::sensitivity::{closed_form, sens_recursion, SensitivityBound};
use crate::sgd::{psgd_run, Averaging, SgdConfig, StepSchedule};

/// Which sensitivity bound calibrates the noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Numerical recursion, never looser than the closed forms it applies to.
    #[default]
    Recursion,
    ClosedForm,
}

impl FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursion" => Ok(BoundKind::Recursion),
            "closed-form" | "closed_form" => Ok(BoundKind::ClosedForm),
            other => Err(Error::param("bound", format!("unknown bound kind `{other}`"))),
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundKind::Recursion => "recursion",
            BoundKind::ClosedForm => "closed-form",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateRunReport {
    pub w_noiseless: Vec<f64>,
    pub kappa: Vec<f64>,
    /// `w_noiseless + kappa`
    pub w_private: Vec<f64>,
    pub sensitivity: SensitivityBound,
    pub budget: PrivacyBudget,
    pub mechanism: Mechanism,
    pub schedule: StepSchedule,
    pub config: SgdConfig,
    pub sgd_seconds: f64,
    pub noise_seconds: f64,
}

impl PrivateRunReport {
    pub fn delta2(&self) -> f64 {
        self.sensitivity.delta2
    }
}

/// Sensitivity of the model released by `psgd_run(ds, loss, schedule, cfg)`.
pub fn run_sensitivity<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    schedule: &StepSchedule,
    cfg: &SgdConfig,
    bound: BoundKind,
) -> Result<SensitivityBound> {
    let m = ds.len();
    let consts = loss.constants();
    match bound {
        BoundKind::ClosedForm => {
            if cfg.fresh_permutation_per_pass && cfg.passes > 1 {
                return Err(Error::param(
                    "bound",
                    "closed forms assume one permutation for all passes; use the recursion",
                ));
            }
            closed_form(schedule, m, cfg.passes, cfg.batch_size, &consts, cfg.averaging)
        }
        BoundKind::Recursion => sens_recursion(
            schedule,
            m,
            cfg.passes,
            cfg.batch_size,
            &consts,
            cfg.averaging,
            cfg.fresh_permutation_per_pass,
        ),
    }
}

fn check_inputs<L: Loss + ?Sized>(ds: &Dataset, loss: &L, cfg: &SgdConfig) -> Result<()> {
    let max_norm = ds.max_norm();
    if max_norm > 1.0 + 1e-9 {
        return Err(Error::param(
            "dataset",
            format!("features must be normalized to ‖x‖ ≤ 1 (found {max_norm})"),
        ));
    }
    // a regularized loss certifies L = 1 + λR only inside its radius
    if loss.constants().strong_convexity > 0.0 {
        let certified = loss
            .radius()
            .ok_or_else(|| Error::param("radius", "regularized loss without a radius"))?;
        match cfg.radius {
            Some(r) if r <= certified * (1.0 + 1e-12) => {}
            Some(r) => {
                return Err(Error::param(
                    "radius",
                    format!("projection radius {r} exceeds the loss's certified radius {certified}"),
                ))
            }
            None => {
                return Err(Error::param(
                    "radius",
                    "strongly convex training needs a finite projection radius",
                ))
            }
        }
    }
    Ok(())
}

/// Output perturbation around an arbitrary PSGD configuration.
///
/// The noise generator is the [`Stream::OutputNoise`] stream of `cfg.seed`.
pub fn private_psgd<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    schedule: &StepSchedule,
    cfg: &SgdConfig,
    budget: &PrivacyBudget,
    bound: BoundKind,
) -> Result<PrivateRunReport> {
    check_inputs(ds, loss, cfg)?;

    let start = Instant::now();
    let run = psgd_run(ds, loss, schedule, cfg)?;
    let w_noiseless = run.released(cfg.averaging).to_vec();
    let sgd_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let sensitivity = run_sensitivity(ds, loss, schedule, cfg, bound)?;
    let mechanism = Mechanism::for_budget(budget);
    let mut noise_rng = rng::seeded(cfg.seed, Stream::OutputNoise);
    let kappa = mechanism.sample(ds.dim(), sensitivity.delta2, budget, &mut noise_rng)?;
    let w_private: Vec<f64> = w_noiseless.iter().zip(&kappa).map(|(w, k)| w + k).collect();
    let noise_seconds = start.elapsed().as_secs_f64();

    Ok(PrivateRunReport {
        w_noiseless,
        kappa,
        w_private,
        sensitivity,
        budget: *budget,
        mechanism,
        schedule: *schedule,
        config: cfg.clone(),
        sgd_seconds,
        noise_seconds,
    })
}

/// `η = R/(L√m)`.
pub fn default_convex_eta(radius: f64, lipschitz: f64, m: usize) -> f64 {
    radius / (lipschitz * (m as f64).sqrt())
}

/// Private PSGD for a convex (unregularized) loss with a constant step.
///
/// `eta = None` uses [`default_convex_eta`], which needs `cfg.radius`.
pub fn private_psgd_convex<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    eta: Option<f64>,
    cfg: &SgdConfig,
    budget: &PrivacyBudget,
    bound: BoundKind,
) -> Result<PrivateRunReport> {
    let consts = loss.constants();
    if consts.is_strongly_convex() {
        return Err(Error::param(
            "loss",
            "convex private PSGD expects an unregularized loss; use the strongly convex variant",
        ));
    }
    let eta = match (eta, cfg.radius) {
        (Some(eta), _) => eta,
        (None, Some(r)) => default_convex_eta(r, consts.lipschitz, ds.len()),
        (None, None) => {
            return Err(Error::param(
                "eta",
                "unconstrained convex training needs an explicit step size",
            ))
        }
    };
    private_psgd(ds, loss, &StepSchedule::Constant { eta }, cfg, budget, bound)
}

/// Private PSGD for a strongly convex loss with `η_t = min(1/(γt), 1/β)`.
///
/// A missing projection radius defaults to the loss's radius (`1/λ` unless
/// set otherwise). With the recursion bound the noise is calibrated to the
/// smaller of the recursion and the closed form whenever the latter applies.
pub fn private_psgd_strongly_convex<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    cfg: &SgdConfig,
    budget: &PrivacyBudget,
    bound: BoundKind,
) -> Result<PrivateRunReport> {
    let consts = loss.constants();
    if !consts.is_strongly_convex() {
        return Err(Error::param("loss", "strongly convex private PSGD needs lambda > 0"));
    }
    let mut cfg = cfg.clone();
    if cfg.radius.is_none() {
        cfg.radius = loss.radius();
    }
    let schedule = StepSchedule::StronglyConvexDecreasing;
    let mut report = private_psgd(ds, loss, &schedule, &cfg, budget, bound)?;
    if bound == BoundKind::Recursion
        && cfg.averaging == Averaging::LastIterate
        && !cfg.fresh_permutation_per_pass
    {
        let closed = closed_form(&schedule, ds.len(), cfg.passes, cfg.batch_size, &consts, cfg.averaging)?;
        if closed.delta2 < report.sensitivity.delta2 {
            // re-draw with the same stream so the result does not depend on
            // which bound won
            let mut noise_rng = rng::seeded(cfg.seed, Stream::OutputNoise);
            report.kappa = report.mechanism.sample(ds.dim(), closed.delta2, budget, &mut noise_rng)?;
            report.w_private = report
                .w_noiseless
                .iter()
                .zip(&report.kappa)
                .map(|(w, k)| w + k)
                .collect();
            report.sensitivity = closed;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_permutation, Example};
    use crate::losses::{empirical_risk, LossConstants, LossModel};
    use crate::noise::sample_laplace_ball;

    fn toy(m: usize) -> Dataset {
        let ex = (0..m)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                Example::new(vec![0.3 * s + 0.05 * i as f64, 0.4], s).unwrap().normalized()
            })
            .collect();
        Dataset::new(ex).unwrap()
    }

    struct Flat;

    impl Loss for Flat {
        fn value(&self, _: &[f64], _: &Example) -> f64 {
            0.0
        }
        fn accumulate_gradient(&self, _: &[f64], _: &Example, _: f64, _: &mut [f64]) {}
        fn constants(&self) -> LossConstants {
            LossConstants::new(0.0, 1.0, 0.0).unwrap()
        }
    }

    #[test]
    fn zero_lipschitz_adds_no_noise() {
        let ds = toy(10);
        let cfg = SgdConfig { radius: Some(1.0), ..Default::default() };
        let budget = PrivacyBudget::pure(0.1).unwrap();
        let r = private_psgd_convex(&ds, &Flat, Some(0.5), &cfg, &budget, BoundKind::Recursion).unwrap();
        assert_eq!(r.delta2(), 0.0);
        assert_eq!(r.w_private, r.w_noiseless);
    }

    #[test]
    fn scalar_unroll_plus_reproduced_noise() {
        let ds = Dataset::new(
            [0.5, -0.25, 1.0, -0.75]
                .iter()
                .zip([1.0, -1.0, -1.0, 1.0])
                .map(|(&x, y)| Example::new(vec![x], y).unwrap())
                .collect(),
        )
        .unwrap();
        let loss = LossModel::logistic(0.0, None).unwrap();
        let cfg = SgdConfig {
            averaging: Averaging::LastIterate,
            seed: 17,
            ..Default::default()
        };
        let eta = 0.5;
        let budget = PrivacyBudget::pure(1.0).unwrap();
        let r = private_psgd_convex(&ds, &loss, Some(eta), &cfg, &budget, BoundKind::Recursion).unwrap();

        let order = sample_permutation(4, 17).unwrap();
        let mut w = 0.0_f64;
        for &i in order.mapping() {
            let (x, y) = (ds.get(i).x()[0], ds.get(i).y());
            let z = y * w * x;
            w -= eta * (-1.0 / (1.0 + z.exp())) * y * x;
        }
        assert!((r.w_noiseless[0] - w).abs() < 1e-15);
        assert!((r.delta2() - 2.0 * eta).abs() < 1e-15);
        let kappa = sample_laplace_ball(1, 2.0 * eta, 1.0, &mut rng::seeded(17, Stream::OutputNoise)).unwrap();
        assert_eq!(r.w_private[0], w + kappa[0]);
    }

    #[test]
    fn sgd_phase_matches_noiseless_run() {
        let ds = toy(40);
        let loss = LossModel::logistic(0.01, Some(100.0)).unwrap();
        let cfg = SgdConfig {
            passes: 3,
            batch_size: 4,
            radius: Some(100.0),
            averaging: Averaging::LastIterate,
            seed: 5,
            ..Default::default()
        };
        let budget = PrivacyBudget::new(0.5, 1e-4).unwrap();
        let r = private_psgd_strongly_convex(&ds, &loss, &cfg, &budget, BoundKind::Recursion).unwrap();
        let plain = psgd_run(&ds, &loss, &StepSchedule::StronglyConvexDecreasing, &cfg).unwrap();
        assert_eq!(r.w_noiseless, plain.w);
        assert_eq!(r.mechanism, Mechanism::Gaussian);
        for i in 0..r.w_private.len() {
            assert_eq!(r.w_private[i] - r.w_noiseless[i], r.kappa[i]);
        }
    }

    #[test]
    fn strongly_convex_defaults_and_k_independence() {
        let ds = toy(1000);
        let loss = LossModel::logistic(0.0, None).unwrap().with_lambda(0.01).unwrap();
        let budget = PrivacyBudget::pure(1.0).unwrap();
        let mut deltas = Vec::new();
        for k in [1, 5] {
            let cfg = SgdConfig {
                passes: k,
                averaging: Averaging::LastIterate,
                ..Default::default()
            };
            let r = private_psgd_strongly_convex(&ds, &loss, &cfg, &budget, BoundKind::ClosedForm).unwrap();
            assert_eq!(r.config.radius, Some(100.0));
            assert!(r.delta2() <= 0.4 + 1e-12);
            deltas.push(r.delta2());
        }
        assert_eq!(deltas[0], deltas[1]);
    }

    #[test]
    fn risk_due_to_privacy() {
        let ds = toy(30);
        let loss = LossModel::huber(0.1, 0.0, None).unwrap();
        for seed in 0..20 {
            let cfg = SgdConfig { radius: Some(2.0), passes: 2, seed, ..Default::default() };
            let budget = PrivacyBudget::pure(2.0).unwrap();
            let r = private_psgd_convex(&ds, &loss, None, &cfg, &budget, BoundKind::Recursion).unwrap();
            let gap = (empirical_risk(&loss, &r.w_noiseless, &ds) - empirical_risk(&loss, &r.w_private, &ds)).abs();
            assert!(gap <= loss.constants().lipschitz * crate::linalg::norm(&r.kappa) + 1e-9);
        }
    }

    #[test]
    fn precondition_errors() {
        let ds = toy(10);
        let budget = PrivacyBudget::pure(1.0).unwrap();
        let convex = LossModel::logistic(0.0, None).unwrap();
        let strong = LossModel::logistic(0.1, Some(10.0)).unwrap();
        let cfg = SgdConfig::default();
        assert!(private_psgd_convex(&ds, &strong, Some(0.1), &cfg, &budget, BoundKind::Recursion).is_err());
        assert!(private_psgd_convex(&ds, &convex, None, &cfg, &budget, BoundKind::Recursion).is_err());
        assert!(private_psgd_convex(&ds, &convex, Some(3.0), &cfg, &budget, BoundKind::Recursion).is_err());
        assert!(private_psgd_strongly_convex(&ds, &convex, &cfg, &budget, BoundKind::Recursion).is_err());
        let too_wide = SgdConfig { radius: Some(20.0), ..Default::default() };
        assert!(private_psgd_strongly_convex(&ds, &strong, &too_wide, &budget, BoundKind::Recursion).is_err());
        let raw = Dataset::new(vec![Example::new(vec![3.0], 1.0).unwrap()]).unwrap();
        assert!(private_psgd_convex(&raw, &convex, Some(0.1), &cfg, &budget, BoundKind::Recursion).is_err());
    }

    #[test]
    fn default_eta() {
        let ds = toy(100);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let cfg = SgdConfig { radius: Some(1.0), ..Default::default() };
        let budget = PrivacyBudget::pure(1.0).unwrap();
        let r = private_psgd_convex(&ds, &loss, None, &cfg, &budget, BoundKind::ClosedForm).unwrap();
        assert_eq!(r.schedule, StepSchedule::Constant { eta: 0.1 });
        assert!((r.delta2() - 0.2).abs() < 1e-15);
    }
}
