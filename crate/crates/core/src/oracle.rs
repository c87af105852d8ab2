//! Empirical sensitivity: run PSGD on neighboring datasets with identical
//! randomness and measure how far the released models end up apart.
//!
//! The result is a lower bound on the true sensitivity and must never exceed
//! the analytic bounds.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::experiment::generate_synthetic;
use crate::linalg;
use crate::losses::{Loss, LossModel};
use crate::noise::sample_unit_sphere;
use crate::sensitivity::{closed_form, sens_recursion};
use crate::sgd::{psgd_run, Averaging, SgdConfig, StepSchedule};

/// `S` and the neighbor obtained by replacing row `index` with `replacement`.
#[derive(Debug, Clone)]
pub struct SensitivityProbe<'a> {
    pub ds: &'a Dataset,
    pub index: usize,
    pub replacement: Example,
    pub schedule: StepSchedule,
    pub config: SgdConfig,
}

/// `‖A(S) − A(S′)‖` for the released model, same seed on both sides.
pub fn divergence<L: Loss + ?Sized>(probe: &SensitivityProbe<'_>, loss: &L) -> Result<f64> {
    let neighbor = neighbor_of(probe)?;
    let a = psgd_run(probe.ds, loss, &probe.schedule, &probe.config)?;
    let b = psgd_run(&neighbor, loss, &probe.schedule, &probe.config)?;
    Ok(linalg::distance(a.released(probe.config.averaging), b.released(probe.config.averaging)))
}

fn neighbor_of(probe: &SensitivityProbe<'_>) -> Result<Dataset> {
    if probe.replacement.norm() > 1.0 + 1e-12 {
        return Err(Error::param("replacement", "replacement row must satisfy ‖x‖ ≤ 1"));
    }
    probe.ds.with_replaced(probe.index, probe.replacement.clone())
}

/// Adversarial replacements for `ex`: label flip, `−x` with either label, the
/// zero vector and a random unit direction with each label.
pub fn replacement_pool(ex: &Example, direction: &[f64]) -> Vec<Example> {
    let neg: Vec<f64> = ex.x().iter().map(|v| -v).collect();
    let zero = vec![0.0; ex.dim()];
    let mut pool = vec![ex.flipped()];
    for y in [-1.0, 1.0] {
        for x in [&neg, &zero, &direction.to_vec()] {
            pool.push(Example::new(x.clone(), y).expect("finite features and ±1 label"));
        }
    }
    pool
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub value: f64,
    pub index: usize,
    pub seed: u64,
}

/// Maximum divergence over every row, the replacement pool and
/// `trials + 1` permutation seeds (the configured one plus `trials` drawn
/// from `rng`).
pub fn empirical_sensitivity<L, R>(
    ds: &Dataset,
    loss: &L,
    schedule: &StepSchedule,
    cfg: &SgdConfig,
    trials: usize,
    rng: &mut R,
) -> Result<SensitivityEstimate>
where
    L: Loss + ?Sized,
    R: Rng + ?Sized,
{
    if trials < 1 {
        return Err(Error::param("trials", "must be at least 1"));
    }
    let mut seeds = vec![cfg.seed];
    seeds.extend((0..trials).map(|_| rng.random::<u64>()));
    let directions: Vec<Vec<f64>> = (0..ds.len()).map(|_| sample_unit_sphere(ds.dim(), rng)).collect();

    let mut best = SensitivityEstimate { value: 0.0, index: 0, seed: cfg.seed };
    for seed in seeds {
        let cfg = SgdConfig { seed, ..cfg.clone() };
        let orders = cfg.pass_orders(ds.len())?;
        let base = crate::sgd::psgd_with_orders(ds, loss, schedule, &cfg, &orders)?;
        let released = base.released(cfg.averaging);
        let per_row = (0..ds.len())
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let mut worst: f64 = 0.0;
                for rep in replacement_pool(ds.get(i), &directions[i]) {
                    let neighbor = ds.with_replaced(i, rep)?;
                    let run = crate::sgd::psgd_with_orders(&neighbor, loss, schedule, &cfg, &orders)?;
                    worst = worst.max(linalg::distance(released, run.released(cfg.averaging)));
                }
                Ok(worst)
            })
            .collect::<Result<Vec<f64>>>()?;
        for (i, v) in per_row.into_iter().enumerate() {
            if v > best.value {
                best = SensitivityEstimate { value: v, index: i, seed };
            }
        }
    }
    Ok(best)
}

/// One point of the soundness grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub loss: LossModel,
    pub schedule: StepSchedule,
    pub passes: usize,
    pub m: usize,
    pub batch: usize,
    pub averaging: Averaging,
    pub radius: Option<f64>,
}

impl OracleConfig {
    pub fn sgd_config(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            passes: self.passes,
            batch_size: self.batch,
            radius: self.radius,
            averaging: self.averaging,
            fresh_permutation_per_pass: false,
            seed,
        }
    }
}

/// Losses {logistic, Huber(h=0.1)} × λ ∈ {0, 0.01}, every applicable
/// schedule (constant η = 1/β, c = 0.5), k ∈ {1,2,5}, m ∈ {20,50}, b ∈ {1,5}.
///
/// Projection radius is `1/λ`, or 10 for unregularized losses. The
/// strongly convex decreasing schedule releases the last iterate, the others
/// the uniform average.
pub fn oracle_grid() -> Vec<OracleConfig> {
    let losses = [
        LossModel::logistic(0.0, None),
        LossModel::logistic(0.0, None).and_then(|l| l.with_lambda(0.01)),
        LossModel::huber(0.1, 0.0, None),
        LossModel::huber(0.1, 0.0, None).and_then(|l| l.with_lambda(0.01)),
    ];
    let mut out = Vec::new();
    for loss in losses.into_iter().map(|l| l.expect("valid grid loss")) {
        let consts = loss.constants();
        let mut schedules = vec![
            (StepSchedule::Constant { eta: 1.0 / consts.smoothness }, Averaging::UniformAverage),
            (StepSchedule::ConvexDecreasing { c: 0.5 }, Averaging::UniformAverage),
            (StepSchedule::ConvexSqrt { c: 0.5 }, Averaging::UniformAverage),
        ];
        if consts.is_strongly_convex() {
            schedules.push((StepSchedule::StronglyConvexDecreasing, Averaging::LastIterate));
        }
        let radius = loss.radius().or(Some(10.0));
        for &(schedule, averaging) in &schedules {
            for passes in [1, 2, 5] {
                for m in [20, 50] {
                    for batch in [1, 5] {
                        out.push(OracleConfig { loss, schedule, passes, m, batch, averaging, radius });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub loss: String,
    pub lambda: f64,
    pub schedule: String,
    pub passes: usize,
    pub m: usize,
    pub batch: usize,
    pub averaging: String,
    pub empirical: f64,
    pub recursion: f64,
    pub closed_form: Option<f64>,
    /// `empirical / recursion`
    pub ratio: f64,
}

/// Empirical and analytic sensitivity for one grid point on a synthetic
/// dataset of dimension `d`.
pub fn run_oracle_config(config: &OracleConfig, d: usize, trials: usize, seed: u64) -> Result<OracleRow> {
    let ds = generate_synthetic(config.m, d, 1.0, 0.1, seed)?;
    let cfg = config.sgd_config(seed);
    let mut rng = crate::rng::seeded(seed, crate::rng::Stream::Oracle);
    let est = empirical_sensitivity(&ds, &config.loss, &config.schedule, &cfg, trials, &mut rng)?;
    let consts = config.loss.constants();
    let recursion = sens_recursion(
        &config.schedule,
        config.m,
        config.passes,
        config.batch,
        &consts,
        config.averaging,
        false,
    )?
    .delta2;
    let closed = closed_form(&config.schedule, config.m, config.passes, config.batch, &consts, config.averaging)
        .ok()
        .map(|b| b.delta2);
    Ok(OracleRow {
        loss: config.loss.kind().to_string(),
        lambda: config.loss.lambda(),
        schedule: config.schedule.name().to_string(),
        passes: config.passes,
        m: config.m,
        batch: config.batch,
        averaging: config.averaging.to_string(),
        empirical: est.value,
        recursion,
        closed_form: closed,
        ratio: if recursion > 0.0 { est.value / recursion } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossConstants;
    use crate::rng::{self, Stream};

    fn small(m: usize) -> Dataset {
        generate_synthetic(m, 2, 1.0, 0.0, 7).unwrap()
    }

    #[test]
    fn identical_replacement_gives_zero() {
        let ds = small(8);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let probe = SensitivityProbe {
            ds: &ds,
            index: 3,
            replacement: ds.get(3).clone(),
            schedule: StepSchedule::Constant { eta: 0.25 },
            config: SgdConfig::default(),
        };
        assert_eq!(divergence(&probe, &loss).unwrap(), 0.0);
    }

    #[test]
    fn label_flip_matches_double_unroll() {
        let ds = small(8);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let eta = 0.25;
        let cfg = SgdConfig { averaging: Averaging::LastIterate, seed: 2, ..Default::default() };
        let probe = SensitivityProbe {
            ds: &ds,
            index: 3,
            replacement: ds.get(3).flipped(),
            schedule: StepSchedule::Constant { eta },
            config: cfg.clone(),
        };
        let order = cfg.pass_orders(8).unwrap();
        let unroll = |flip: bool| {
            let mut w = [0.0_f64; 2];
            for &i in order[0].mapping() {
                let ex = ds.get(i);
                let y = if flip && i == 3 { -ex.y() } else { ex.y() };
                let z = y * (w[0] * ex.x()[0] + w[1] * ex.x()[1]);
                let g = -1.0 / (1.0 + z.exp());
                w[0] -= eta * g * y * ex.x()[0];
                w[1] -= eta * g * y * ex.x()[1];
            }
            w
        };
        let (a, b) = (unroll(false), unroll(true));
        let expected = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let got = divergence(&probe, &loss).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        assert!(got > 0.0);
    }

    #[test]
    fn symmetric() {
        let ds = small(10);
        let loss = LossModel::huber(0.1, 0.0, None).unwrap();
        let rep = Example::new(vec![0.0, -1.0], 1.0).unwrap();
        let schedule = StepSchedule::ConvexSqrt { c: 0.5 };
        let cfg = SgdConfig { passes: 2, seed: 1, ..Default::default() };
        let fwd = SensitivityProbe { ds: &ds, index: 4, replacement: rep.clone(), schedule, config: cfg.clone() };
        let other = ds.with_replaced(4, rep).unwrap();
        let back = SensitivityProbe { ds: &other, index: 4, replacement: ds.get(4).clone(), schedule, config: cfg };
        assert_eq!(divergence(&fwd, &loss).unwrap(), divergence(&back, &loss).unwrap());
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
    fn flat_loss_has_zero_sensitivity() {
        let ds = small(10);
        let est = empirical_sensitivity(
            &ds,
            &Flat,
            &StepSchedule::Constant { eta: 1.0 },
            &SgdConfig::default(),
            2,
            &mut rng::seeded(0, Stream::Oracle),
        )
        .unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn convex_constant_within_band() {
        let config = OracleConfig {
            loss: LossModel::logistic(0.0, None).unwrap(),
            schedule: StepSchedule::Constant { eta: 1.0 },
            passes: 2,
            m: 20,
            batch: 1,
            averaging: Averaging::LastIterate,
            radius: None,
        };
        let row = run_oracle_config(&config, 3, 3, 1).unwrap();
        assert!(row.empirical <= row.recursion + 1e-9);
        assert!(row.empirical >= 0.1 * row.recursion, "{row:?}");
        assert_eq!(row.closed_form, Some(row.recursion));
    }

    #[test]
    fn grid_shape() {
        let g = oracle_grid();
        assert_eq!(g.len(), 168);
        assert!(g
            .iter()
            .all(|c| c.schedule != StepSchedule::StronglyConvexDecreasing || c.loss.lambda() > 0.0));
    }

    #[test]
    fn rejects_unnormalized_replacement() {
        let ds = small(4);
        let probe = SensitivityProbe {
            ds: &ds,
            index: 0,
            replacement: Example::new(vec![2.0, 0.0], 1.0).unwrap(),
            schedule: StepSchedule::Constant { eta: 0.5 },
            config: SgdConfig::default(),
        };
        assert!(divergence(&probe, &LossModel::logistic(0.0, None).unwrap()).is_err());
    }
}
