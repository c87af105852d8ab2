//! Permutation-based SGD: step-size schedules, projection onto an L2 ball,
//! mini-batching, model averaging and optional fresh permutations per pass.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Permutation};
use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::{Loss, LossConstants};
use crate::rng::{self, Stream};

/// Step size `η_t` as a function of the 1-based update index `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `η_t = eta`
    Constant { eta: f64 },
    /// `η_t = 2 / (β (t + m^c))`
    ConvexDecreasing { c: f64 },
    /// `η_t = 2 / (β (√t + m^c))`
    ConvexSqrt { c: f64 },
    /// `η_t = min(1/(γ t), 1/β)`
    StronglyConvexDecreasing,
}

impl StepSchedule {
    pub fn validate(&self, constants: &LossConstants) -> Result<()> {
        let beta = constants.smoothness;
        match *self {
            StepSchedule::Constant { eta } => {
                let limit = if constants.is_strongly_convex() { 1.0 / beta } else { 2.0 / beta };
                if !(eta > 0.0 && eta <= limit) {
                    return Err(Error::param(
                        "eta",
                        format!("constant step {eta} must lie in (0, {limit}] for beta = {beta}"),
                    ));
                }
            }
            StepSchedule::ConvexDecreasing { c } | StepSchedule::ConvexSqrt { c } => {
                if !(0.0..1.0).contains(&c) {
                    return Err(Error::param("c", format!("{c} not in [0, 1)")));
                }
            }
            StepSchedule::StronglyConvexDecreasing => {
                if !constants.is_strongly_convex() {
                    return Err(Error::param(
                        "schedule",
                        "strongly convex decreasing steps need gamma > 0",
                    ));
                }
            }
        }
        Ok(())
    }

    /// `η_t` for update `t ≥ 1` on a training set of size `m`. Does not
    /// re-validate; see [`StepSchedule::validate`].
    pub fn eta(&self, t: usize, m: usize, constants: &LossConstants) -> f64 {
        let beta = constants.smoothness;
        let t = t as f64;
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::ConvexDecreasing { c } => 2.0 / (beta * (t + (m as f64).powf(c))),
            StepSchedule::ConvexSqrt { c } => 2.0 / (beta * (t.sqrt() + (m as f64).powf(c))),
            StepSchedule::StronglyConvexDecreasing => {
                (1.0 / (constants.strong_convexity * t)).min(1.0 / beta)
            }
        }
    }

    /// [`StepSchedule::eta`] with the per-run constants computed once.
    /// Returns exactly the same values.
    pub fn step_fn(&self, m: usize, constants: &LossConstants) -> impl Fn(usize) -> f64 {
        let beta = constants.smoothness;
        let gamma = constants.strong_convexity;
        let schedule = *self;
        let offset = match schedule {
            StepSchedule::ConvexDecreasing { c } | StepSchedule::ConvexSqrt { c } => (m as f64).powf(c),
            _ => 0.0,
        };
        move |t: usize| {
            let t = t as f64;
            match schedule {
                StepSchedule::Constant { eta } => eta,
                StepSchedule::ConvexDecreasing { .. } => 2.0 / (beta * (t + offset)),
                StepSchedule::ConvexSqrt { .. } => 2.0 / (beta * (t.sqrt() + offset)),
                StepSchedule::StronglyConvexDecreasing => (1.0 / (gamma * t)).min(1.0 / beta),
            }
        }
    }

    /// Checked variant of [`StepSchedule::eta`].
    pub fn step_size(&self, t: usize, m: usize, constants: &LossConstants) -> Result<f64> {
        if t < 1 {
            return Err(Error::param("t", "update index is 1-based"));
        }
        self.validate(constants)?;
        Ok(self.eta(t, m, constants))
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepSchedule::Constant { .. } => "constant",
            StepSchedule::ConvexDecreasing { .. } => "convex_decreasing",
            StepSchedule::ConvexSqrt { .. } => "convex_sqrt",
            StepSchedule::StronglyConvexDecreasing => "strongly_convex_decreasing",
        }
    }
}

impl fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSchedule::Constant { eta } => write!(f, "constant(eta={eta})"),
            StepSchedule::ConvexDecreasing { c } => write!(f, "convex_decreasing(c={c})"),
            StepSchedule::ConvexSqrt { c } => write!(f, "convex_sqrt(c={c})"),
            StepSchedule::StronglyConvexDecreasing => write!(f, "strongly_convex_decreasing"),
        }
    }
}

/// Expansiveness factor of a gradient step of size `eta`: `1 - ηγ` when the
/// loss is strongly convex and `η ≤ 1/β`, `1` when `η ≤ 2/β`.
pub fn expansion_factor(eta: f64, constants: &LossConstants) -> Result<f64> {
    let beta = constants.smoothness;
    let gamma = constants.strong_convexity;
    // relative slack so that eta = 1/beta computed elsewhere still qualifies
    let tol = 1.0 + 1e-12;
    if gamma > 0.0 && eta * beta <= tol {
        Ok((1.0 - eta * gamma).max(0.0))
    } else if eta * beta <= 2.0 * tol {
        Ok(1.0)
    } else {
        Err(Error::param(
            "eta",
            format!("step {eta} exceeds 2/beta = {}; the update is not non-expansive", 2.0 / beta),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    LastIterate,
    UniformAverage,
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::LastIterate => "last",
            Averaging::UniformAverage => "average",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub passes: usize,
    pub batch_size: usize,
    /// Projection radius; `None` is unconstrained.
    pub radius: Option<f64>,
    pub averaging: Averaging,
    pub fresh_permutation_per_pass: bool,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            passes: 1,
            batch_size: 1,
            radius: None,
            averaging: Averaging::UniformAverage,
            fresh_permutation_per_pass: false,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.passes < 1 {
            return Err(Error::param("passes", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if m == 0 {
            return Err(Error::param("dataset", "empty"));
        }
        if self.batch_size > m {
            return Err(Error::param(
                "batch_size",
                format!("{} exceeds the number of examples {m}", self.batch_size),
            ));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::param("radius", format!("{r} must be finite and > 0")));
            }
        }
        Ok(())
    }

    /// Updates per pass: `⌊m/b⌋`.
    pub fn updates_per_pass(&self, m: usize) -> usize {
        m / self.batch_size
    }

    pub fn total_updates(&self, m: usize) -> usize {
        self.passes * self.updates_per_pass(m)
    }

    /// Visiting order of each pass. The first pass always uses
    /// `sample_permutation(m, seed)`; with fresh permutations later passes
    /// continue the same generator.
    pub fn pass_orders(&self, m: usize) -> Result<Vec<Permutation>> {
        let mut rng = rng::seeded(self.seed, Stream::Permutation);
        let first = Permutation::from_rng(m, self.seed, &mut rng)?;
        if !self.fresh_permutation_per_pass {
            return Ok(vec![first; self.passes]);
        }
        let mut orders = vec![first];
        for _ in 1..self.passes {
            orders.push(Permutation::from_rng(m, self.seed, &mut rng)?);
        }
        Ok(orders)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdResult {
    /// Last iterate `w_T`.
    pub w: Vec<f64>,
    /// Uniform average `(1/T) Σ w_t`.
    pub w_avg: Vec<f64>,
    pub iterations: usize,
    pub step_sizes: Vec<f64>,
    /// Largest `‖w_t‖` over the run.
    pub max_iterate_norm: f64,
}

impl SgdResult {
    pub fn released(&self, averaging: Averaging) -> &[f64] {
        match averaging {
            Averaging::LastIterate => &self.w,
            Averaging::UniformAverage => &self.w_avg,
        }
    }
}

/// Euclidean projection onto the ball of radius `radius` (identity when `None`).
pub fn project(w: &mut [f64], radius: Option<f64>) {
    if let Some(r) = radius {
        let n = linalg::norm(w);
        if n > r {
            linalg::scale(r / n, w);
            // keep the result inside the closed ball despite rounding
            while linalg::norm(w) > r {
                linalg::scale(1.0 - f64::EPSILON, w);
            }
        }
    }
}

/// `Σ α_t w_t` accumulated one iterate at a time.
#[derive(Debug, Clone)]
pub struct RunningAverage {
    sum: Vec<f64>,
    total_weight: f64,
}

impl RunningAverage {
    pub fn new(dim: usize) -> Self {
        RunningAverage {
            sum: vec![0.0; dim],
            total_weight: 0.0,
        }
    }

    pub fn push(&mut self, w: &[f64], weight: f64) {
        linalg::axpy(weight, w, &mut self.sum);
        self.total_weight += weight;
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn finish(self) -> Vec<f64> {
        self.sum
    }
}

/// Weighted combination `Σ α_t w_t` of a sequence of iterates.
pub fn average_models<'a, I>(iterates: I, dim: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (&'a [f64], f64)>,
{
    let mut acc = RunningAverage::new(dim);
    for (w, alpha) in iterates {
        if w.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: w.len(),
                context: Some("iterate".into()),
            });
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::param("alpha", format!("weight {alpha} must be finite and ≥ 0")));
        }
        acc.push(w, alpha);
    }
    Ok(acc.finish())
}

/// One single-example gradient update `G(w) = w − η ∇ℓ(w; ex)`.
pub fn gradient_step<L: Loss + ?Sized>(loss: &L, w: &[f64], ex: &Example, eta: f64) -> Vec<f64> {
    let mut out = w.to_vec();
    loss.accumulate_gradient(w, ex, -eta, &mut out);
    out
}

/// Runs k-pass mini-batch PSGD from `w₀ = 0`.
///
/// Each pass visits the data in permutation order in consecutive batches of
/// `b` examples; the trailing `m mod b` examples of a pass are skipped. The
/// update counter `t` runs over all `T = k⌊m/b⌋` updates.
pub fn psgd_run<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    schedule: &StepSchedule,
    cfg: &SgdConfig,
) -> Result<SgdResult> {
    cfg.validate(ds.len())?;
    let orders = cfg.pass_orders(ds.len())?;
    psgd_with_orders(ds, loss, schedule, cfg, &orders)
}

/// [`psgd_run`] with explicit per-pass visiting orders (one per pass).
pub fn psgd_with_orders<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    schedule: &StepSchedule,
    cfg: &SgdConfig,
    orders: &[Permutation],
) -> Result<SgdResult> {
    psgd_perturbed(ds, loss, schedule, cfg, orders, |_, _| Ok(()))
}

/// PSGD where `perturb(t, g)` may modify the batch-average gradient `g` of
/// update `t` before the step is taken.
pub fn psgd_perturbed<L, F>(
    ds: &Dataset,
    loss: &L,
    schedule: &StepSchedule,
    cfg: &SgdConfig,
    orders: &[Permutation],
    mut perturb: F,
) -> Result<SgdResult>
where
    L: Loss + ?Sized,
    F: FnMut(usize, &mut [f64]) -> Result<()>,
{
    let m = ds.len();
    cfg.validate(m)?;
    let constants = loss.constants();
    schedule.validate(&constants)?;
    if orders.len() != cfg.passes || orders.iter().any(|p| p.len() != m) {
        return Err(Error::param("orders", "need one permutation of 0..m per pass"));
    }

    let d = ds.dim();
    let b = cfg.batch_size;
    let per_pass = cfg.updates_per_pass(m);
    let total = cfg.passes * per_pass;
    let mut w = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut avg = RunningAverage::new(d);
    let mut step_sizes = Vec::with_capacity(total);
    let mut max_norm: f64 = 0.0;
    let inv_b = 1.0 / b as f64;
    let step = schedule.step_fn(m, &constants);

    let mut t = 0;
    for order in orders {
        for batch in order.mapping().chunks_exact(b) {
            t += 1;
            let eta = step(t);
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                loss.accumulate_gradient(&w, ds.get(i), inv_b, &mut grad);
            }
            perturb(t, &mut grad)?;
            linalg::axpy(-eta, &grad, &mut w);
            project(&mut w, cfg.radius);
            avg.push(&w, 1.0);
            max_norm = max_norm.max(linalg::norm(&w));
            step_sizes.push(eta);
        }
    }
    debug_assert_eq!(t, total);

    let mut w_avg = avg.finish();
    linalg::scale(1.0 / total as f64, &mut w_avg);
    Ok(SgdResult {
        w,
        w_avg,
        iterations: total,
        step_sizes,
        max_iterate_norm: max_norm,
    })
}

/// Full-batch accelerated projected gradient descent on the empirical risk,
/// used as a reference minimizer.
pub fn minimize_full_batch<L: Loss + ?Sized>(
    ds: &Dataset,
    loss: &L,
    radius: Option<f64>,
    iterations: usize,
) -> Vec<f64> {
    let d = ds.dim();
    let step = 1.0 / loss.constants().smoothness;
    let inv_m = 1.0 / ds.len() as f64;
    let mut x = vec![0.0; d];
    let mut y = x.clone();
    let mut theta: f64 = 1.0;
    let mut grad = vec![0.0; d];
    for _ in 0..iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for ex in ds.iter() {
            loss.accumulate_gradient(&y, ex, inv_m, &mut grad);
        }
        let mut next = y.clone();
        linalg::axpy(-step, &grad, &mut next);
        project(&mut next, radius);
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let momentum = (theta - 1.0) / theta_next;
        for i in 0..d {
            y[i] = next[i] + momentum * (next[i] - x[i]);
        }
        project(&mut y, radius);
        x = next;
        theta = theta_next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossModel;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn consts(l: f64, beta: f64, gamma: f64) -> LossConstants {
        LossConstants::new(l, beta, gamma).unwrap()
    }

    #[test]
    fn step_size_examples() {
        let c = consts(1.0, 1.0, 0.0);
        assert_eq!(StepSchedule::Constant { eta: 0.1 }.step_size(7, 10, &c).unwrap(), 0.1);
        let v = StepSchedule::ConvexDecreasing { c: 0.5 }.step_size(1, 100, &c).unwrap();
        assert_abs_diff_eq!(v, 2.0 / 11.0, epsilon = 1e-15);
        let sc = consts(1.0, 1.0, 0.01);
        assert_eq!(StepSchedule::StronglyConvexDecreasing.step_size(50, 10, &sc).unwrap(), 1.0);
        assert_abs_diff_eq!(
            StepSchedule::StronglyConvexDecreasing.step_size(200, 10, &sc).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn schedule_validation() {
        let c = consts(1.0, 1.0, 0.0);
        assert!(StepSchedule::Constant { eta: 2.5 }.validate(&c).is_err());
        assert!(StepSchedule::Constant { eta: 2.0 }.validate(&c).is_ok());
        assert!(StepSchedule::Constant { eta: 1.5 }.validate(&consts(1.0, 1.0, 0.1)).is_err());
        assert!(StepSchedule::ConvexSqrt { c: 1.0 }.validate(&c).is_err());
        assert!(StepSchedule::StronglyConvexDecreasing.validate(&c).is_err());
        assert!(StepSchedule::Constant { eta: 0.1 }.step_size(0, 10, &c).is_err());
    }

    #[test]
    fn projection_examples() {
        let mut w = vec![0.3, 0.4];
        project(&mut w, Some(1.0));
        assert_eq!(w, vec![0.3, 0.4]);
        let mut w = vec![3.0, 4.0];
        project(&mut w, Some(1.0));
        assert_abs_diff_eq!(w[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.8, epsilon = 1e-15);
        let again = {
            let mut v = w.clone();
            project(&mut v, Some(1.0));
            v
        };
        assert_eq!(again, w);
        let mut w = vec![30.0, 40.0];
        project(&mut w, None);
        assert_eq!(w, vec![30.0, 40.0]);
    }

    #[test]
    fn averaging_examples() {
        let w1 = [1.0, 5.0];
        let w2 = [2.0, 6.0];
        let a = average_models([(&w1[..], 1.0), (&w2[..], 0.0)], 2).unwrap();
        assert_eq!(a, vec![1.0, 5.0]);
        let s = [[1.0], [2.0], [3.0]];
        let a = average_models(s.iter().map(|w| (&w[..], 1.0 / 3.0)), 1).unwrap();
        assert_abs_diff_eq!(a[0], 2.0, epsilon = 1e-15);
        let same = [[0.25, -0.5]; 4];
        let a = average_models(same.iter().map(|w| (&w[..], 0.25)), 2).unwrap();
        assert_eq!(a, vec![0.25, -0.5]);
        assert!(average_models([(&w1[..], -1.0)], 2).is_err());
    }

    struct ZeroLoss;

    impl Loss for ZeroLoss {
        fn value(&self, _: &[f64], _: &Example) -> f64 {
            0.0
        }
        fn accumulate_gradient(&self, _: &[f64], _: &Example, _: f64, _: &mut [f64]) {}
        fn constants(&self) -> LossConstants {
            LossConstants::new(0.0, 1.0, 0.0).unwrap()
        }
    }

    fn tiny(rows: &[(&[f64], f64)]) -> Dataset {
        Dataset::new(rows.iter().map(|(x, y)| Example::new(x.to_vec(), *y).unwrap()).collect()).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_origin() {
        let ds = tiny(&[(&[0.5, 0.1], 1.0), (&[-0.2, 0.3], -1.0), (&[0.0, 1.0], 1.0)]);
        let cfg = SgdConfig {
            passes: 4,
            ..Default::default()
        };
        let r = psgd_run(&ds, &ZeroLoss, &StepSchedule::Constant { eta: 1.0 }, &cfg).unwrap();
        assert_eq!(r.w, vec![0.0, 0.0]);
        assert_eq!(r.w_avg, vec![0.0, 0.0]);
        assert_eq!(r.iterations, 12);
    }

    #[test]
    fn two_step_unroll() {
        // m = 2, d = 1, b = 1, k = 1, logistic λ = 0, η = 0.5.
        let ds = tiny(&[(&[0.8], 1.0), (&[-0.6], 1.0)]);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let cfg = SgdConfig {
            seed: 17,
            averaging: Averaging::LastIterate,
            ..Default::default()
        };
        let eta = 0.5;
        let r = psgd_run(&ds, &loss, &StepSchedule::Constant { eta }, &cfg).unwrap();

        // scalar unroll: w <- w + η y x / (1 + exp(y w x))
        let order = crate::data::sample_permutation(2, 17).unwrap();
        let pts = [(0.8_f64, 1.0_f64), (-0.6, 1.0)];
        let mut w = 0.0_f64;
        let mut sum = 0.0;
        for &i in order.mapping() {
            let (x, y) = pts[i];
            w += eta * y * x / (1.0 + (y * w * x).exp());
            sum += w;
        }
        assert_abs_diff_eq!(r.w[0], w, epsilon = 1e-15);
        assert_abs_diff_eq!(r.w_avg[0], sum / 2.0, epsilon = 1e-15);
        assert_eq!(r.step_sizes, vec![0.5, 0.5]);
    }

    #[test]
    fn batch_remainder_dropped_and_errors() {
        let ds = tiny(&[(&[0.1], 1.0), (&[0.2], -1.0), (&[0.3], 1.0), (&[0.4], -1.0), (&[0.5], 1.0)]);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let cfg = SgdConfig {
            passes: 3,
            batch_size: 2,
            ..Default::default()
        };
        let r = psgd_run(&ds, &loss, &StepSchedule::Constant { eta: 1.0 }, &cfg).unwrap();
        assert_eq!(r.iterations, 6);
        let bad = SgdConfig {
            batch_size: 6,
            ..cfg.clone()
        };
        assert!(psgd_run(&ds, &loss, &StepSchedule::Constant { eta: 1.0 }, &bad).is_err());
        let bad = SgdConfig { passes: 0, ..cfg };
        assert!(psgd_run(&ds, &loss, &StepSchedule::Constant { eta: 1.0 }, &bad).is_err());
    }

    #[test]
    fn deterministic_and_fresh_orders_differ() {
        let ds = tiny(&[
            (&[0.1, 0.2], 1.0),
            (&[0.2, -0.4], -1.0),
            (&[0.3, 0.1], 1.0),
            (&[-0.4, 0.0], -1.0),
            (&[0.5, 0.5], 1.0),
            (&[0.0, -0.9], -1.0),
        ]);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let s = StepSchedule::ConvexDecreasing { c: 0.5 };
        let cfg = SgdConfig {
            passes: 3,
            seed: 5,
            ..Default::default()
        };
        assert_eq!(psgd_run(&ds, &loss, &s, &cfg).unwrap(), psgd_run(&ds, &loss, &s, &cfg).unwrap());
        let fresh = SgdConfig {
            fresh_permutation_per_pass: true,
            ..cfg.clone()
        };
        let orders = fresh.pass_orders(6).unwrap();
        assert_eq!(orders[0], cfg.pass_orders(6).unwrap()[0]);
        assert!(orders.iter().skip(1).any(|o| o != &orders[0]));
    }

    #[test]
    fn projected_iterates_stay_in_ball() {
        let ds = tiny(&[(&[1.0, 0.0], 1.0), (&[0.0, 1.0], 1.0), (&[0.6, 0.8], -1.0)]);
        let loss = LossModel::logistic(0.0, None).unwrap();
        let cfg = SgdConfig {
            passes: 50,
            radius: Some(0.3),
            ..Default::default()
        };
        let r = psgd_run(&ds, &loss, &StepSchedule::Constant { eta: 2.0 }, &cfg).unwrap();
        assert!(r.max_iterate_norm <= 0.3 + 1e-12);
        assert!(linalg::norm(&r.w_avg) <= 0.3 + 1e-12);
    }

    #[test]
    fn full_batch_minimizer_reaches_stationarity() {
        let ds = tiny(&[(&[0.9, 0.1], 1.0), (&[-0.2, 0.7], -1.0), (&[0.4, 0.4], 1.0), (&[0.1, -0.8], -1.0)]);
        let loss = LossModel::logistic(0.1, Some(10.0)).unwrap();
        let w = minimize_full_batch(&ds, &loss, Some(10.0), 3000);
        let mut g = vec![0.0; 2];
        for ex in ds.iter() {
            loss.accumulate_gradient(&w, ex, 0.25, &mut g);
        }
        assert!(linalg::norm(&g) < 1e-8, "{g:?}");
    }

    proptest! {
        #[test]
        fn projection_is_nonexpansive(
            u in prop::collection::vec(-10.0f64..10.0, 3),
            v in prop::collection::vec(-10.0f64..10.0, 3),
            r in 0.1f64..5.0,
        ) {
            let (mut pu, mut pv) = (u.clone(), v.clone());
            project(&mut pu, Some(r));
            project(&mut pv, Some(r));
            prop_assert!(linalg::distance(&pu, &pv) <= linalg::distance(&u, &v) + 1e-12);
            prop_assert!(linalg::norm(&pu) <= r + 1e-12);
        }
    }
}
