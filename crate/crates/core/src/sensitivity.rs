//! L2-sensitivity bounds for k-pass mini-batch PSGD.
//!
//! Two routes are provided. The closed forms bound `sup_{S~S'} sup_τ ‖A(τ;S) − A(τ;S')‖`
//! for each step-size family. The recursion route unrolls the per-update
//! divergence recursion numerically: an update on a batch that does not
//! contain the differing example contracts the divergence by its expansiveness
//! factor `ρ_t`, and the update on the batch that does contain it adds at most
//! `2 η_t L / b`. Maximizing over the position of the differing example gives a
//! bound that is never larger than the matching closed form.
//!
//! With mini-batches of size `b` a pass has `n = ⌊m/b⌋` updates, so in the
//! closed forms below the per-pass period is `n` (which equals `m` when `b = 1`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConstants;
use crate::sgd::{expansion_factor, Averaging, StepSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ConvexConstant,
    ConvexDecreasing,
    ConvexSqrt,
    StronglyConvexConstant,
    StronglyConvexDecreasing,
    Recursion,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::ConvexConstant => "convex_constant",
            Provenance::ConvexDecreasing => "convex_decreasing",
            Provenance::ConvexSqrt => "convex_sqrt",
            Provenance::StronglyConvexConstant => "strongly_convex_constant",
            Provenance::StronglyConvexDecreasing => "strongly_convex_decreasing",
            Provenance::Recursion => "recursion",
        })
    }
}

/// Parameters a bound was computed for, echoed back for reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub passes: Option<usize>,
    pub m: Option<usize>,
    pub batch_size: usize,
    pub lipschitz: f64,
    pub smoothness: Option<f64>,
    pub strong_convexity: Option<f64>,
    pub eta: Option<f64>,
    pub c: Option<f64>,
    pub updates_per_pass: Option<usize>,
    pub schedule: Option<StepSchedule>,
    pub averaging: Option<Averaging>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBound {
    pub delta2: f64,
    pub provenance: Provenance,
    pub params: BoundParams,
}

impl SensitivityBound {
    /// Bound for a released combination `Σ α_t w_t` whose weights sum to `total_weight`.
    pub fn scaled_for_weights(mut self, total_weight: f64) -> Self {
        self.delta2 *= total_weight;
        self
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} must be finite and > 0")))
    }
}

fn non_negative(name: &'static str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("{v} must be finite and ≥ 0")))
    }
}

fn at_least_one(name: &'static str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::param(name, "must be at least 1"))
    }
}

fn check_c(c: f64) -> Result<()> {
    if (0.0..1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::param("c", format!("{c} not in [0, 1)")))
    }
}

fn per_pass(m: usize, b: usize) -> Result<usize> {
    at_least_one("m", m)?;
    at_least_one("b", b)?;
    if b > m {
        return Err(Error::param("b", format!("batch size {b} exceeds m = {m}")));
    }
    Ok(m / b)
}

/// Constant step, convex: `2kLη / b`.
pub fn sens_convex_constant(k: usize, lipschitz: f64, eta: f64, b: usize) -> Result<SensitivityBound> {
    at_least_one("k", k)?;
    at_least_one("b", b)?;
    non_negative("L", lipschitz)?;
    positive("eta", eta)?;
    Ok(SensitivityBound {
        delta2: 2.0 * k as f64 * lipschitz * eta / b as f64,
        provenance: Provenance::ConvexConstant,
        params: BoundParams {
            passes: Some(k),
            batch_size: b,
            lipschitz,
            eta: Some(eta),
            ..Default::default()
        },
    })
}

/// Decreasing step `2/(β(t+m^c))`, convex: `(4L/β)(1/m^c + ln k / n) / b`.
pub fn sens_convex_decreasing(
    k: usize,
    m: usize,
    c: f64,
    lipschitz: f64,
    beta: f64,
    b: usize,
) -> Result<SensitivityBound> {
    at_least_one("k", k)?;
    check_c(c)?;
    non_negative("L", lipschitz)?;
    positive("beta", beta)?;
    let n = per_pass(m, b)?;
    let mc = (m as f64).powf(c);
    let delta2 = 4.0 * lipschitz / beta * (1.0 / mc + (k as f64).ln() / n as f64) / b as f64;
    Ok(SensitivityBound {
        delta2,
        provenance: Provenance::ConvexDecreasing,
        params: BoundParams {
            passes: Some(k),
            m: Some(m),
            batch_size: b,
            lipschitz,
            smoothness: Some(beta),
            c: Some(c),
            updates_per_pass: Some(n),
            ..Default::default()
        },
    })
}

/// Square-root step `2/(β(√t+m^c))`, convex: `(4L/β) Σ_{j<k} 1/(√(jn+1) + m^c) / b`.
pub fn sens_convex_sqrt(
    k: usize,
    m: usize,
    c: f64,
    lipschitz: f64,
    beta: f64,
    b: usize,
) -> Result<SensitivityBound> {
    at_least_one("k", k)?;
    check_c(c)?;
    non_negative("L", lipschitz)?;
    positive("beta", beta)?;
    let n = per_pass(m, b)?;
    let mc = (m as f64).powf(c);
    let sum: f64 = (0..k).map(|j| 1.0 / (((j * n + 1) as f64).sqrt() + mc)).sum();
    Ok(SensitivityBound {
        delta2: 4.0 * lipschitz / beta * sum / b as f64,
        provenance: Provenance::ConvexSqrt,
        params: BoundParams {
            passes: Some(k),
            m: Some(m),
            batch_size: b,
            lipschitz,
            smoothness: Some(beta),
            c: Some(c),
            updates_per_pass: Some(n),
            ..Default::default()
        },
    })
}

/// Constant step, strongly convex: `(2ηL/b) / (1 − (1−ηγ)^n)` with `n` updates per pass.
pub fn sens_strongly_convex_constant(
    eta: f64,
    gamma: f64,
    lipschitz: f64,
    updates_per_pass: usize,
    b: usize,
) -> Result<SensitivityBound> {
    positive("eta", eta)?;
    positive("gamma", gamma)?;
    non_negative("L", lipschitz)?;
    at_least_one("updates_per_pass", updates_per_pass)?;
    at_least_one("b", b)?;
    if eta * gamma >= 1.0 {
        return Err(Error::param("eta", format!("eta * gamma = {} must be < 1", eta * gamma)));
    }
    let contraction = (1.0 - eta * gamma).powi(updates_per_pass as i32);
    Ok(SensitivityBound {
        delta2: 2.0 * eta * lipschitz / b as f64 / (1.0 - contraction),
        provenance: Provenance::StronglyConvexConstant,
        params: BoundParams {
            batch_size: b,
            lipschitz,
            strong_convexity: Some(gamma),
            eta: Some(eta),
            updates_per_pass: Some(updates_per_pass),
            ..Default::default()
        },
    })
}

/// Decreasing step `min(1/(γt), 1/β)`, strongly convex: `2L / (γ·b·⌊m/b⌋)`,
/// which is `2L/(γm)` whenever `b` divides `m`. Independent of the number of passes.
pub fn sens_strongly_convex_decreasing(lipschitz: f64, gamma: f64, m: usize, b: usize) -> Result<SensitivityBound> {
    non_negative("L", lipschitz)?;
    positive("gamma", gamma)?;
    let n = per_pass(m, b)?;
    Ok(SensitivityBound {
        delta2: 2.0 * lipschitz / (gamma * (b * n) as f64),
        provenance: Provenance::StronglyConvexDecreasing,
        params: BoundParams {
            m: Some(m),
            batch_size: b,
            lipschitz,
            strong_convexity: Some(gamma),
            updates_per_pass: Some(n),
            ..Default::default()
        },
    })
}

fn echo(
    schedule: &StepSchedule,
    m: usize,
    k: usize,
    b: usize,
    constants: &LossConstants,
    averaging: Averaging,
) -> BoundParams {
    let (eta, c) = match *schedule {
        StepSchedule::Constant { eta } => (Some(eta), None),
        StepSchedule::ConvexDecreasing { c } | StepSchedule::ConvexSqrt { c } => (None, Some(c)),
        StepSchedule::StronglyConvexDecreasing => (None, None),
    };
    BoundParams {
        passes: Some(k),
        m: Some(m),
        batch_size: b,
        lipschitz: constants.lipschitz,
        smoothness: Some(constants.smoothness),
        strong_convexity: Some(constants.strong_convexity),
        eta,
        c,
        updates_per_pass: Some(m / b.max(1)),
        schedule: Some(*schedule),
        averaging: Some(averaging),
    }
}

/// Worst-case contribution of the differing example to the released model if
/// it is met at update `t` (1-based), for every `t`.
///
/// The divergence recursion is linear in its additive terms, so a hit at `t`
/// contributes `(2η_t L/b)·Π_{s>t} ρ_s` to `δ_T`, and
/// `(2η_t L/b)·(1/T)Σ_{s≥t} Π_{t<u≤s} ρ_u` to the uniform average of `δ_1..δ_T`.
pub fn hit_contributions(
    schedule: &StepSchedule,
    m: usize,
    k: usize,
    b: usize,
    constants: &LossConstants,
    averaging: Averaging,
) -> Result<Vec<f64>> {
    at_least_one("k", k)?;
    let n = per_pass(m, b)?;
    schedule.validate(constants)?;
    let total = k * n;
    let etas: Vec<f64> = (1..=total).map(|t| schedule.eta(t, m, constants)).collect();
    let rhos = etas
        .iter()
        .map(|&eta| expansion_factor(eta, constants))
        .collect::<Result<Vec<_>>>()?;
    let lipschitz = constants.lipschitz;
    let inv_b = 1.0 / b as f64;

    // weight[t-1] = effect on the released model of unit divergence injected at update t
    let mut weight = vec![0.0; total];
    match averaging {
        Averaging::LastIterate => {
            let mut carry = 1.0;
            for t in (1..=total).rev() {
                weight[t - 1] = carry;
                carry *= rhos[t - 1];
            }
        }
        Averaging::UniformAverage => {
            let mut acc = 0.0;
            for t in (1..=total).rev() {
                // A(t) = 1 + ρ_{t+1} A(t+1)
                acc = if t == total { 1.0 } else { 1.0 + rhos[t] * acc };
                weight[t - 1] = acc / total as f64;
            }
        }
    }
    Ok(etas
        .iter()
        .zip(&weight)
        .map(|(eta, w)| 2.0 * eta * lipschitz * inv_b * w)
        .collect())
}

/// Numerical unrolling of the divergence recursion over all `T = k⌊m/b⌋` updates.
///
/// With a single permutation the differing example sits at the same batch
/// position `i*` in every pass and the result is the maximum over `i*`. With a
/// fresh permutation per pass the position may change between passes and the
/// per-pass maxima are summed instead.
pub fn sens_recursion(
    schedule: &StepSchedule,
    m: usize,
    k: usize,
    b: usize,
    constants: &LossConstants,
    averaging: Averaging,
    fresh_per_pass: bool,
) -> Result<SensitivityBound> {
    at_least_one("k", k)?;
    let n = per_pass(m, b)?;
    schedule.validate(constants)?;
    let total = k * n;
    let step = schedule.step_fn(m, constants);
    let scale = 2.0 * constants.lipschitz / b as f64;
    let inv_total = 1.0 / total as f64;

    // Single backward sweep over t = T..1 computing the same contributions as
    // `hit_contributions` without materializing them.
    let mut per_position = if fresh_per_pass { Vec::new() } else { vec![0.0; n] };
    let mut fresh_sum = 0.0;
    let mut carry = 1.0; // Π_{s>t} ρ_s
    let mut acc = 0.0; // A(t)
    let mut rho_next = 1.0;
    for j in (0..k).rev() {
        let mut pass_max: f64 = 0.0;
        for i in (0..n).rev() {
            let t = j * n + i + 1;
            let eta = step(t);
            let rho = expansion_factor(eta, constants)?;
            let weight = match averaging {
                Averaging::LastIterate => {
                    let w = carry;
                    carry *= rho;
                    w
                }
                Averaging::UniformAverage => {
                    acc = if t == total { 1.0 } else { 1.0 + rho_next * acc };
                    rho_next = rho;
                    acc * inv_total
                }
            };
            let c = scale * eta * weight;
            if fresh_per_pass {
                pass_max = pass_max.max(c);
            } else {
                per_position[i] += c;
            }
        }
        fresh_sum += pass_max;
    }
    let delta2 = if fresh_per_pass {
        fresh_sum
    } else {
        per_position.into_iter().fold(0.0, f64::max)
    };
    Ok(SensitivityBound {
        delta2,
        provenance: Provenance::Recursion,
        params: echo(schedule, m, k, b, constants, averaging),
    })
}

/// The tightest applicable closed-form bound for a schedule.
///
/// A constant step on a strongly convex loss admits both the convex and the
/// strongly convex constant-step forms; the smaller is returned. The strongly
/// convex decreasing-step form bounds only the last iterate, so it is
/// unavailable with uniform averaging.
pub fn closed_form(
    schedule: &StepSchedule,
    m: usize,
    k: usize,
    b: usize,
    constants: &LossConstants,
    averaging: Averaging,
) -> Result<SensitivityBound> {
    schedule.validate(constants)?;
    let n = per_pass(m, b)?;
    let l = constants.lipschitz;
    let beta = constants.smoothness;
    let gamma = constants.strong_convexity;
    let mut bound = match *schedule {
        StepSchedule::Constant { eta } => {
            let convex = sens_convex_constant(k, l, eta, b)?;
            if gamma > 0.0 {
                let strong = sens_strongly_convex_constant(eta, gamma, l, n, b)?;
                if strong.delta2 < convex.delta2 {
                    strong
                } else {
                    convex
                }
            } else {
                convex
            }
        }
        StepSchedule::ConvexDecreasing { c } => sens_convex_decreasing(k, m, c, l, beta, b)?,
        StepSchedule::ConvexSqrt { c } => sens_convex_sqrt(k, m, c, l, beta, b)?,
        StepSchedule::StronglyConvexDecreasing => {
            if averaging == Averaging::UniformAverage {
                return Err(Error::param(
                    "averaging",
                    "no closed form bounds the averaged model under strongly convex decreasing steps; use the recursion",
                ));
            }
            sens_strongly_convex_decreasing(l, gamma, m, b)?
        }
    };
    let provenance = bound.provenance;
    bound.params = echo(schedule, m, k, b, constants, averaging);
    bound.provenance = provenance;
    Ok(bound)
}
