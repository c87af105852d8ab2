//! Per-example losses for linear classifiers, with the Lipschitz, smoothness
//! and strong-convexity constants that calibrate the sensitivity bounds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::linalg;

/// Lipschitz (`lipschitz`), smoothness (`smoothness`) and strong-convexity
/// (`strong_convexity`) constants of a loss over its hypothesis set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    pub lipschitz: f64,
    pub smoothness: f64,
    pub strong_convexity: f64,
}

impl LossConstants {
    pub fn new(lipschitz: f64, smoothness: f64, strong_convexity: f64) -> Result<Self> {
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::param("L", format!("{lipschitz} must be finite and ≥ 0")));
        }
        if !(smoothness > 0.0 && smoothness.is_finite()) {
            return Err(Error::param("beta", format!("{smoothness} must be finite and > 0")));
        }
        if !(strong_convexity >= 0.0 && strong_convexity <= smoothness) {
            return Err(Error::param(
                "gamma",
                format!("{strong_convexity} must lie in [0, beta = {smoothness}]"),
            ));
        }
        Ok(LossConstants {
            lipschitz,
            smoothness,
            strong_convexity,
        })
    }

    pub fn is_strongly_convex(&self) -> bool {
        self.strong_convexity > 0.0
    }
}

/// A differentiable per-example loss usable by the SGD engine.
///
/// The hot-path methods do not check dimensions; callers validate once per run.
pub trait Loss: Send + Sync {
    fn value(&self, w: &[f64], ex: &Example) -> f64;

    /// `out += scale * ∇ℓ(w; ex)`
    fn accumulate_gradient(&self, w: &[f64], ex: &Example, scale: f64, out: &mut [f64]);

    fn constants(&self) -> LossConstants;

    /// Norm bound on hypotheses the constants were certified for.
    fn radius(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    HuberSvm { h: f64 },
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Logistic => write!(f, "logistic"),
            LossKind::HuberSvm { h } => write!(f, "huber(h={h})"),
        }
    }
}

/// Logistic or Huber-SVM loss with an L2 regularizer `(λ/2)‖w‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    kind: LossKind,
    lambda: f64,
    radius: Option<f64>,
}

impl LossModel {
    pub fn new(kind: LossKind, lambda: f64, radius: Option<f64>) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::param("lambda", format!("{lambda} must be finite and ≥ 0")));
        }
        if let LossKind::HuberSvm { h } = kind {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::param("h", format!("{h} must be finite and > 0")));
            }
        }
        if let Some(r) = radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::param("radius", format!("{r} must be finite and > 0")));
            }
        }
        if lambda > 0.0 && radius.is_none() {
            return Err(Error::param(
                "radius",
                "a regularized loss needs a finite hypothesis radius to bound its constants",
            ));
        }
        Ok(LossModel { kind, lambda, radius })
    }

    pub fn logistic(lambda: f64, radius: Option<f64>) -> Result<Self> {
        Self::new(LossKind::Logistic, lambda, radius)
    }

    pub fn huber(h: f64, lambda: f64, radius: Option<f64>) -> Result<Self> {
        Self::new(LossKind::HuberSvm { h }, lambda, radius)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Same loss with a different regularization weight, keeping the radius
    /// (or defaulting it to `1/λ` when none was set).
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let radius = match self.radius {
            None if lambda > 0.0 => Some(1.0 / lambda),
            r => r,
        };
        Self::new(self.kind, lambda, radius)
    }

    fn check_dims(w: &[f64], ex: &Example) -> Result<()> {
        if w.len() != ex.dim() {
            return Err(Error::Dimension {
                expected: ex.dim(),
                found: w.len(),
                context: Some("model vector vs example".into()),
            });
        }
        Ok(())
    }

    pub fn loss_value(&self, w: &[f64], ex: &Example) -> Result<f64> {
        Self::check_dims(w, ex)?;
        Ok(self.value(w, ex))
    }

    pub fn loss_gradient(&self, w: &[f64], ex: &Example) -> Result<Vec<f64>> {
        Self::check_dims(w, ex)?;
        let mut g = vec![0.0; w.len()];
        self.accumulate_gradient(w, ex, 1.0, &mut g);
        Ok(g)
    }

    /// Derivative of the unregularized loss with respect to the margin `z = y⟨w,x⟩`.
    fn margin_derivative(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => -sigmoid(-z),
            LossKind::HuberSvm { h } => {
                if z > 1.0 + h {
                    0.0
                } else if z < 1.0 - h {
                    -1.0
                } else {
                    -(1.0 + h - z) / (2.0 * h)
                }
            }
        }
    }

    fn margin_loss(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => softplus(-z),
            LossKind::HuberSvm { h } => {
                if z > 1.0 + h {
                    0.0
                } else if z < 1.0 - h {
                    1.0 - z
                } else {
                    (1.0 + h - z).powi(2) / (4.0 * h)
                }
            }
        }
    }
}

impl Loss for LossModel {
    fn value(&self, w: &[f64], ex: &Example) -> f64 {
        let z = ex.y() * linalg::dot(w, ex.x());
        self.margin_loss(z) + 0.5 * self.lambda * linalg::dot(w, w)
    }

    fn accumulate_gradient(&self, w: &[f64], ex: &Example, scale: f64, out: &mut [f64]) {
        let z = ex.y() * linalg::dot(w, ex.x());
        let g = self.margin_derivative(z);
        if g != 0.0 {
            linalg::axpy(scale * g * ex.y(), ex.x(), out);
        }
        if self.lambda != 0.0 {
            linalg::axpy(scale * self.lambda, w, out);
        }
    }

    fn constants(&self) -> LossConstants {
        let reg_l = self.radius.map_or(0.0, |r| self.lambda * r);
        let base_beta = match self.kind {
            LossKind::Logistic => 1.0,
            LossKind::HuberSvm { h } => 1.0 / (2.0 * h),
        };
        LossConstants {
            lipschitz: 1.0 + reg_l,
            smoothness: base_beta + self.lambda,
            strong_convexity: self.lambda,
        }
    }

    fn radius(&self) -> Option<f64> {
        self.radius
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Mean loss over the dataset.
pub fn empirical_risk<L: Loss + ?Sized>(loss: &L, w: &[f64], ds: &Dataset) -> f64 {
    ds.iter().map(|ex| loss.value(w, ex)).sum::<f64>() / ds.len() as f64
}

/// Number of examples with `sign(⟨w,x⟩) ≠ y`, where a zero score predicts +1.
pub fn misclassified(w: &[f64], ds: &Dataset) -> usize {
    ds.iter()
        .filter(|ex| {
            let pred = if linalg::dot(w, ex.x()) >= 0.0 { 1.0 } else { -1.0 };
            pred != ex.y()
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn ex(x: &[f64], y: f64) -> Example {
        Example::new(x.to_vec(), y).unwrap()
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let m = LossModel::logistic(0.0, None).unwrap();
        let v = m.loss_value(&[0.0, 0.0], &ex(&[0.3, -0.2], -1.0)).unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-15);
        let g = m.loss_gradient(&[0.0, 0.0], &ex(&[1.0, 0.0], 1.0)).unwrap();
        assert_eq!(g, vec![-0.5, 0.0]);
    }

    #[test]
    fn huber_branches() {
        let m = LossModel::huber(0.1, 0.0, None).unwrap();
        // z = y<w,x> with x = (1), y = 1
        assert_eq!(m.loss_value(&[2.0], &ex(&[1.0], 1.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(m.loss_value(&[1.0], &ex(&[1.0], 1.0)).unwrap(), 0.025, epsilon = 1e-15);
        assert_abs_diff_eq!(m.loss_value(&[0.5], &ex(&[1.0], 1.0)).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(m.loss_gradient(&[2.0], &ex(&[1.0], 1.0)).unwrap(), vec![0.0]);
    }

    #[test]
    fn huber_is_continuous_at_boundaries() {
        let m = LossModel::huber(0.1, 0.0, None).unwrap();
        for z in [0.9, 1.1] {
            let below = m.margin_loss(z - 1e-12);
            let above = m.margin_loss(z + 1e-12);
            assert!((below - above).abs() < 1e-10);
            let db = m.margin_derivative(z - 1e-12);
            let da = m.margin_derivative(z + 1e-12);
            assert!((db - da).abs() < 1e-9);
        }
    }

    #[test]
    fn constants_table() {
        let c = LossModel::logistic(0.0, None).unwrap().constants();
        assert_eq!((c.lipschitz, c.smoothness, c.strong_convexity), (1.0, 1.0, 0.0));
        let c = LossModel::logistic(0.01, Some(100.0)).unwrap().constants();
        assert_abs_diff_eq!(c.lipschitz, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.smoothness, 1.01, epsilon = 1e-15);
        assert_eq!(c.strong_convexity, 0.01);
        let c = LossModel::huber(0.1, 0.0, None).unwrap().constants();
        assert_eq!((c.lipschitz, c.smoothness, c.strong_convexity), (1.0, 5.0, 0.0));
        let c = LossModel::huber(0.1, 0.01, Some(100.0)).unwrap().constants();
        assert_abs_diff_eq!(c.smoothness, 5.01, epsilon = 1e-12);
    }

    #[test]
    fn invalid_models() {
        assert!(LossModel::logistic(0.01, None).is_err());
        assert!(LossModel::logistic(-1.0, None).is_err());
        assert!(LossModel::huber(0.0, 0.0, None).is_err());
        assert!(LossModel::logistic(0.0, Some(0.0)).is_err());
        let m = LossModel::logistic(0.0, None).unwrap();
        assert!(matches!(
            m.loss_value(&[0.0], &ex(&[1.0, 2.0], 1.0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn stable_for_large_margins() {
        let m = LossModel::logistic(0.0, None).unwrap();
        let v = m.loss_value(&[1000.0], &ex(&[1.0], -1.0)).unwrap();
        assert_abs_diff_eq!(v, 1000.0, epsilon = 1e-9);
        let v = m.loss_value(&[1000.0], &ex(&[1.0], 1.0)).unwrap();
        assert!((0.0..1e-300).contains(&v));
    }

    fn models() -> Vec<LossModel> {
        vec![
            LossModel::logistic(0.0, Some(5.0)).unwrap(),
            LossModel::logistic(0.01, Some(5.0)).unwrap(),
            LossModel::huber(0.1, 0.0, Some(5.0)).unwrap(),
            LossModel::huber(0.1, 0.01, Some(5.0)).unwrap(),
        ]
    }

    fn random_unit_ball<R: Rng>(rng: &mut R, d: usize, r: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = linalg::norm(&v).max(1e-12);
        let s = r * rng.random::<f64>() / n;
        v.iter().map(|x| x * s).collect()
    }

    #[test]
    fn certificates_on_random_pairs() {
        let mut rng = rng::seeded(7, Stream::Oracle);
        for m in models() {
            let c = m.constants();
            let r = m.radius().unwrap();
            for _ in 0..2000 {
                let d = 4;
                let x = random_unit_ball(&mut rng, d, 1.0);
                let e = ex(&x, if rng.random::<bool>() { 1.0 } else { -1.0 });
                let u = random_unit_ball(&mut rng, d, r);
                let v = random_unit_ball(&mut rng, d, r);
                let gu = m.loss_gradient(&u, &e).unwrap();
                let gv = m.loss_gradient(&v, &e).unwrap();
                assert!(linalg::norm(&gu) <= c.lipschitz + 1e-9);
                assert!(linalg::distance(&gu, &gv) <= c.smoothness * linalg::distance(&u, &v) + 1e-9);
                let diff: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
                let lower = m.value(&v, &e)
                    + linalg::dot(&gv, &diff)
                    + 0.5 * c.strong_convexity * linalg::dot(&diff, &diff);
                assert!(m.value(&u, &e) >= lower - 1e-9);
            }
        }
    }
}
