//! Output-perturbation noise.
//!
//! `sample_laplace_ball` draws from the density `∝ exp(−ε‖κ‖/Δ₂)` on `R^d`:
//! a direction uniform on the unit sphere scaled by a `Gamma(d, Δ₂/ε)`
//! magnitude. `sample_gaussian` draws i.i.d. `N(0, σ²)` coordinates with
//! `σ = c·Δ₂/ε`, `c² > 2 ln(1.25/δ)`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// `(ε, δ)`; `δ = 0` is pure ε-DP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("{epsilon} must be finite and > 0")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::param("delta", format!("{delta} not in [0, 1)")));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    pub fn pure(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, 0.0)
    }

    pub fn is_pure(&self) -> bool {
        self.delta == 0.0
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(ε={}, δ={})", self.epsilon, self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    LaplaceBall,
    Gaussian,
}

impl Mechanism {
    /// Gaussian noise when `δ > 0` and `ε < 1`, Laplace-ball noise otherwise.
    /// An ε-DP release is also (ε, δ)-DP, so the Laplace-ball mechanism
    /// covers budgets outside the Gaussian mechanism's range.
    pub fn for_budget(budget: &PrivacyBudget) -> Self {
        if budget.delta > 0.0 && budget.epsilon < 1.0 {
            Mechanism::Gaussian
        } else {
            Mechanism::LaplaceBall
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        d: usize,
        delta2: f64,
        budget: &PrivacyBudget,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match self {
            Mechanism::LaplaceBall => sample_laplace_ball(d, delta2, budget.epsilon, rng),
            Mechanism::Gaussian => sample_gaussian(d, delta2, budget.epsilon, budget.delta, rng),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::LaplaceBall => "laplace",
            Mechanism::Gaussian => "gaussian",
        })
    }
}

/// Uniform direction on the unit sphere in `R^d` (normalized Gaussian vector).
pub fn sample_unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = linalg::norm(&v);
        if n > 0.0 {
            linalg::scale(1.0 / n, &mut v);
            return v;
        }
    }
}

fn check_common(d: usize, delta2: f64) -> Result<()> {
    if d < 1 {
        return Err(Error::param("d", "dimension must be at least 1"));
    }
    if !(delta2 >= 0.0 && delta2.is_finite()) {
        return Err(Error::param("delta2", format!("{delta2} must be finite and ≥ 0")));
    }
    Ok(())
}

/// Noise with density `∝ exp(−ε‖κ‖/Δ₂)`. `Δ₂ = 0` yields the zero vector.
pub fn sample_laplace_ball<R: Rng + ?Sized>(d: usize, delta2: f64, epsilon: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_common(d, delta2)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", format!("{epsilon} must be finite and > 0")));
    }
    if delta2 == 0.0 {
        return Ok(vec![0.0; d]);
    }
    let magnitude = Gamma::new(d as f64, delta2 / epsilon)
        .map_err(|e| Error::param("delta2", e.to_string()))?
        .sample(rng);
    let mut kappa = sample_unit_sphere(d, rng);
    linalg::scale(magnitude, &mut kappa);
    Ok(kappa)
}

/// Per-coordinate standard deviation of the Gaussian mechanism.
pub fn gaussian_sigma(delta2: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::param("epsilon", format!("{epsilon} not in (0, 1) for the Gaussian mechanism")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", format!("{delta} not in (0, 1)")));
    }
    // c must strictly exceed sqrt(2 ln(1.25/δ))
    let c = (2.0 * (1.25 / delta).ln()).sqrt() * (1.0 + 1e-9);
    Ok(c * delta2 / epsilon)
}

/// Spherical Gaussian noise for (ε, δ)-DP with `ε ∈ (0, 1)`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    d: usize,
    delta2: f64,
    epsilon: f64,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_common(d, delta2)?;
    let sigma = gaussian_sigma(delta2, epsilon, delta)?;
    if delta2 == 0.0 {
        return Ok(vec![0.0; d]);
    }
    Ok((0..d)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Norm level exceeded with probability at most `failure` by Laplace-ball
/// noise: `d·ln(d/failure)·Δ₂/ε`.
pub fn laplace_ball_tail_bound(d: usize, delta2: f64, epsilon: f64, failure: f64) -> f64 {
    let d = d as f64;
    d * (d / failure).ln() * delta2 / epsilon
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    #[test]
    fn zero_sensitivity_gives_zero_noise() {
        let mut r = rng::seeded(1, Stream::OutputNoise);
        assert_eq!(sample_laplace_ball(4, 0.0, 1.0, &mut r).unwrap(), vec![0.0; 4]);
        assert_eq!(sample_gaussian(3, 0.0, 0.5, 1e-5, &mut r).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn invalid_parameters() {
        let mut r = rng::seeded(1, Stream::OutputNoise);
        assert!(sample_laplace_ball(4, 1.0, 0.0, &mut r).is_err());
        assert!(sample_laplace_ball(0, 1.0, 1.0, &mut r).is_err());
        assert!(sample_gaussian(2, 1.0, 1.0, 1e-5, &mut r).is_err());
        assert!(sample_gaussian(2, 1.0, 0.5, 0.0, &mut r).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_noise() {
        let a = sample_gaussian(5, 1.0, 0.5, 1e-6, &mut rng::seeded(9, Stream::OutputNoise)).unwrap();
        let b = sample_gaussian(5, 1.0, 0.5, 1e-6, &mut rng::seeded(9, Stream::OutputNoise)).unwrap();
        assert_eq!(a, b);
        let a = sample_laplace_ball(5, 1.0, 0.5, &mut rng::seeded(9, Stream::OutputNoise)).unwrap();
        let b = sample_laplace_ball(5, 1.0, 0.5, &mut rng::seeded(9, Stream::OutputNoise)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_sigma_value() {
        // sqrt(2 ln(1.25e6)) / 0.5
        let s = gaussian_sigma(1.0, 0.5, 1e-6).unwrap();
        assert!((s - 10.597605053700947).abs() < 1e-6, "{s}");
    }

    #[test]
    fn gaussian_sample_std() {
        let mut r = rng::seeded(3, Stream::OutputNoise);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_gaussian(1, 1.0, 0.5, 1e-6, &mut r).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma = gaussian_sigma(1.0, 0.5, 1e-6).unwrap();
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.02);
    }

    #[test]
    fn mechanism_choice() {
        assert_eq!(Mechanism::for_budget(&PrivacyBudget::pure(0.5).unwrap()), Mechanism::LaplaceBall);
        assert_eq!(Mechanism::for_budget(&PrivacyBudget::new(0.5, 1e-6).unwrap()), Mechanism::Gaussian);
        assert_eq!(Mechanism::for_budget(&PrivacyBudget::new(4.0, 1e-6).unwrap()), Mechanism::LaplaceBall);
    }

    #[test]
    fn sphere_samples_have_unit_norm() {
        let mut r = rng::seeded(5, Stream::OutputNoise);
        for d in 1..8 {
            let u = sample_unit_sphere(d, &mut r);
            assert!((linalg::norm(&u) - 1.0).abs() < 1e-12);
        }
    }
}
