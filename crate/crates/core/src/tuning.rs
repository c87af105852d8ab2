//! Hyperparameter selection.
//!
//! Private tuning splits the data into `|grid| + 1` disjoint chunks, trains
//! candidate `j` on chunk `j` with the training budget, counts each model's
//! errors on the last chunk and picks one with the exponential mechanism.
//! Disjointness keeps the total cost at `(ε_train + ε_tune, δ_train)`.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineRun;
use crate::data::{train_test_split, Dataset};
use crate::error::{Error, Result};
use crate::losses::misclassified;
use crate::noise::PrivacyBudget;
use crate::private_sgd::PrivateRunReport;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub passes: usize,
    pub lambda: f64,
    pub eta: Option<f64>,
    pub batch: Option<usize>,
}

impl Candidate {
    pub fn new(passes: usize, lambda: f64) -> Self {
        Candidate {
            passes,
            lambda,
            eta: None,
            batch: None,
        }
    }

    /// Lexicographic order on `(passes, lambda, eta, batch)`; unset fields sort first.
    pub fn lexical_cmp(&self, other: &Self) -> Ordering {
        fn opt_f(a: Option<f64>, b: Option<f64>) -> Ordering {
            match (a, b) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                (a, b) => a.is_some().cmp(&b.is_some()),
            }
        }
        self.passes
            .cmp(&other.passes)
            .then(self.lambda.total_cmp(&other.lambda))
            .then(opt_f(self.eta, other.eta))
            .then(self.batch.cmp(&other.batch))
    }
}

/// Cross product of pass counts and regularization weights, in that order.
pub fn grid(passes: &[usize], lambdas: &[f64]) -> Vec<Candidate> {
    passes
        .iter()
        .flat_map(|&k| lambdas.iter().map(move |&l| Candidate::new(k, l)))
        .collect()
}

/// A trained model whose predictions are scored during tuning.
pub trait Trained {
    fn model(&self) -> &[f64];
}

impl Trained for PrivateRunReport {
    fn model(&self) -> &[f64] {
        &self.w_private
    }
}

impl Trained for BaselineRun {
    fn model(&self) -> &[f64] {
        &self.w
    }
}

impl Trained for Vec<f64> {
    fn model(&self) -> &[f64] {
        self
    }
}

/// `P(i) ∝ exp(ε·u_i/2)` for sensitivity-1 utilities.
pub fn selection_probabilities(utilities: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if utilities.is_empty() {
        return Err(Error::param("candidates", "empty candidate list"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon_tune", format!("{epsilon} must be finite and ≥ 0")));
    }
    if utilities.iter().any(|u| !u.is_finite()) {
        return Err(Error::param("utilities", "must be finite"));
    }
    let scores: Vec<f64> = utilities.iter().map(|u| epsilon * u / 2.0).collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

pub fn exponential_mechanism<R: Rng + ?Sized>(utilities: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    let probs = selection_probabilities(utilities, epsilon)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left the cumulative sum just below 1
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

/// Index of the fewest errors, ties broken by [`Candidate::lexical_cmp`].
pub fn argmin_candidate(grid: &[Candidate], errors: &[usize]) -> Result<usize> {
    if grid.is_empty() || grid.len() != errors.len() {
        return Err(Error::param("grid", "need one error count per candidate"));
    }
    Ok((0..grid.len())
        .min_by(|&a, &b| errors[a].cmp(&errors[b]).then(grid[a].lexical_cmp(&grid[b])))
        .expect("non-empty"))
}

#[derive(Debug, Clone)]
pub struct PrivateTuneOutcome<T> {
    pub chosen: usize,
    pub candidate: Candidate,
    pub model: T,
    /// Validation errors of every candidate, in grid order.
    pub errors: Vec<usize>,
    pub chunk_size: usize,
    /// Rows left over after cutting equal chunks.
    pub dropped_rows: usize,
    pub total_budget: PrivacyBudget,
}

/// Private selection over `grid`. `train(candidate, chunk, budget)` must be
/// `budget`-DP with respect to `chunk`.
pub fn private_tune<T, F>(
    ds: &Dataset,
    grid: &[Candidate],
    train: F,
    budget_train: &PrivacyBudget,
    epsilon_tune: f64,
    seed: u64,
) -> Result<PrivateTuneOutcome<T>>
where
    T: Trained + Send,
    F: Fn(&Candidate, &Dataset, &PrivacyBudget) -> Result<T> + Sync,
{
    if grid.is_empty() {
        return Err(Error::param("grid", "empty grid"));
    }
    let parts = grid.len() + 1;
    let m = ds.len();
    if grid.len() > m.saturating_sub(1) {
        return Err(Error::param(
            "grid",
            format!("{} candidates need at least {parts} rows, have {m}", grid.len()),
        ));
    }
    let chunk = m / parts;
    let dropped_rows = m - chunk * parts;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::seeded(seed, Stream::Split));
    let chunks = order[..chunk * parts]
        .chunks_exact(chunk)
        .map(|idx| ds.subset(idx))
        .collect::<Result<Vec<_>>>()?;
    let validation = &chunks[grid.len()];

    let models = grid
        .par_iter()
        .zip(&chunks[..grid.len()])
        .map(|(c, part)| train(c, part, budget_train))
        .collect::<Result<Vec<T>>>()?;
    let errors: Vec<usize> = models.iter().map(|t| misclassified(t.model(), validation)).collect();
    let utilities: Vec<f64> = errors.iter().map(|&e| -(e as f64)).collect();
    let chosen = exponential_mechanism(&utilities, epsilon_tune, &mut rng::seeded(seed, Stream::Selection))?;
    let model = models.into_iter().nth(chosen).expect("index in range");
    Ok(PrivateTuneOutcome {
        chosen,
        candidate: grid[chosen],
        model,
        errors,
        chunk_size: chunk,
        dropped_rows,
        total_budget: PrivacyBudget::new(budget_train.epsilon + epsilon_tune, budget_train.delta)?,
    })
}

#[derive(Debug, Clone)]
pub struct PublicTuneOutcome {
    pub chosen: usize,
    pub candidate: Candidate,
    pub errors: Vec<usize>,
}

/// Non-private selection on public data: each candidate trains on 75% of
/// `ds_public` and is scored on the rest.
pub fn public_tune<T, F>(ds_public: &Dataset, grid: &[Candidate], train: F, seed: u64) -> Result<PublicTuneOutcome>
where
    T: Trained + Send,
    F: Fn(&Candidate, &Dataset) -> Result<T> + Sync,
{
    if grid.is_empty() {
        return Err(Error::param("grid", "empty grid"));
    }
    let (fit, validation) = train_test_split(ds_public, 0.25, seed)?;
    let errors = grid
        .par_iter()
        .map(|c| train(c, &fit).map(|t| misclassified(t.model(), &validation)))
        .collect::<Result<Vec<usize>>>()?;
    let chosen = argmin_candidate(grid, &errors)?;
    Ok(PublicTuneOutcome {
        chosen,
        candidate: grid[chosen],
        errors,
    })
}
