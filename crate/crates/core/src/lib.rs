//! Bolt-on differentially private SGD.
//!
//! Trains a linear classifier with ordinary permutation-based SGD and makes the
//! released model private by adding noise once, at the end, calibrated to an
//! L2-sensitivity bound of the whole training run.
//!
//! - [`data`]: loading, normalization, random projection, permutations, splits
//! - [`losses`]: logistic and Huber-SVM losses with certified constants
//! - [`sgd`]: the PSGD engine
//! - [`sensitivity`]: closed-form and recursion-based sensitivity bounds
//! - [`noise`]: Laplace-ball and Gaussian output noise
//! - [`private_sgd`]: output-perturbation training
//! - [`baselines`]: per-iteration-noise algorithms for comparison
//! - [`tuning`]: public and private hyperparameter selection
//! - [`oracle`]: brute-force empirical sensitivity on neighboring datasets
//! - [`experiment`]: synthetic data, experiment grids and CSV reports

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod noise;
pub mod oracle;
pub mod private_sgd;
pub mod rng;
pub mod sensitivity;
pub mod sgd;
pub mod tuning;

pub use data::{Dataset, Example, Permutation};
pub use error::{Error, Result};
pub use losses::{Loss, LossConstants, LossKind, LossModel};
pub use noise::{Mechanism, PrivacyBudget};
pub use private_sgd::{BoundKind, PrivateRunReport};
pub use sensitivity::{Provenance, SensitivityBound};
pub use sgd::{Averaging, SgdConfig, SgdResult, StepSchedule};
