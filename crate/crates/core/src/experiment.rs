//! Synthetic data, experiment grids and CSV reports.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bst14_convex, bst14_strongly_convex, scs13};
use crate::data::{load_dataset, normalize, train_test_split, DataFormat, Dataset, Example};
use crate::error::{Error, Result};
use crate::losses::{empirical_risk, misclassified, Loss, LossKind, LossModel};
use crate::noise::{sample_unit_sphere, PrivacyBudget};
use crate::private_sgd::{private_psgd, private_psgd_strongly_convex, BoundKind};
use crate::rng::{self, Stream};
use crate::sgd::{psgd_run, Averaging, SgdConfig, StepSchedule};

/// Two Gaussian clouds: `y` uniform on ±1, `x = y·margin·u + N(0, I)` for a
/// unit vector `u` fixed by the seed, labels flipped with probability
/// `flip_prob`, rows normalized to `‖x‖ ≤ 1`.
pub fn generate_synthetic(m: usize, d: usize, margin: f64, flip_prob: f64, seed: u64) -> Result<Dataset> {
    if m < 2 {
        return Err(Error::param("m", "need at least 2 rows"));
    }
    if d < 1 {
        return Err(Error::param("d", "need at least 1 feature"));
    }
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::param("margin", format!("{margin} must be finite and > 0")));
    }
    if !(0.0..0.5).contains(&flip_prob) {
        return Err(Error::param("flip_prob", format!("{flip_prob} not in [0, 0.5)")));
    }
    let mut rng = rng::seeded(seed, Stream::Synthetic);
    let u = sample_unit_sphere(d, &mut rng);
    let rows = (0..m)
        .map(|_| {
            let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let x: Vec<f64> = u
                .iter()
                .map(|ui| y * margin * ui + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let y = if rng.random_bool(flip_prob) { -y } else { y };
            Example::new(x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize(&Dataset::new(rows)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// `m` training rows plus `test_m` held-out rows from the same generator.
    Synthetic {
        m: usize,
        test_m: usize,
        d: usize,
        margin: f64,
        flip_prob: f64,
        seed: u64,
    },
    /// A file, normalized after loading. Without `test_path` a `test_fraction`
    /// split (seeded by `split_seed`) is held out.
    File {
        path: PathBuf,
        format: DataFormat,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DataSource {
    /// `(train, test)`
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic { m, test_m, d, margin, flip_prob, seed } => {
                if *test_m < 1 {
                    return Err(Error::param("test_m", "need at least 1 test row"));
                }
                let all = generate_synthetic(m + test_m, *d, *margin, *flip_prob, *seed)?;
                let train: Vec<usize> = (0..*m).collect();
                let test: Vec<usize> = (*m..m + test_m).collect();
                Ok((all.subset(&train)?, all.subset(&test)?))
            }
            DataSource::File { path, format, test_path, test_fraction, split_seed } => {
                let train = normalize(&load_dataset(path, *format, None)?);
                match test_path {
                    Some(tp) => {
                        let test = normalize(&load_dataset(tp, *format, Some(train.dim()))?);
                        Ok((train, test))
                    }
                    None => train_test_split(&train, *test_fraction, *split_seed),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Noiseless,
    OutputPerturbation,
    Scs13,
    Bst14,
}

impl Algorithm {
    pub fn is_private(&self) -> bool {
        *self != Algorithm::Noiseless
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noiseless" => Ok(Algorithm::Noiseless),
            "output_perturbation" | "output-perturbation" | "ours" => Ok(Algorithm::OutputPerturbation),
            "scs13" => Ok(Algorithm::Scs13),
            "bst14" => Ok(Algorithm::Bst14),
            other => Err(Error::param("algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Noiseless => "noiseless",
            Algorithm::OutputPerturbation => "output_perturbation",
            Algorithm::Scs13 => "scs13",
            Algorithm::Bst14 => "bst14",
        })
    }
}

fn default_h() -> f64 {
    0.1
}
fn default_passes() -> usize {
    1
}
fn default_batch() -> usize {
    50
}
fn default_epsilons() -> Vec<f64> {
    vec![0.1, 0.5, 1.0, 2.0, 4.0]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default)]
    pub lambda: f64,
    /// Defaults to `1/λ` for regularized losses.
    #[serde(default)]
    pub radius: Option<f64>,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Defaults to `1/m²` for `m` training rows.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to a constant `R/(L√m)` step for convex losses and
    /// `min(1/(γt), 1/β)` for strongly convex ones.
    #[serde(default)]
    pub schedule: Option<StepSchedule>,
    /// Defaults to the uniform average for convex losses and the last
    /// iterate for strongly convex ones.
    #[serde(default)]
    pub averaging: Option<Averaging>,
    #[serde(default)]
    pub bound: BoundKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Fill the timing columns (median of 3 repetitions).
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_loss() -> String {
    "logistic".into()
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn loss_model(&self) -> Result<LossModel> {
        let kind = parse_loss_kind(&self.loss, self.h)?;
        let radius = match self.radius {
            Some(r) => Some(r),
            None if self.lambda > 0.0 => Some(1.0 / self.lambda),
            None => None,
        };
        LossModel::new(kind, self.lambda, radius)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "need at least one seed"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::param("algorithms", "need at least one algorithm"));
        }
        if self.epsilons.is_empty() {
            return Err(Error::param("epsilons", "need at least one epsilon"));
        }
        for &e in &self.epsilons {
            PrivacyBudget::pure(e)?;
        }
        if let Some(d) = self.delta {
            PrivacyBudget::new(1.0, d)?;
        }
        self.loss_model()?;
        Ok(())
    }
}

pub fn parse_loss_kind(name: &str, h: f64) -> Result<LossKind> {
    match name {
        "logistic" => Ok(LossKind::Logistic),
        "huber" | "huber_svm" | "huber-svm" => Ok(LossKind::HuberSvm { h }),
        other => Err(Error::param("loss", format!("unknown loss `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub algorithm: Algorithm,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub passes: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub train_loss: f64,
    pub delta2: Option<f64>,
    pub sgd_seconds: Option<f64>,
    pub noise_seconds: Option<f64>,
}

pub const RESULT_HEADER: [&str; 11] = [
    "algorithm",
    "epsilon",
    "delta",
    "passes",
    "batch_size",
    "seed",
    "accuracy",
    "train_loss",
    "delta2",
    "sgd_seconds",
    "noise_seconds",
];

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

fn sci(v: f64) -> String {
    format!("{v:.6e}")
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

impl ResultRow {
    /// Accuracy, loss and seconds use six decimals; ε, δ and Δ₂ use six
    /// mantissa decimals in scientific notation so tiny values survive.
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.algorithm.to_string(),
            opt(self.epsilon, sci),
            opt(self.delta, sci),
            self.passes.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            fixed(self.accuracy),
            fixed(self.train_loss),
            opt(self.delta2, sci),
            opt(self.sgd_seconds, fixed),
            opt(self.noise_seconds, fixed),
        ]
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        let bad = |what: &str| Error::param("record", format!("bad `{what}` field"));
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(RESULT_HEADER[i]));
        let real = |i: usize| field(i)?.parse::<f64>().map_err(|_| bad(RESULT_HEADER[i]));
        let opt_real = |i: usize| -> Result<Option<f64>> {
            let s = field(i)?;
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| bad(RESULT_HEADER[i]))
            }
        };
        let int = |i: usize| field(i)?.parse::<u64>().map_err(|_| bad(RESULT_HEADER[i]));
        Ok(ResultRow {
            algorithm: field(0)?.parse()?,
            epsilon: opt_real(1)?,
            delta: opt_real(2)?,
            passes: int(3)? as usize,
            batch_size: int(4)? as usize,
            seed: int(5)?,
            accuracy: real(6)?,
            train_loss: real(7)?,
            delta2: opt_real(8)?,
            sgd_seconds: opt_real(9)?,
            noise_seconds: opt_real(10)?,
        })
    }
}

/// Correct predictions over total, rounded to six decimals.
pub fn accuracy(w: &[f64], test: &Dataset) -> f64 {
    let correct = test.len() - misclassified(w, test);
    round6(correct as f64 / test.len() as f64)
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

/// Everything a single training run needs besides the algorithm, budget and seed.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub loss: LossModel,
    pub schedule: StepSchedule,
    pub averaging: Averaging,
    pub passes: usize,
    pub batch_size: usize,
    pub radius: Option<f64>,
    pub bound: BoundKind,
}

impl TrainSetup {
    pub fn from_config(cfg: &ExperimentConfig, m: usize) -> Result<Self> {
        let loss = cfg.loss_model()?;
        let consts = loss.constants();
        let strongly = consts.is_strongly_convex();
        let radius = cfg.radius.or(loss.radius());
        let schedule = match cfg.schedule {
            Some(s) => s,
            None if strongly => StepSchedule::StronglyConvexDecreasing,
            None => {
                let r = radius.ok_or_else(|| {
                    Error::param("radius", "the default convex step R/(L√m) needs a radius; set one or a schedule")
                })?;
                StepSchedule::Constant {
                    eta: crate::private_sgd::default_convex_eta(r, consts.lipschitz, m),
                }
            }
        };
        let averaging = cfg.averaging.unwrap_or(if strongly {
            Averaging::LastIterate
        } else {
            Averaging::UniformAverage
        });
        Ok(TrainSetup {
            loss,
            schedule,
            averaging,
            passes: cfg.passes,
            batch_size: cfg.batch_size,
            radius,
            bound: cfg.bound,
        })
    }

    pub fn sgd_config(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            passes: self.passes,
            batch_size: self.batch_size,
            radius: self.radius,
            averaging: self.averaging,
            fresh_permutation_per_pass: false,
            seed,
        }
    }
}

/// Output of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub w: Vec<f64>,
    pub delta2: Option<f64>,
    pub sgd_seconds: f64,
    pub noise_seconds: Option<f64>,
}

pub fn train(
    algorithm: Algorithm,
    setup: &TrainSetup,
    ds: &Dataset,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = setup.sgd_config(seed);
    let loss = &setup.loss;
    let strongly = loss.constants().is_strongly_convex();
    match algorithm {
        Algorithm::Noiseless => {
            let start = Instant::now();
            let run = psgd_run(ds, loss, &setup.schedule, &cfg)?;
            Ok(TrainOutcome {
                w: run.released(cfg.averaging).to_vec(),
                delta2: None,
                sgd_seconds: start.elapsed().as_secs_f64(),
                noise_seconds: None,
            })
        }
        Algorithm::OutputPerturbation => {
            let report = if strongly && setup.schedule == StepSchedule::StronglyConvexDecreasing {
                private_psgd_strongly_convex(ds, loss, &cfg, budget, setup.bound)?
            } else {
                private_psgd(ds, loss, &setup.schedule, &cfg, budget, setup.bound)?
            };
            Ok(TrainOutcome {
                delta2: Some(report.delta2()),
                sgd_seconds: report.sgd_seconds,
                noise_seconds: Some(report.noise_seconds),
                w: report.w_private,
            })
        }
        Algorithm::Scs13 => {
            let run = scs13(ds, loss, &setup.schedule, &cfg, budget.epsilon)?;
            Ok(TrainOutcome { w: run.w, delta2: None, sgd_seconds: run.seconds, noise_seconds: None })
        }
        Algorithm::Bst14 => {
            let radius = setup
                .radius
                .ok_or_else(|| Error::param("radius", "BST14 needs a finite radius"))?;
            let run = if strongly {
                bst14_strongly_convex(ds, loss, setup.passes, budget, radius, setup.batch_size, seed)?
            } else {
                bst14_convex(ds, loss, setup.passes, budget, radius, setup.batch_size, seed)?
            };
            Ok(TrainOutcome { w: run.w, delta2: None, sgd_seconds: run.seconds, noise_seconds: None })
        }
    }
}

/// Every `(algorithm, ε, seed)` combination, in that nesting order. Failing
/// runs are logged and skipped.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let (train_ds, test_ds) = cfg.data.load()?;
    run_on(cfg, &train_ds, &test_ds)
}

/// [`run_experiment`] on already-loaded data.
pub fn run_on(cfg: &ExperimentConfig, train_ds: &Dataset, test_ds: &Dataset) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let m = train_ds.len();
    let delta = cfg.delta.unwrap_or(1.0 / (m as f64 * m as f64));
    let setup = TrainSetup::from_config(cfg, m)?;
    let jobs: Vec<(Algorithm, f64, u64)> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| {
            cfg.epsilons
                .iter()
                .flat_map(move |&e| cfg.seeds.iter().map(move |&s| (a, e, s)))
        })
        .collect();
    let rows: Vec<Option<ResultRow>> = jobs
        .par_iter()
        .map(|&(algorithm, epsilon, seed)| {
            match run_row(cfg, &setup, train_ds, test_ds, algorithm, epsilon, delta, seed) {
                Ok(row) => Some(row),
                Err(e) => {
                    log::warn!("skipping {algorithm} eps={epsilon} seed={seed}: {e}");
                    None
                }
            }
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[allow(clippy::too_many_arguments)]
fn run_row(
    cfg: &ExperimentConfig,
    setup: &TrainSetup,
    train_ds: &Dataset,
    test_ds: &Dataset,
    algorithm: Algorithm,
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<ResultRow> {
    let budget = PrivacyBudget::new(epsilon, delta)?;
    let out = train(algorithm, setup, train_ds, &budget, seed)?;
    let (sgd_seconds, noise_seconds) = if cfg.timing {
        let a = train(algorithm, setup, train_ds, &budget, seed)?;
        let b = train(algorithm, setup, train_ds, &budget, seed)?;
        let sgd = median3([out.sgd_seconds, a.sgd_seconds, b.sgd_seconds]);
        let noise = match (out.noise_seconds, a.noise_seconds, b.noise_seconds) {
            (Some(x), Some(y), Some(z)) => Some(median3([x, y, z])),
            _ => None,
        };
        (Some(sgd), noise)
    } else {
        (None, None)
    };
    Ok(ResultRow {
        algorithm,
        epsilon: Some(epsilon),
        delta: Some(delta),
        passes: setup.passes,
        batch_size: setup.batch_size,
        seed,
        accuracy: accuracy(&out.w, test_ds),
        train_loss: round6(empirical_risk(&setup.loss, &out.w, train_ds)),
        delta2: out.delta2,
        sgd_seconds,
        noise_seconds,
    })
}

/// Header plus one line per row, LF line endings.
pub fn write_report<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(RESULT_HEADER)?;
    for row in rows {
        w.write_record(row.to_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn report(rows: &[ResultRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::param("rows", "nothing to report"));
    }
    write_report(rows, BufWriter::new(File::create(path)?))
}

pub fn read_report(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| ResultRow::from_record(&rec?))
        .collect()
}
