use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bolton::data::{write_csv, DataFormat};
use bolton::experiment::{
    self, generate_synthetic, parse_loss_kind, write_report, Algorithm, DataSource, ExperimentConfig,
    ResultRow, TrainSetup,
};
use bolton::oracle::{oracle_grid, run_oracle_config, OracleRow};
use bolton::private_sgd::run_sensitivity;
use bolton::sensitivity::closed_form;
use bolton::tuning::{self, Candidate};
use bolton::{Averaging, BoundKind, Dataset, Loss, LossModel, PrivacyBudget, SgdConfig, StepSchedule};

/// Differentially private SGD by output perturbation.
#[derive(Parser)]
#[command(name = "bolton", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noiseless PSGD.
    Train(TrainCmd),
    /// PSGD with output perturbation.
    PrivateTrain(PrivateCmd),
    /// Per-iteration-noise baselines.
    Baseline(BaselineCmd),
    /// Hyperparameter selection, private or on public data.
    Tune(TuneCmd),
    /// Analytic sensitivity bound of a configuration.
    Sensitivity(SensitivityCmd),
    /// Empirical vs analytic sensitivity over the soundness grid.
    Oracle(OracleCmd),
    /// Experiment grid from a JSON config.
    Bench(BenchCmd),
    /// Write a synthetic dataset as CSV.
    Synth(SynthCmd),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Training data; synthetic data is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: DataFormat,
    /// Held-out data; otherwise a split of --data.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 1000)]
    synth_m: usize,
    #[arg(long, default_value_t = 250)]
    synth_test_m: usize,
    #[arg(long, default_value_t = 10)]
    synth_d: usize,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 0.05)]
    flip: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        match &self.data {
            Some(path) => DataSource::File {
                path: path.clone(),
                format: self.format,
                test_path: self.test.clone(),
                test_fraction: self.test_fraction,
                split_seed: self.data_seed,
            },
            None => DataSource::Synthetic {
                m: self.synth_m,
                test_m: self.synth_test_m,
                d: self.synth_d,
                margin: self.margin,
                flip_prob: self.flip,
                seed: self.data_seed,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Constant,
    ConvexDecreasing,
    ConvexSqrt,
    StronglyConvexDecreasing,
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    Last,
    Average,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Last => Averaging::LastIterate,
            AveragingArg::Average => Averaging::UniformAverage,
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "logistic")]
    loss: String,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Huber smoothing width.
    #[arg(long, default_value_t = 0.1)]
    h: f64,
    /// Projection radius; defaults to 1/λ for regularized losses.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 1)]
    passes: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Defaults to a constant step for convex losses, strongly convex
    /// decreasing steps otherwise.
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    /// Constant step size; defaults to R/(L√m).
    #[arg(long)]
    eta: Option<f64>,
    /// Offset exponent of the decreasing convex schedules.
    #[arg(long, default_value_t = 0.5)]
    c: f64,
    #[arg(long, value_enum)]
    averaging: Option<AveragingArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn loss_model(&self) -> bolton::Result<LossModel> {
        let radius = self.radius.or((self.lambda > 0.0).then(|| 1.0 / self.lambda));
        LossModel::new(parse_loss_kind(&self.loss, self.h)?, self.lambda, radius)
    }

    /// `None` leaves the choice to the experiment defaults.
    fn schedule(&self, loss: &LossModel, m: usize) -> Result<Option<StepSchedule>> {
        Ok(match (self.schedule, self.eta) {
            (Some(ScheduleArg::Constant), Some(eta)) | (None, Some(eta)) => Some(StepSchedule::Constant { eta }),
            (Some(ScheduleArg::Constant), None) => {
                let r = loss.radius().or(self.radius).context("--schedule constant needs --eta or --radius")?;
                Some(StepSchedule::Constant {
                    eta: bolton::private_sgd::default_convex_eta(r, loss.constants().lipschitz, m),
                })
            }
            (Some(ScheduleArg::ConvexDecreasing), _) => Some(StepSchedule::ConvexDecreasing { c: self.c }),
            (Some(ScheduleArg::ConvexSqrt), _) => Some(StepSchedule::ConvexSqrt { c: self.c }),
            (Some(ScheduleArg::StronglyConvexDecreasing), _) => Some(StepSchedule::StronglyConvexDecreasing),
            (None, None) => None,
        })
    }

    fn experiment(&self, data: &DataArgs, m_train: usize) -> Result<ExperimentConfig> {
        let loss = self.loss_model()?;
        Ok(ExperimentConfig {
            data: data.source(),
            loss: self.loss.clone(),
            h: self.h,
            lambda: self.lambda,
            radius: self.radius,
            algorithms: vec![Algorithm::Noiseless],
            epsilons: vec![1.0],
            delta: None,
            passes: self.passes,
            batch_size: self.batch,
            schedule: self.schedule(&loss, m_train)?,
            averaging: self.averaging.map(Into::into),
            bound: BoundKind::Recursion,
            seeds: vec![self.seed],
            timing: false,
            output: None,
        })
    }
}

#[derive(Args)]
struct PrivacyArgs {
    #[arg(long)]
    epsilon: f64,
    /// 0 gives pure ε-DP; defaults to 1/m².
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args)]
struct OutArgs {
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the released weights as JSON.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundArg {
    Recursion,
    ClosedForm,
}

impl From<BoundArg> for BoundKind {
    fn from(b: BoundArg) -> Self {
        match b {
            BoundArg::Recursion => BoundKind::Recursion,
            BoundArg::ClosedForm => BoundKind::ClosedForm,
        }
    }
}

#[derive(Args)]
struct PrivateCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    privacy: PrivacyArgs,
    #[arg(long, value_enum, default_value = "recursion")]
    bound: BoundArg,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineAlgo {
    Bst14,
    Scs13,
}

#[derive(Args)]
struct BaselineCmd {
    #[arg(long, value_enum)]
    algo: BaselineAlgo,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    privacy: PrivacyArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TuneCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    privacy: PrivacyArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10])]
    grid_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-3, 1e-2])]
    grid_lambda: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    epsilon_tune: f64,
    /// Tune without privacy on this public dataset instead.
    #[arg(long)]
    public: Option<PathBuf>,
    /// Algorithm trained for each candidate.
    #[arg(long, default_value = "output_perturbation")]
    algo: Algorithm,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SensitivityCmd {
    #[arg(long)]
    m: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    fresh_permutations: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleCmd {
    /// Extra permutation seeds per configuration.
    #[arg(long, default_value_t = 2)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only grid points with these training-set sizes.
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<Algorithm>>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    timing: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 0.0)]
    flip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_model(path: Option<&Path>, w: &[f64]) -> Result<()> {
    if let Some(p) = path {
        let text = serde_json::to_string(w)?;
        std::fs::write(p, text + "\n").with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

fn single_row(
    algorithm: Algorithm,
    data: &DataArgs,
    model: &ModelArgs,
    privacy: Option<(&PrivacyArgs, BoundKind)>,
    out: &OutArgs,
) -> Result<()> {
    let (train_ds, test_ds) = data.source().load()?;
    let mut cfg = model.experiment(data, train_ds.len())?;
    cfg.algorithms = vec![algorithm];
    if let Some((p, bound)) = privacy {
        cfg.epsilons = vec![p.epsilon];
        cfg.delta = p.delta;
        cfg.bound = bound;
    }
    let m = train_ds.len();
    let setup = TrainSetup::from_config(&cfg, m)?;
    let (epsilon, delta) = match privacy {
        Some(_) => (cfg.epsilons[0], cfg.delta.unwrap_or(1.0 / (m as f64 * m as f64))),
        None => (1.0, 0.0),
    };
    let budget = PrivacyBudget::new(epsilon, delta)?;
    let run = experiment::train(algorithm, &setup, &train_ds, &budget, model.seed)?;
    let row = ResultRow {
        algorithm,
        epsilon: privacy.map(|_| epsilon),
        delta: privacy.map(|_| delta),
        passes: setup.passes,
        batch_size: setup.batch_size,
        seed: model.seed,
        accuracy: experiment::accuracy(&run.w, &test_ds),
        train_loss: (bolton::losses::empirical_risk(&setup.loss, &run.w, &train_ds) * 1e6).round() / 1e6,
        delta2: run.delta2,
        sgd_seconds: None,
        noise_seconds: None,
    };
    write_report(&[row], sink(out.out.as_deref())?)?;
    write_model(out.model_out.as_deref(), &run.w)
}

fn tune(cmd: &TuneCmd) -> Result<()> {
    let grid = tuning::grid(&cmd.grid_k, &cmd.grid_lambda);
    let (train_ds, _) = cmd.data.source().load()?;
    let base = cmd.model.experiment(&cmd.data, train_ds.len())?;
    let setup_for = |c: &Candidate, m: usize| -> bolton::Result<TrainSetup> {
        let mut cfg = base.clone();
        cfg.passes = c.passes;
        cfg.lambda = c.lambda;
        cfg.radius = None;
        TrainSetup::from_config(&cfg, m)
    };
    let seed = cmd.model.seed;
    let mut rows: Vec<[String; 7]> = Vec::new();
    match &cmd.public {
        Some(public) => {
            let public = bolton::data::normalize(&bolton::data::load_dataset(public, cmd.data.format, None)?);
            let out = tuning::public_tune(
                &public,
                &grid,
                |c, part: &Dataset| {
                    let setup = setup_for(c, part.len())?;
                    let budget = PrivacyBudget::pure(1.0)?;
                    Ok(experiment::train(Algorithm::Noiseless, &setup, part, &budget, seed)?.w)
                },
                seed,
            )?;
            for (i, c) in grid.iter().enumerate() {
                rows.push(tune_row(i, c, out.errors[i], i == out.chosen, None));
            }
        }
        None => {
            let m = train_ds.len() as f64;
            let budget = PrivacyBudget::new(cmd.privacy.epsilon, cmd.privacy.delta.unwrap_or(1.0 / (m * m)))?;
            let algo = cmd.algo;
            let out = tuning::private_tune(
                &train_ds,
                &grid,
                |c, part, b| Ok(experiment::train(algo, &setup_for(c, part.len())?, part, b, seed)?.w),
                &budget,
                cmd.epsilon_tune,
                seed,
            )?;
            log::info!(
                "chunk size {}, {} rows dropped, total budget {}",
                out.chunk_size,
                out.dropped_rows,
                out.total_budget
            );
            for (i, c) in grid.iter().enumerate() {
                rows.push(tune_row(i, c, out.errors[i], i == out.chosen, Some(&out.total_budget)));
            }
        }
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink(cmd.out.as_deref())?);
    w.write_record(["index", "passes", "lambda", "validation_errors", "selected", "total_epsilon", "total_delta"])?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn tune_row(i: usize, c: &Candidate, errors: usize, selected: bool, total: Option<&PrivacyBudget>) -> [String; 7] {
    [
        i.to_string(),
        c.passes.to_string(),
        format!("{:.6e}", c.lambda),
        errors.to_string(),
        u8::from(selected).to_string(),
        total.map(|b| format!("{:.6e}", b.epsilon)).unwrap_or_default(),
        total.map(|b| format!("{:.6e}", b.delta)).unwrap_or_default(),
    ]
}

fn sensitivity(cmd: &SensitivityCmd) -> Result<()> {
    let model = &cmd.model;
    let loss = model.loss_model()?;
    let consts = loss.constants();
    let schedule = match model.schedule(&loss, cmd.m)? {
        Some(s) => s,
        None if consts.is_strongly_convex() => StepSchedule::StronglyConvexDecreasing,
        None => anyhow::bail!(bolton::Error::InvalidParameter {
            name: "schedule",
            reason: "give --schedule or --eta".into(),
        }),
    };
    let averaging = model.averaging.map(Into::into).unwrap_or(if consts.is_strongly_convex() {
        Averaging::LastIterate
    } else {
        Averaging::UniformAverage
    });
    let cfg = SgdConfig {
        passes: model.passes,
        batch_size: model.batch,
        radius: loss.radius(),
        averaging,
        fresh_permutation_per_pass: cmd.fresh_permutations,
        seed: model.seed,
    };
    // only the size of the dataset matters for the bounds
    let ds = bolton::Dataset::new(vec![bolton::Example::new(vec![0.0], 1.0)?; cmd.m])?;
    cfg.validate(cmd.m)?;
    let recursion = run_sensitivity(&ds, &loss, &schedule, &cfg, BoundKind::Recursion)?;
    let closed = if cmd.fresh_permutations && model.passes > 1 {
        None
    } else {
        closed_form(&schedule, cmd.m, model.passes, model.batch, &consts, averaging).ok()
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink(cmd.out.as_deref())?);
    w.write_record([
        "schedule", "m", "passes", "batch_size", "averaging", "lipschitz", "smoothness", "strong_convexity",
        "recursion", "closed_form", "closed_form_kind",
    ])?;
    w.write_record([
        schedule.to_string(),
        cmd.m.to_string(),
        model.passes.to_string(),
        model.batch.to_string(),
        averaging.to_string(),
        format!("{:.6e}", consts.lipschitz),
        format!("{:.6e}", consts.smoothness),
        format!("{:.6e}", consts.strong_convexity),
        format!("{:.6e}", recursion.delta2),
        closed.as_ref().map(|b| format!("{:.6e}", b.delta2)).unwrap_or_default(),
        closed.as_ref().map(|b| b.provenance.to_string()).unwrap_or_default(),
    ])?;
    w.flush()?;
    Ok(())
}

fn oracle(cmd: &OracleCmd) -> Result<()> {
    let configs: Vec<_> = oracle_grid()
        .into_iter()
        .filter(|c| cmd.m.is_empty() || cmd.m.contains(&c.m))
        .collect();
    let rows = configs
        .iter()
        .map(|c| run_oracle_config(c, cmd.d, cmd.trials, cmd.seed))
        .collect::<bolton::Result<Vec<OracleRow>>>()?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink(cmd.out.as_deref())?);
    w.write_record([
        "loss", "lambda", "schedule", "passes", "m", "batch_size", "averaging", "empirical", "recursion",
        "closed_form", "ratio",
    ])?;
    for r in rows {
        w.write_record([
            r.loss,
            format!("{:.6e}", r.lambda),
            r.schedule,
            r.passes.to_string(),
            r.m.to_string(),
            r.batch.to_string(),
            r.averaging,
            format!("{:.6e}", r.empirical),
            format!("{:.6e}", r.recursion),
            r.closed_form.map(|v| format!("{v:.6e}")).unwrap_or_default(),
            format!("{:.6}", r.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn bench(cmd: &BenchCmd) -> Result<()> {
    let mut cfg = ExperimentConfig::from_json_file(&cmd.config)
        .with_context(|| format!("reading config {}", cmd.config.display()))?;
    if let Some(a) = &cmd.algorithms {
        cfg.algorithms = a.clone();
    }
    if let Some(e) = &cmd.epsilons {
        cfg.epsilons = e.clone();
    }
    if let Some(s) = &cmd.seeds {
        cfg.seeds = s.clone();
    }
    cfg.delta = cmd.delta.or(cfg.delta);
    cfg.passes = cmd.passes.unwrap_or(cfg.passes);
    cfg.batch_size = cmd.batch.unwrap_or(cfg.batch_size);
    cfg.lambda = cmd.lambda.unwrap_or(cfg.lambda);
    cfg.timing = cmd.timing.unwrap_or(cfg.timing);
    let out = cmd.out.clone().or(cfg.output.clone());
    let rows = experiment::run_experiment(&cfg)?;
    if rows.is_empty() {
        anyhow::bail!("every run failed; see the log");
    }
    write_report(&rows, sink(out.as_deref())?)?;
    Ok(())
}

fn synth(cmd: &SynthCmd) -> Result<()> {
    let ds = generate_synthetic(cmd.m, cmd.d, cmd.margin, cmd.flip, cmd.seed)?;
    write_csv(&ds, sink(cmd.out.as_deref())?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => single_row(Algorithm::Noiseless, &c.data, &c.model, None, &c.out),
        Command::PrivateTrain(c) => single_row(
            Algorithm::OutputPerturbation,
            &c.data,
            &c.model,
            Some((&c.privacy, c.bound.into())),
            &c.out,
        ),
        Command::Baseline(c) => {
            let algo = match c.algo {
                BaselineAlgo::Bst14 => Algorithm::Bst14,
                BaselineAlgo::Scs13 => Algorithm::Scs13,
            };
            single_row(algo, &c.data, &c.model, Some((&c.privacy, BoundKind::Recursion)), &c.out)
        }
        Command::Tune(c) => tune(&c),
        Command::Sensitivity(c) => sensitivity(&c),
        Command::Oracle(c) => oracle(&c),
        Command::Bench(c) => bench(&c),
        Command::Synth(c) => synth(&c),
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("BOLTON_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("BOLTON_THREADS ignored: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .find_map(|c| c.downcast_ref::<bolton::Error>())
                .is_some_and(bolton::Error::is_config_error);
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}
