//! Command-line entry points: oracle queries, estimator runs, bound
//! verification, training, lambda sweeps, and report emission.
//!
//! Every command is deterministic given its arguments and seeds. All
//! randomness flows from the user-supplied master seed through the splitting
//! rule in [`crate::seeds`]: run `i` of a sweep uses `derive(master, "run", i)`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::bound::{self, BoundError, RandomProblemOptions, ToyLearningProblem};
use crate::data::DataError;
use crate::estim::{self, Discriminator, EstimError};
use crate::info::{DiscreteJoint, LogBase, OracleError};
use crate::metrics::MetricsError;
use crate::report::{self, ReportError};
use crate::seeds;
use crate::train::{self, Regularizer, RunRecord, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Estim(#[from] EstimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Oracle(_) => "oracle",
            CliError::Bound(_) => "bound",
            CliError::Estim(_) => "estimate",
            CliError::Train(_) => "train",
            CliError::Data(_) => "data",
            CliError::Metrics(_) => "metrics",
            CliError::Report(_) => "report",
            CliError::Verification(_) => "verification",
            CliError::Usage(_) => "usage",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaseArg {
    Nats,
    Bits,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    None,
    Dropout,
    Decov,
    Udm,
    Ldm,
}

impl From<MethodArg> for Regularizer {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::None => Regularizer::None,
            MethodArg::Dropout => Regularizer::Dropout,
            MethodArg::Decov => Regularizer::Decov,
            MethodArg::Udm => Regularizer::Udm,
            MethodArg::Ldm => Regularizer::Ldm,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ldm-lab",
    version,
    about = "Label-based diversity laboratory: exact information oracles, neural JS estimators, adversarial diversity-regularized training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Exact information quantities of a discrete joint pmf file.
    Oracle {
        /// Joint pmf JSON: {"alphabets": [...], "labels": n, "pmf": [...]}.
        #[arg(long)]
        joint: PathBuf,
        /// Logarithm base for the printed quantities.
        #[arg(long, value_enum, default_value = "nats")]
        base: BaseArg,
    },
    /// Neural JS estimates for an activation batch.
    Estimate {
        /// CSV with a header of unit names and an optional `label` column.
        #[arg(long)]
        batch: PathBuf,
        /// Discriminator maximization steps.
        #[arg(long, default_value_t = 1000)]
        updates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Discriminator hidden width.
        #[arg(long, default_value_t = estim::DISC_HIDDEN)]
        hidden: usize,
    },
    /// Verify the generalization bound and decomposition identities on
    /// enumerable toy problems.
    Boundlab {
        /// Toy problem JSON; omitted, a randomized suite runs instead.
        #[arg(long)]
        problem: Option<PathBuf>,
        /// Randomized problems per suite.
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict the randomized suite to 0-1 losses.
        #[arg(long)]
        zero_one_loss: bool,
    },
    /// One training run from a JSON config.
    ///
    /// Metric CSV schema (fixed column order):
    /// iteration,e_loss,d_js,d_js_l,t_loss,corre,corre_cond,corre_gap,train_acc,test_acc
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the MNIST IDX files.
        #[arg(long, env = "LDMLAB_DATA", default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config method.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Override the config balance weight.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Cross product of lambda values and seeds; per-run seed i is
    /// derive(master, "run", i).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        /// Seeds per lambda (0..n mapped through the master seed).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, env = "LDMLAB_DATA", default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Aggregate table and SVG plots from finished runs.
    Report {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

/// Parse argv and dispatch.
pub fn run() -> Result<(), CliError> {
    dispatch(Cli::parse())
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Oracle { joint, base } => cmd_oracle(&joint, base),
        Command::Estimate { batch, updates, seed, hidden } => cmd_estimate(&batch, updates, seed, hidden),
        Command::Boundlab { problem, count, seed, zero_one_loss } => {
            cmd_boundlab(problem.as_deref(), count, seed, zero_one_loss)
        }
        Command::Train { config, data_dir, out_dir, seed, method, lambda } => {
            cmd_train(&config, &data_dir, &out_dir, seed, method, lambda)
        }
        Command::Sweep { config, lambda, seeds, seed, jobs, data_dir, out_dir } => {
            cmd_sweep(&config, &lambda, seeds, seed, jobs, &data_dir, &out_dir)
        }
        Command::Report { out_dir } => cmd_report(&out_dir),
    }
}

fn cmd_oracle(joint_path: &Path, base: BaseArg) -> Result<(), CliError> {
    let base = match base {
        BaseArg::Nats => LogBase::Nats,
        BaseArg::Bits => LogBase::Bits,
    };
    let joint = DiscreteJoint::read_json(joint_path)?.with_base(base);
    let unit = match base {
        LogBase::Nats => "nats",
        LogBase::Bits => "bits",
    };
    println!("joint_entropy           {:?} {unit}", joint.entropy());
    println!("multivariate_mi         {:?} {unit}", joint.multivariate_mi());
    if joint.classes() > 0 {
        println!("label_entropy           {:?} {unit}", joint.label_entropy()?);
        println!("conditional_mi          {:?} {unit}", joint.conditional_multivariate_mi()?);
        println!("d_lb                    {:?} {unit}", joint.d_lb_exact()?);
        println!("units_label_mi          {:?} {unit}", joint.units_label_mi()?);
        println!("decomposition_residual  {:?}", joint.ensemble_decomposition_residual()?);
        let (bayes, bound) = joint.hellman_raviv_check()?;
        println!("bayes_error             {bayes:?}");
        println!("hellman_raviv_bound     {bound:?} bits");
    } else {
        println!("(unlabeled joint: label-dependent quantities unavailable)");
    }
    Ok(())
}

fn cmd_estimate(batch_path: &Path, updates: usize, seed: u64, hidden: usize) -> Result<(), CliError> {
    let batch = estim::read_batch_csv(batch_path)?;
    println!("rows {}  units {}", batch.rows(), batch.cols());
    let mut disc = Discriminator::with_config(
        batch.cols(),
        hidden,
        estim::DISC_LR,
        seeds::derive(seed, "estimate-t1", 0),
    );
    let unconditional = estim::js_mi_estimate(&batch, &mut disc, updates, seeds::derive(seed, "estimate", 1))?;
    println!("d_js_estimate           {unconditional:?}");
    if batch.labels().is_some() {
        let mut disc2 = Discriminator::with_config(
            batch.cols(),
            hidden,
            estim::DISC_LR,
            seeds::derive(seed, "estimate-t2", 0),
        );
        let conditional =
            estim::conditional_js_mi_estimate(&batch, &mut disc2, updates, seeds::derive(seed, "estimate", 2))?;
        println!("d_js_conditional        {conditional:?}");
        println!("d_lb_estimate           {:?}", unconditional - conditional);
    }
    Ok(())
}

fn print_problem_report(label: &str, problem: &ToyLearningProblem) -> Result<bool, CliError> {
    let g = problem.generalization_gap_exact()?;
    let mi = problem.mi_dataset_hypothesis()?;
    let (gabs, bound_value) = problem.lemma1_bound()?;
    let residual = problem.theorem1_residual()?;
    let ok = gabs <= bound_value + 1e-12 && residual.abs() < 1e-9;
    println!(
        "{label}: g={g:+.6e}  I(f(S);W)={mi:.6e}  bound={bound_value:.6e}  residual={residual:+.3e}  {}",
        if ok { "ok" } else { "VIOLATION" }
    );
    Ok(ok)
}

fn cmd_boundlab(
    problem: Option<&Path>,
    count: usize,
    seed: u64,
    zero_one_loss: bool,
) -> Result<(), CliError> {
    let mut all_ok = true;
    if let Some(path) = problem {
        let p = ToyLearningProblem::read_json(path)?;
        all_ok &= print_problem_report(&path.display().to_string(), &p)?;
    } else {
        let opts = RandomProblemOptions { zero_one_loss, ..Default::default() };
        let mut rng = seeds::stream(seed, "boundlab", 0);
        for i in 0..count {
            let p = bound::random_problem(&mut rng, &opts);
            all_ok &= print_problem_report(&format!("random[{i}]"), &p)?;
        }
    }
    if all_ok {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::Verification("bound or identity violation detected".into()))
    }
}

fn run_one(
    config: &TrainConfig,
    train_set: &crate::data::Dataset,
    test_set: &crate::data::Dataset,
    out_dir: &Path,
) -> Result<RunRecord, CliError> {
    let record = train::run_experiment(config, train_set, test_set)?;
    report::write_run(&record, out_dir)?;
    Ok(record)
}

fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    method: Option<MethodArg>,
    lambda: Option<f64>,
) -> Result<(), CliError> {
    let mut config = TrainConfig::read_json(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(m) = method {
        config.method = m.into();
    }
    if let Some(l) = lambda {
        config.lambda = l;
    }
    config.validate()?;
    let (train_set, test_set) = train::prepare_data(&config, data_dir)?;
    let record = run_one(&config, &train_set, &test_set, out_dir)?;
    let stem = report::run_stem(config.method, config.lambda, config.seed);
    println!("wrote {}", out_dir.join(format!("{stem}.csv")).display());
    println!("wrote {}", out_dir.join(format!("{stem}.json")).display());
    println!(
        "final: train {:.4}  test {:.4}  gap {:+.4}  ({} rows, {:.1}s)",
        record.final_train_accuracy,
        record.final_test_accuracy,
        record.final_gap,
        record.rows.len(),
        record.wall_seconds
    );
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    lambdas: &[f64],
    seeds_per_lambda: u64,
    master_seed: u64,
    jobs: usize,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    if lambdas.is_empty() {
        return Err(CliError::Usage("--lambda needs at least one value".into()));
    }
    if lambdas.iter().any(|&l| l < 0.0) {
        return Err(CliError::Usage("lambda values must be >= 0".into()));
    }
    if seeds_per_lambda == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let base = TrainConfig::read_json(config_path)?;
    let (train_set, test_set) = train::prepare_data(&base, data_dir)?;

    let mut tasks = Vec::new();
    for (li, &lambda) in lambdas.iter().enumerate() {
        for si in 0..seeds_per_lambda {
            let mut config = base.clone();
            config.lambda = lambda;
            let run_index = li as u64 * seeds_per_lambda + si;
            config.seed = seeds::derive(master_seed, "run", run_index);
            tasks.push(config);
        }
    }

    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, String)>> = Mutex::new(Vec::new());
    let workers = jobs.max(1).min(tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                if let Err(e) = run_one(&tasks[i], &train_set, &test_set, out_dir) {
                    failures.lock().expect("worker mutex").push((i, e.to_string()));
                }
            });
        }
    });

    let mut failures = failures.into_inner().expect("worker mutex");
    failures.sort();
    for (i, err) in &failures {
        eprintln!("run {i} (lambda={}, seed={}) failed: {err}", tasks[*i].lambda, tasks[*i].seed);
    }
    // partial results are preserved: aggregate whatever finished
    cmd_report(out_dir)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("{} of {} runs failed", failures.len(), tasks.len())))
    }
}

fn cmd_report(out_dir: &Path) -> Result<(), CliError> {
    let runs = report::load_runs(out_dir)?;
    let agg = report::aggregate(&runs);
    let table = report::aggregate_csv(&agg);
    let agg_path = out_dir.join("aggregate.csv");
    std::fs::write(&agg_path, &table)
        .map_err(|e| CliError::Usage(format!("{}: {e}", agg_path.display())))?;
    print!("{table}");

    let gap_series = report::mean_series(&runs, |r| r.corre_gap);
    let gap_svg = report::render_line_plot(
        "correlation gap vs iteration",
        "iteration",
        "correlation gap",
        &gap_series,
    );
    let gap_path = out_dir.join("corre_gap_vs_iteration.svg");
    std::fs::write(&gap_path, gap_svg)
        .map_err(|e| CliError::Usage(format!("{}: {e}", gap_path.display())))?;

    let acc_series = report::mean_series(&runs, |r| r.test_acc);
    let acc_svg =
        report::render_line_plot("test accuracy vs iteration", "iteration", "test accuracy", &acc_series);
    let acc_path = out_dir.join("test_acc_vs_iteration.svg");
    std::fs::write(&acc_path, acc_svg)
        .map_err(|e| CliError::Usage(format!("{}: {e}", acc_path.display())))?;

    println!("wrote {}", agg_path.display());
    println!("wrote {}", gap_path.display());
    println!("wrote {}", acc_path.display());
    Ok(())
}
