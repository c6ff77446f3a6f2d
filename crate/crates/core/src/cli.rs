//! Command-line front end: `train`, `gradcheck`, `synth`, `aggregate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ensemble::{RoutingMode, VoteWeighting};
use crate::error::Error;
use crate::experiment::{aggregate, run_single, Aggregate, RunConfig};
use crate::gradcheck::{run_all as run_gradchecks, GradcheckOptions};
use crate::metrics::{read_report, write_report, ExperimentReport};
use crate::stream_data::{
    generate_synthetic_split, load_embeddings, save_embeddings, SyntheticSpec,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SOFTKNN_THREADS";

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_CHECK: u8 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "dee",
    version,
    about = "Differentiable soft-KNN ensembles for class-incremental streams"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate over one or more seeds, writing a report per seed.
    Train(TrainArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic clustered dataset as EMBD train/test files.
    Synth(SynthArgs),
    /// Summarize report files as mean and standard deviation.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    Distance,
    Similarity,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub train_keys: bool,
    #[arg(long, value_enum)]
    pub vote_weighting: Option<WeightingArg>,
    /// Output directory for the reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Transport bandwidths to check.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0005, 0.01])]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 400)]
    pub iterations: usize,
    /// Scale analytic gradients by 1.01 to confirm the checks catch errors.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 600)]
    pub per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    pub norm: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `train.embd` and `test.embd`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Report files, or directories whose `*.json` reports are all read.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure tagged with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Data(Error),
    Check(String),
    Other(Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Data(_) => EXIT_DATA,
            Failure::Check(_) => EXIT_CHECK,
            Failure::Other(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e}"),
            Failure::Data(e) => write!(f, "data error: {e}"),
            Failure::Check(msg) => write!(f, "check failed: {msg}"),
            Failure::Other(e) => write!(f, "error: {e}"),
        }
    }
}

/// Sorts library errors raised while running an experiment.
fn classify(e: Error) -> Failure {
    match e {
        Error::InvalidConfig(_) | Error::KappaOutOfRange { .. } | Error::PlanMismatch(_) => {
            Failure::Config(e)
        }
        Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::UnexpectedEnd
        | Error::TrailingData(_)
        | Error::LabelOutOfRange { .. }
        | Error::NonFiniteRecord(_)
        | Error::EmptyDataset
        | Error::MissingClass(_)
        | Error::Csv(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyTestSet
        | Error::MixedConfigs(_)
        | Error::Json(_) => Failure::Data(e),
        other => Failure::Other(other),
    }
}

/// Applies `SOFTKNN_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Config(Error::InvalidConfig(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        )))
    })?;
    // A pool that is already built (e.g. by an earlier call) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_seeds {
        cfg.n_seeds = n;
    }
    if let Some(mode) = args.mode {
        cfg.model.mode = match mode {
            ModeArg::Soft => RoutingMode::Soft,
            ModeArg::Hard => RoutingMode::Hard,
        };
    }
    if args.train_keys {
        cfg.train.train_keys = true;
    }
    if let Some(w) = args.vote_weighting {
        cfg.model.vote_weighting = match w {
            WeightingArg::Distance => VoteWeighting::Distance,
            WeightingArg::Similarity => VoteWeighting::Similarity,
        };
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    if cfg.train.train_keys && cfg.model.mode == RoutingMode::Hard {
        return Err(Failure::Config(Error::InvalidConfig(
            "train_keys requires soft routing".into(),
        )));
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

pub fn report_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("run_seed{seed}.json"))
}

pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Runs every seed before writing anything, so a failure leaves no reports.
pub fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = resolve_train_config(args)?;
    let (train, test) = cfg.data.load().map_err(|e| match e {
        Error::File { .. } | Error::Io(_) => Failure::Data(e),
        other => classify(other),
    })?;
    let mut reports = Vec::with_capacity(cfg.n_seeds);
    for seed in cfg.seeds() {
        let report = run_single(&cfg.for_seed(seed), &train, &test).map_err(classify)?;
        eprintln!(
            "seed {seed}: final accuracy {:.4}, forgetting {}, {:.2}s training",
            report.final_accuracy,
            report
                .forgetting
                .map_or("n/a".into(), |f| format!("{f:.4}")),
            report.train_seconds
        );
        reports.push(report);
    }
    let summary = aggregate(&reports).map_err(classify)?;

    fs::create_dir_all(&cfg.output).map_err(|e| Failure::Other(Error::file(&cfg.output, e)))?;
    for r in &reports {
        write_report(r, &report_path(&cfg.output, r.config.seed)).map_err(Failure::Other)?;
    }
    let agg_path = cfg.output.join(AGGREGATE_FILE);
    fs::write(&agg_path, summary.to_csv())
        .map_err(|e| Failure::Other(Error::file(&agg_path, e)))?;
    println!("{}", summary_line(&summary));
    Ok(())
}

pub fn summary_line(a: &Aggregate) -> String {
    let mut line = format!(
        "runs={} accuracy={:.2} ± {:.2}%",
        a.n_runs,
        100.0 * a.final_accuracy_mean,
        100.0 * a.final_accuracy_std
    );
    if let (Some(m), Some(s)) = (a.forgetting_mean, a.forgetting_std) {
        line.push_str(&format!(" forgetting={:.2} ± {:.2}%", 100.0 * m, 100.0 * s));
    }
    line
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let opts = GradcheckOptions {
        instances: args.instances,
        seed: args.seed,
        sigmas: args.sigmas.clone(),
        iterations: args.iterations,
        corrupt_backward: args.corrupt_backward,
        ..GradcheckOptions::default()
    };
    if opts.instances == 0 || opts.iterations == 0 || opts.sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Failure::Config(Error::InvalidConfig(
            "instances and iterations must be positive, sigmas must be positive".into(),
        )));
    }
    let outcomes = run_gradchecks(&opts).map_err(Failure::Other)?;
    for o in &outcomes {
        println!("{o}");
        if o.skipped_full_kappa > 0 {
            println!(
                "  note: {} draws with kappa = N skipped (every classifier selected, nothing to differentiate)",
                o.skipped_full_kappa
            );
        }
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} gradient checks",
            outcomes.len()
        )));
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        n_classes: args.classes,
        embed_dim: args.dim,
        per_class: args.per_class,
        center_norm: args.norm,
        noise_std: args.noise,
        seed: args.seed,
    };
    let (train, test) =
        generate_synthetic_split::<f64>(&spec, args.test_per_class).map_err(Failure::Config)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::Other(Error::file(&args.out, e)))?;
    for (ds, name) in [(&train, "train.embd"), (&test, "test.embd")] {
        let path = args.out.join(name);
        save_embeddings(ds, &path).map_err(Failure::Other)?;
        load_embeddings::<f64>(&path).map_err(Failure::Data)?;
        println!(
            "{}: {} examples, M={}, K={}",
            path.display(),
            ds.len(),
            ds.embed_dim(),
            ds.n_classes()
        );
    }
    Ok(())
}

/// Report files named directly, plus every `*.json` inside named directories.
pub fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::Data(Error::file(p, e)))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Failure::Data(Error::InvalidConfig(
            "no report files found".into(),
        )));
    }
    Ok(out)
}

pub fn cmd_aggregate(args: &AggregateArgs) -> Result<(), Failure> {
    let paths = collect_reports(&args.reports)?;
    let reports = paths
        .iter()
        .map(|p| read_report::<serde_json::Value>(p).map_err(Failure::Data))
        .collect::<Result<Vec<ExperimentReport<serde_json::Value>>, _>>()?;
    let summary = aggregate(&reports).map_err(Failure::Data)?;
    match &args.out {
        Some(path) => {
            fs::write(path, summary.to_csv()).map_err(|e| Failure::Other(Error::file(path, e)))?;
            println!("{}", summary_line(&summary));
        }
        None => print!("{}", summary.to_csv()),
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Aggregate(a) => cmd_aggregate(a),
    }
}

/// Parses `args` and runs the command, reporting errors on stderr.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
