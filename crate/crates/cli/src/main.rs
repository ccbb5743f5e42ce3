//! `alc`: generate synthetic catalogs, train, evaluate, check gradients and
//! rebuild score histograms.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the command
//! itself fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use alc_core::data_io::{self, atomic_write, RunConfig, Split, SyntheticSpec};
use alc_core::evaluation::{self, EvalReport, DEFAULT_BINS};
use alc_core::gradsuite;
use alc_core::trainer::{self, Checkpoint};
use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

const CHECKPOINT_FILE: &str = "checkpoint.alc";
const LOG_FILE: &str = "train_log.jsonl";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(
    name = "alc",
    version,
    about = "Bi-encoder training with auxiliary pair classifiers and coverage evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic product catalog with train and test queries.
    GenerateData(GenerateArgs),
    /// Train a model and write its checkpoint and per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: P@1, C@1 at a target precision, histogram.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Rebuild the score histogram from a scores file.
    Histogram(HistogramArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Spec file (`key = value`); exclusive with the sizing flags.
    #[arg(long, conflicts_with_all = ["num_labels", "num_queries", "seed"])]
    spec: Option<PathBuf>,
    #[arg(long)]
    num_labels: Option<usize>,
    /// Training queries; a quarter as many test queries are added.
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target_precision: f64,
    #[arg(long)]
    report: PathBuf,
    /// Also write per-query top-1 scores as TSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Split the C@1 threshold is chosen on; defaults to the evaluated one.
    #[arg(long, value_enum)]
    calibration_split: Option<SplitArg>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Runs one command; `Ok(false)` is a completed check that did not pass.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenerateData(a) => generate_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Histogram(a) => histogram(a).map(|_| true),
    }
}

fn generate_data(a: GenerateArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => data_io::load_spec(path)?,
        None => {
            let mut spec = SyntheticSpec::default();
            if let Some(n) = a.num_labels {
                spec.num_labels = n;
            }
            if let Some(m) = a.num_queries {
                spec.num_train_queries = m;
                spec.num_test_queries = m / 4;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            spec
        }
    };
    let data = data_io::generate(&spec)?;
    data_io::write_dataset(&a.out, &data)?;
    info!(
        "wrote {} labels, {} train and {} test queries to {}",
        data.labels.len(),
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let run = RunConfig::load(&a.config)?;
    let Some(data) = a.data.or(run.data.clone()) else {
        bail!(
            "no dataset directory: pass --data or set `data` in {}",
            a.config.display()
        );
    };
    let Some(out) = a.out.or(run.out.clone()) else {
        bail!(
            "no output directory: pass --out or set `out` in {}",
            a.config.display()
        );
    };
    let dataset = data_io::load_split(&data, Split::Train)?;
    info!(
        "training on {} queries over {} labels ({} epochs, sampler {})",
        dataset.queries.len(),
        dataset.labels.len(),
        run.train.epochs,
        run.train.sampler
    );
    let started = Instant::now();
    let outcome = trainer::train(&dataset, &run.train)?;
    if let Some(last) = outcome.log.last() {
        info!(
            "done in {:.1?}: final epoch loss {:.4} (base {:.4}, tcm {:.4}, xe_ql {:.4}, xe_qb {:.4})",
            started.elapsed(),
            last.total,
            last.base,
            last.tcm,
            last.xe_ql,
            last.xe_qb
        );
    }
    let s = &outcome.stats;
    info!(
        "{} steps ({} skipped), {} blockings ({} shrunk), {} queries without a usable pair",
        s.steps, s.skipped_steps, s.blockings, s.shrunk_blockings, s.skipped_queries
    );

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(LOG_FILE), &trainer::log_to_jsonl(&outcome.log))?;
    let resolved = RunConfig {
        train: run.train,
        data: Some(data),
        out: Some(out.clone()),
    };
    write(&out.join(CONFIG_FILE), &resolved.render())?;
    info!("wrote {}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.target_precision > 0.0 && a.target_precision <= 1.0) {
        bail!(
            "--target-precision must lie in (0, 1], got {}",
            a.target_precision
        );
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model();
    let split = Split::from(a.split);
    let dataset = data_io::load_split(&a.data, split)?;
    let preds = evaluation::predict(&model, &ckpt.params, &dataset)?;
    let report = match a.calibration_split.map(Split::from) {
        Some(cal) if cal != split => {
            let cal_set = data_io::load_split(&a.data, cal)?;
            let cal_preds = evaluation::predict(&model, &ckpt.params, &cal_set)?;
            EvalReport::calibrated(&preds, &cal_preds, a.target_precision, a.bins)?
        }
        _ => EvalReport::new(&preds, a.target_precision, a.bins)?,
    };
    info!(
        "P@1 {:.4}  C@1 {:.4} at target {} (threshold {})  overlap {:.4}",
        report.p_at_1,
        report.c_at_1,
        report.target_precision,
        report
            .threshold
            .map_or("none".to_string(), |t| format!("{t:.6}")),
        report.histogram.overlap
    );
    if let Some(path) = &a.scores {
        write(path, &evaluation::write_scores(&preds))?;
    }
    write(&a.report, &report.to_json())?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    if !(a.tol > 0.0) {
        bail!("--tol must be positive, got {}", a.tol);
    }
    let mut worst = 0.0_f64;
    let mut pass = true;
    for kernel in gradsuite::KERNELS {
        let r = gradsuite::check_kernel(kernel, a.seed, a.tol)?;
        println!(
            "{kernel:<14} max rel err {:.3e}  ({} coords)",
            r.max_relative_error, r.checked
        );
        worst = worst.max(r.max_relative_error);
        pass &= r.pass;
    }
    let r = gradsuite::check_total_loss(a.seed, a.tol)?;
    println!(
        "{:<14} max rel err {:.3e}  ({} coords, {} skipped at kinks)",
        "total_loss", r.max_relative_error, r.checked, r.skipped
    );
    if let (false, Some(c)) = (r.pass, &r.worst) {
        println!(
            "  worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            c.param, c.index, c.analytic, c.numeric
        );
    }
    worst = worst.max(r.max_relative_error);
    pass &= r.pass;
    println!(
        "max relative error {worst:.3e} (tol {:e}): {}",
        a.tol,
        if pass { "ok" } else { "FAILED" }
    );
    Ok(pass)
}

fn histogram(a: HistogramArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
    let preds = evaluation::read_scores(&text).with_context(|| a.scores.display().to_string())?;
    let hist = evaluation::score_histogram(&preds, a.bins)?;
    let json = serde_json::to_string_pretty(&hist)? + "\n";
    write(&a.out, &json)?;
    info!("overlap {:.4} over {} rows", hist.overlap, preds.len());
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    atomic_write(path, contents.as_bytes()).with_context(|| format!("writing {}", path.display()))
}
