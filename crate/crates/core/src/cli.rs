//! Command-line front end.
//!
//! Tables and models go to files and progress goes to stderr. Only `predict`
//! writes to stdout (one `bag_id<TAB>score<TAB>label` row per bag). Failures
//! print a single `error[<kind>]: <message>` line and exit with
//!
//! | code | meaning |
//! |------|---------|
//! | 2 | configuration or usage error |
//! | 3 | unreadable, malformed or mismatched data |
//! | 4 | numerical failure during training |
//! | 5 | gradient check failed |

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::data::{load_milcsv, make_folds, save_milcsv, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{
    emit_fold_table, emit_table, generate_synthetic, reports_to_json, run_cv, sweep, with_threads, CvReport, SweepAxis,
    SyntheticSpec, TableFormat,
};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::model_io::SavedModel;
use crate::network::{Fault, Network};
use crate::training::train;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "minet", version, about = "Multiple-instance neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on a whole dataset.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        /// Training trace (JSON); defaults to `<model-out>.trace.json`.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Score every bag of a dataset with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Repeated stratified k-fold cross-validation.
    Cv {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Cross-validate every value along one ablation axis on a shared fold plan.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Finite-difference check of every variant with every pooling method.
    Gradcheck {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Write a planted-signal dataset as MIL-CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        positives: usize,
        #[arg(long, default_value_t = 20)]
        negatives: usize,
        #[arg(long, default_value_t = 2)]
        min_instances: usize,
        #[arg(long, default_value_t = 8)]
        max_instances: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 5.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for cross-validation folds.
    #[arg(long)]
    threads: Option<usize>,
    /// Include wall-clock timings in written files.
    #[arg(long)]
    timings: bool,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report table; markdown when the name ends in `.md`, TSV otherwise.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_format)]
    format: Option<TableFormat>,
    /// Full machine-readable report.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl ReportArgs {
    fn format(&self) -> TableFormat {
        self.format.unwrap_or_else(|| {
            if self.out.extension().is_some_and(|e| e == "md") {
                TableFormat::Markdown
            } else {
                TableFormat::Tsv
            }
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    LseBackward,
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<TableFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Why a command stopped.
enum Failure {
    Error(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Parse { .. } | Error::Data(_) | Error::Io { .. } | Error::Shape(_) => EXIT_DATA,
        Error::Numerical(_) | Error::State(_) => EXIT_NUMERICAL,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {} (see --help)", first.trim_start_matches("error: "));
            return EXIT_CONFIG;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Error(e)) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            exit_code(&e)
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("error[gradcheck]: {msg}");
            EXIT_GRADCHECK
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Train {
            exp,
            data,
            model_out,
            trace_out,
        } => cmd_train(&exp, &data, &model_out, trace_out.as_deref()).map_err(Failure::from),
        Command::Predict { model, data } => cmd_predict(&model, &data).map_err(Failure::from),
        Command::Cv { exp, data, report } => cmd_cv(&exp, &data, &report).map_err(Failure::from),
        Command::Sweep {
            exp,
            data,
            axis,
            report,
        } => cmd_sweep(&exp, &data, axis, &report).map_err(Failure::from),
        Command::Gradcheck {
            exp,
            tolerance,
            inject_fault,
        } => cmd_gradcheck(&exp, tolerance, inject_fault),
        Command::Synth {
            out,
            positives,
            negatives,
            min_instances,
            max_instances,
            dim,
            magnitude,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                positives,
                negatives,
                min_instances,
                max_instances,
                dim,
                signal_dim: 0,
                magnitude,
                noise,
                seed,
            };
            let ds = generate_synthetic(&spec)?;
            save_milcsv(&ds, &out)?;
            eprintln!(
                "wrote {} bags ({} positive), {} instances, d={} to {}",
                ds.len(),
                ds.positives(),
                ds.instance_count(),
                ds.dim(),
                out.display()
            );
            Ok(())
        }
    }
}

fn cmd_train(exp: &ExperimentArgs, data: &Path, model_out: &Path, trace_out: Option<&Path>) -> Result<()> {
    let cfg = exp.load()?;
    let raw = load_milcsv(data)?;
    let standardizer = cfg.train.standardize.then(|| Standardizer::fit(&raw));
    let ds = match &standardizer {
        Some(z) => z.apply(&raw)?,
        None => raw,
    };
    let mut network = Network::build(&cfg.network, ds.dim())?;
    eprintln!(
        "training {} ({} parameters) on '{}': {} bags, {} epochs",
        cfg.network.variant,
        network.parameter_count(),
        ds.name(),
        ds.len(),
        cfg.train.epochs
    );
    let mut trace = with_threads(exp.threads, || train(&mut network, &ds, &cfg.train))??;
    let stride = (trace.epochs() / 10).max(1);
    for (e, (loss, acc)) in trace.epoch_loss.iter().zip(&trace.epoch_accuracy).enumerate() {
        if (e + 1) % stride == 0 || e + 1 == trace.epochs() {
            eprintln!("epoch {:>4}  loss {loss:.6}  train accuracy {acc:.4}", e + 1);
        }
    }
    eprintln!(
        "accuracy {:.4} over {} bags",
        trace.final_accuracy().unwrap_or(0.0),
        ds.len()
    );
    eprintln!("train time {:.4} ms/bag", trace.seconds_per_bag * 1e3);
    if !exp.timings {
        trace.seconds_per_bag = 0.0;
    }
    let model = SavedModel { network, standardizer };
    model.save(model_out)?;
    let trace_path = trace_out.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = model_out.as_os_str().to_owned();
        p.push(".trace.json");
        PathBuf::from(p)
    });
    let trace_json =
        serde_json::to_string_pretty(&trace).map_err(|e| Error::Data(format!("cannot serialize trace: {e}")))?;
    write_file(&trace_path, &(trace_json + "\n"))?;
    eprintln!("wrote {} and {}", model_out.display(), trace_path.display());
    Ok(())
}

fn cmd_predict(model_path: &Path, data: &Path) -> Result<()> {
    let model = SavedModel::load(model_path)?;
    let raw = load_milcsv(data)?;
    let ds = model.prepare(&raw)?;
    let mut rows = String::new();
    let mut correct = 0usize;
    let start = Instant::now();
    for bag in ds.bags() {
        let fwd = model.network.predict(bag.instances())?;
        let label = fwd.predicted_label();
        correct += usize::from(label == bag.label());
        rows.push_str(&format!("{}\t{:.6}\t{label}\n", bag.id(), fwd.bag_score));
    }
    let latency = start.elapsed().as_secs_f64() / ds.len() as f64;
    print!("{rows}");
    eprintln!(
        "accuracy {:.4} over {} bags",
        correct as f64 / ds.len() as f64,
        ds.len()
    );
    eprintln!("mean latency {:.4} ms/bag", latency * 1e3);
    Ok(())
}

fn finish_reports(reports: &mut [CvReport], exp: &ExperimentArgs, args: &ReportArgs, table: String) -> Result<()> {
    write_file(&args.out, &table)?;
    if let Some(json) = &args.json {
        if !exp.timings {
            reports.iter_mut().for_each(CvReport::clear_timings);
        }
        write_file(json, &(reports_to_json(reports)? + "\n"))?;
    }
    Ok(())
}

fn announce(report: &CvReport) {
    if report.failed_folds > 0 {
        eprintln!(
            "warning: {} of {} folds failed for {}",
            report.failed_folds,
            report.folds.len(),
            report.label
        );
    }
    eprintln!(
        "{:<24} accuracy {}  std {}  train {:.4} ms/bag  predict {:.4} ms/bag",
        report.label,
        report.mean_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
        report.std_over_repeats.map_or("n/a".into(), |s| format!("{s:.4}")),
        report.train_seconds_per_bag * 1e3,
        report.predict_seconds_per_bag * 1e3
    );
}

fn cmd_cv(exp: &ExperimentArgs, data: &Path, args: &ReportArgs) -> Result<()> {
    let cfg = exp.load()?;
    let ds = load_milcsv(data)?;
    let plan = make_folds(&ds, cfg.repeats, cfg.folds, cfg.train.seed)?;
    eprintln!(
        "{}x{}-fold cross-validation of {} on '{}' ({} bags)",
        cfg.repeats,
        cfg.folds,
        cfg.network.variant,
        ds.name(),
        ds.len()
    );
    let mut report = with_threads(exp.threads, || run_cv(&ds, &cfg.network, &cfg.train, &plan))??;
    announce(&report);
    if !exp.timings {
        report.clear_timings();
    }
    let table = emit_fold_table(&report, args.format());
    finish_reports(std::slice::from_mut(&mut report), exp, args, table)
}

fn cmd_sweep(exp: &ExperimentArgs, data: &Path, axis: SweepAxis, args: &ReportArgs) -> Result<()> {
    let cfg = exp.load()?;
    let ds = load_milcsv(data)?;
    let plan = make_folds(&ds, cfg.repeats, cfg.folds, cfg.train.seed)?;
    eprintln!("{axis} sweep from {} on '{}'", cfg.network.variant, ds.name());
    let mut reports = with_threads(exp.threads, || sweep(&ds, &cfg.network, &cfg.train, axis, &plan))??;
    reports.iter().for_each(announce);
    let table = emit_table(&reports, args.format(), exp.timings);
    finish_reports(&mut reports, exp, args, table)
}

fn cmd_gradcheck(exp: &ExperimentArgs, tolerance: f64, fault: Option<FaultArg>) -> std::result::Result<(), Failure> {
    let cfg = exp.load()?;
    let opts = GradcheckOptions {
        tolerance,
        seed: cfg.network.seed,
        lse_r: cfg.network.pooling.r,
        fault: fault.map(|FaultArg::LseBackward| Fault::LseBackward),
        ..GradcheckOptions::default()
    };
    let results = run_gradcheck(&opts)?;
    for r in &results {
        eprintln!("{r}");
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}", r.variant.name(), r.pooling.name()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(format!(
            "{} of {} combinations above tolerance {tolerance:e}: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )))
    }
}
