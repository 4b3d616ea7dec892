//! Cross-validation, synthetic data, ablation sweeps and result tables.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Bag, BagDataset, FoldPlan, Standardizer};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec, Variant};
use crate::numerics::{mix_seed, Matrix, Rng};
use crate::pooling::{PoolingMethod, PoolingSpec, DEFAULT_LSE_R};
use crate::training::{train, TrainConfig, TrainTrace};

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::data("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub network_seed: u64,
    pub train_bags: usize,
    pub test_bags: usize,
    /// `None` when training aborted; see `error`.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub train_seconds_per_bag: f64,
    pub predict_seconds_per_bag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub dataset: String,
    /// Name of the configuration within a sweep (defaults to the variant name).
    pub label: String,
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    /// Mean test accuracy over every fold that finished.
    pub mean_accuracy: Option<f64>,
    /// Sample standard deviation of the per-repeat mean accuracies.
    pub std_over_repeats: Option<f64>,
    pub failed_folds: usize,
    pub train_seconds_per_bag: f64,
    pub predict_seconds_per_bag: f64,
}

impl CvReport {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.accuracy).collect()
    }

    /// Zeroes every wall-clock field so that serialized output depends only on inputs.
    pub fn clear_timings(&mut self) {
        self.train_seconds_per_bag = 0.0;
        self.predict_seconds_per_bag = 0.0;
        for f in &mut self.folds {
            f.train_seconds_per_bag = 0.0;
            f.predict_seconds_per_bag = 0.0;
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool for `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::config("thread count must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// What one cross-validation fold trained, before evaluation.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub network: Network,
    /// Fitted on the fold's training bags; `None` when standardization is off.
    pub standardizer: Option<Standardizer>,
    pub trace: TrainTrace,
    pub test_set: BagDataset,
}

/// Trains the network of fold `(repeat, fold)` of `plan` and returns it with
/// the (standardized) test bags.
pub fn fit_fold(
    ds: &BagDataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    repeat: usize,
    fold: usize,
) -> Result<FoldModel> {
    let tags = [repeat as u64, fold as u64];
    let fold_spec = spec.clone().with_seed(mix_seed(spec.seed, &tags));
    let fold_cfg = TrainConfig {
        seed: mix_seed(cfg.seed, &tags),
        ..cfg.clone()
    };
    let mut train_set = ds.subset(&plan.train_indices(repeat, fold))?;
    let mut test_set = ds.subset(&plan.test_indices(repeat, fold))?;
    let standardizer = cfg.standardize.then(|| Standardizer::fit(&train_set));
    if let Some(z) = &standardizer {
        train_set = z.apply(&train_set)?;
        test_set = z.apply(&test_set)?;
    }
    let mut network = Network::build(&fold_spec, ds.dim())?;
    let trace = train(&mut network, &train_set, &fold_cfg)?;
    Ok(FoldModel {
        network,
        standardizer,
        trace,
        test_set,
    })
}

fn run_fold(
    ds: &BagDataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    repeat: usize,
    fold: usize,
) -> FoldResult {
    let mut result = FoldResult {
        repeat,
        fold,
        network_seed: mix_seed(spec.seed, &[repeat as u64, fold as u64]),
        train_bags: plan.train_indices(repeat, fold).len(),
        test_bags: plan.test_indices(repeat, fold).len(),
        accuracy: None,
        error: None,
        train_seconds_per_bag: 0.0,
        predict_seconds_per_bag: 0.0,
    };
    let outcome = (|| -> Result<(f64, f64, f64)> {
        let model = fit_fold(ds, spec, cfg, plan, repeat, fold)?;
        let start = Instant::now();
        let predictions = model
            .test_set
            .bags()
            .iter()
            .map(|b| model.network.predict(b.instances()).map(|f| f.predicted_label()))
            .collect::<Result<Vec<_>>>()?;
        let predict = start.elapsed().as_secs_f64() / model.test_set.len() as f64;
        let acc = accuracy(&predictions, &model.test_set.labels())?;
        Ok((acc, model.trace.seconds_per_bag, predict))
    })();
    match outcome {
        Ok((acc, train_s, predict_s)) => {
            result.accuracy = Some(acc);
            result.train_seconds_per_bag = train_s;
            result.predict_seconds_per_bag = predict_s;
        }
        Err(e) => result.error = Some(format!("{}: {e}", e.kind())),
    }
    result
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Repeated k-fold cross-validation. Folds run in parallel on the current
/// rayon pool; each fold standardizes on its training bags only and builds a
/// network seeded from `(seed, repeat, fold)`. Folds whose training fails are
/// recorded and left out of the aggregates.
pub fn run_cv(ds: &BagDataset, spec: &NetworkSpec, cfg: &TrainConfig, plan: &FoldPlan) -> Result<CvReport> {
    spec.validate()?;
    cfg.validate()?;
    if plan.bag_count() != ds.len() {
        return Err(Error::data(format!(
            "fold plan covers {} bags, dataset '{}' has {}",
            plan.bag_count(),
            ds.name(),
            ds.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..plan.repeats)
        .flat_map(|r| (0..plan.folds).map(move |f| (r, f)))
        .collect();
    let folds: Vec<FoldResult> = jobs
        .par_iter()
        .map(|&(r, f)| run_fold(ds, spec, cfg, plan, r, f))
        .collect();

    let accs: Vec<f64> = folds.iter().filter_map(|f| f.accuracy).collect();
    let repeat_means: Vec<f64> = (0..plan.repeats)
        .filter_map(|r| {
            let xs: Vec<f64> = folds
                .iter()
                .filter(|f| f.repeat == r)
                .filter_map(|f| f.accuracy)
                .collect();
            mean(&xs)
        })
        .collect();
    let std_over_repeats = match repeat_means.len() {
        0 => None,
        1 => Some(0.0),
        n => {
            let m = mean(&repeat_means).unwrap();
            Some((repeat_means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
        }
    };
    let ok: Vec<&FoldResult> = folds.iter().filter(|f| f.accuracy.is_some()).collect();
    let train_s: Vec<f64> = ok.iter().map(|f| f.train_seconds_per_bag).collect();
    let predict_s: Vec<f64> = ok.iter().map(|f| f.predict_seconds_per_bag).collect();
    Ok(CvReport {
        dataset: ds.name().to_string(),
        label: spec.variant.name().to_string(),
        spec: spec.clone(),
        config: cfg.clone(),
        plan: plan.clone(),
        failed_folds: folds.len() - ok.len(),
        mean_accuracy: mean(&accs),
        std_over_repeats,
        train_seconds_per_bag: mean(&train_s).unwrap_or(0.0),
        predict_seconds_per_bag: mean(&predict_s).unwrap_or(0.0),
        folds,
    })
}

/// Planted-signal generator: every coordinate is uniform noise in
/// `[-noise, noise]`, and in each positive bag at least one instance gets
/// `magnitude` added to coordinate `signal_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub positives: usize,
    pub negatives: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    pub signal_dim: usize,
    pub magnitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            positives: 20,
            negatives: 20,
            min_instances: 2,
            max_instances: 8,
            dim: 20,
            signal_dim: 0,
            magnitude: 5.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.positives + self.negatives == 0 {
            return Err(Error::config("synthetic dataset needs at least one bag"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::config(format!(
                "instance range {}..={} is empty or starts at 0",
                self.min_instances, self.max_instances
            )));
        }
        if self.dim == 0 || self.signal_dim >= self.dim {
            return Err(Error::config(format!(
                "signal coordinate {} outside dimension {}",
                self.signal_dim, self.dim
            )));
        }
        if !(self.magnitude.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("magnitude and noise must be finite, noise >= 0"));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<BagDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut labels: Vec<u8> = std::iter::repeat_n(1, spec.positives)
        .chain(std::iter::repeat_n(0, spec.negatives))
        .collect();
    rng.shuffle(&mut labels);
    let width = (labels.len() - 1).to_string().len();
    let bags = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let m = rng.int_inclusive(spec.min_instances, spec.max_instances);
            let mut x = Matrix::zeros(m, spec.dim);
            for v in x.as_mut_slice() {
                *v = rng.uniform(-spec.noise, spec.noise);
            }
            if label == 1 {
                let mut rows: Vec<usize> = (0..m).collect();
                rng.shuffle(&mut rows);
                let planted = rng.int_inclusive(1, m.div_ceil(2));
                for &r in &rows[..planted] {
                    x.row_mut(r)[spec.signal_dim] += spec.magnitude;
                }
            }
            Bag::new(format!("bag_{i:0width$}"), label, x)
        })
        .collect::<Result<Vec<_>>>()?;
    BagDataset::new("synthetic", bags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Pooling,
    DsOnOff,
    RcOnOff,
    Widths,
    Depth,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Pooling,
        SweepAxis::DsOnOff,
        SweepAxis::RcOnOff,
        SweepAxis::Widths,
        SweepAxis::Depth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Pooling => "pooling",
            SweepAxis::DsOnOff => "ds_on_off",
            SweepAxis::RcOnOff => "rc_on_off",
            SweepAxis::Widths => "widths",
            SweepAxis::Depth => "depth",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown sweep axis '{s}' (expected pooling, ds_on_off, rc_on_off, widths or depth)"
                ))
            })
    }
}

/// Layer structures compared for the embedded-space variants.
pub const STRUCTURES: [&[usize]; 8] = [
    &[256, 256, 256, 1],
    &[256, 256, 128, 1],
    &[256, 128, 64, 1],
    &[128, 128, 128, 1],
    &[128, 128, 64, 1],
    &[64, 64, 64, 1],
    &[256, 256, 128, 128, 64, 1],
    &[256, 256, 256, 256, 256, 1],
];

/// Hidden widths tried by the residual width sweep (three hidden layers).
pub const RC_WIDTHS: [usize; 4] = [32, 64, 128, 256];

/// Hidden layer counts tried by the residual depth sweep.
pub const RC_DEPTHS: [usize; 4] = [2, 3, 4, 5];

pub fn structure_label(widths: &[usize]) -> String {
    let parts: Vec<String> = widths.iter().map(usize::to_string).collect();
    format!("({})", parts.join(","))
}

fn variant_swap(base: &NetworkSpec, variant: Variant, widths: Vec<usize>) -> NetworkSpec {
    let mut spec = base.clone();
    spec.variant = variant;
    spec.widths = widths;
    if spec.ds_weights.len() != spec.head_count() {
        spec.ds_weights.clear();
    }
    spec
}

/// The labelled specs visited by a sweep along `axis`.
pub fn sweep_specs(base: &NetworkSpec, axis: SweepAxis) -> Result<Vec<(String, NetworkSpec)>> {
    base.validate()?;
    let restructure = |widths: Vec<usize>| -> Result<NetworkSpec> {
        let mut spec = base.clone();
        spec.widths = widths;
        if !spec.ds_weights.is_empty() && spec.ds_weights.len() != spec.head_count() {
            return Err(Error::config(format!(
                "{} ds_weights cannot follow a structure sweep; leave ds_weights unset",
                spec.ds_weights.len()
            )));
        }
        Ok(spec)
    };
    let specs = match axis {
        SweepAxis::Pooling => {
            let r = match base.pooling.method {
                PoolingMethod::Lse => base.pooling.r,
                _ => DEFAULT_LSE_R,
            };
            vec![PoolingSpec::max(), PoolingSpec::mean(), PoolingSpec::lse(r)?]
                .into_iter()
                .map(|p| (p.method.name().to_string(), base.clone().with_pooling(p)))
                .collect()
        }
        SweepAxis::DsOnOff => match base.variant {
            Variant::MINet | Variant::MINetDs => vec![
                (
                    Variant::MINet.name().to_string(),
                    variant_swap(base, Variant::MINet, base.widths.clone()),
                ),
                (
                    Variant::MINetDs.name().to_string(),
                    variant_swap(base, Variant::MINetDs, base.widths.clone()),
                ),
            ],
            v => {
                return Err(Error::config(format!(
                    "ds_on_off sweep needs variant MI-Net or MI-Net+DS, got {v}"
                )))
            }
        },
        SweepAxis::RcOnOff => {
            let (plain, residual) = match base.variant {
                Variant::MINet => (base.widths.clone(), Variant::MINetRc.default_widths()),
                Variant::MINetRc => (Variant::MINet.default_widths(), base.widths.clone()),
                v => {
                    return Err(Error::config(format!(
                        "rc_on_off sweep needs variant MI-Net or MI-Net+RC, got {v}"
                    )))
                }
            };
            vec![
                (
                    Variant::MINet.name().to_string(),
                    variant_swap(base, Variant::MINet, plain),
                ),
                (
                    Variant::MINetRc.name().to_string(),
                    variant_swap(base, Variant::MINetRc, residual),
                ),
            ]
        }
        SweepAxis::Widths | SweepAxis::Depth if base.variant == Variant::MINetRc => {
            let structures: Vec<Vec<usize>> = if axis == SweepAxis::Widths {
                RC_WIDTHS.iter().map(|&w| vec![w, w, w, 1]).collect()
            } else {
                let w = base.hidden_widths()[0];
                RC_DEPTHS
                    .iter()
                    .map(|&n| std::iter::repeat_n(w, n).chain([1]).collect())
                    .collect()
            };
            structures
                .into_iter()
                .map(|w| Ok((structure_label(&w), restructure(w)?)))
                .collect::<Result<Vec<_>>>()?
        }
        SweepAxis::Widths | SweepAxis::Depth => STRUCTURES
            .iter()
            .map(|w| Ok((structure_label(w), restructure(w.to_vec())?)))
            .collect::<Result<Vec<_>>>()?,
    };
    for (_, spec) in &specs {
        spec.validate()?;
    }
    Ok(specs)
}

/// One cross-validation per axis value, all on the same fold plan.
pub fn sweep(
    ds: &BagDataset,
    base: &NetworkSpec,
    cfg: &TrainConfig,
    axis: SweepAxis,
    plan: &FoldPlan,
) -> Result<Vec<CvReport>> {
    let reports = sweep_specs(base, axis)?
        .into_iter()
        .map(|(label, spec)| {
            let mut report = run_cv(ds, &spec, cfg, plan)?;
            report.label = label;
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    assert!(
        reports.iter().all(|r| &r.plan == plan),
        "sweep reports must share one fold plan"
    );
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Tsv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tsv" => Ok(TableFormat::Tsv),
            "md" | "markdown" => Ok(TableFormat::Markdown),
            other => Err(Error::config(format!(
                "unknown table format '{other}' (expected tsv or markdown)"
            ))),
        }
    }
}

fn render(rows: &[Vec<String>], format: TableFormat) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        match format {
            TableFormat::Tsv => out.push_str(&row.join("\t")),
            TableFormat::Markdown => {
                out.push_str("| ");
                out.push_str(&row.join(" | "));
                out.push_str(" |");
            }
        }
        out.push('\n');
        if i == 0 && format == TableFormat::Markdown {
            out.push('|');
            out.push_str(&"---|".repeat(row.len()));
            out.push('\n');
        }
    }
    out
}

fn pooling_label(p: &PoolingSpec) -> String {
    match p.method {
        PoolingMethod::Lse => format!("lse(r={})", p.r),
        m => m.name().to_string(),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Summary table with one row per report. Timing columns (milliseconds per
/// bag) are included only when `timings` is set.
pub fn emit_table(reports: &[CvReport], format: TableFormat, timings: bool) -> String {
    let mut header: Vec<String> = [
        "dataset", "config", "variant", "widths", "pooling", "accuracy", "std", "failed",
    ]
    .map(String::from)
    .to_vec();
    if timings {
        header.extend(["train_ms_per_bag", "predict_ms_per_bag"].map(String::from));
    }
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![
            r.dataset.clone(),
            r.label.clone(),
            r.spec.variant.name().to_string(),
            structure_label(&r.spec.widths),
            pooling_label(&r.spec.pooling),
            fmt_opt(r.mean_accuracy),
            fmt_opt(r.std_over_repeats),
            r.failed_folds.to_string(),
        ];
        if timings {
            row.push(format!("{:.4}", r.train_seconds_per_bag * 1e3));
            row.push(format!("{:.4}", r.predict_seconds_per_bag * 1e3));
        }
        rows.push(row);
    }
    render(&rows, format)
}

/// Per-fold table for one report followed by a single summary row.
pub fn emit_fold_table(report: &CvReport, format: TableFormat) -> String {
    let mut rows = vec![["repeat", "fold", "test_bags", "accuracy", "status"]
        .map(String::from)
        .to_vec()];
    for f in &report.folds {
        rows.push(vec![
            f.repeat.to_string(),
            f.fold.to_string(),
            f.test_bags.to_string(),
            fmt_opt(f.accuracy),
            f.error
                .clone()
                .map_or_else(|| "ok".to_string(), |e| format!("failed: {e}")),
        ]);
    }
    rows.push(vec![
        "mean".to_string(),
        "all".to_string(),
        report.folds.iter().map(|f| f.test_bags).sum::<usize>().to_string(),
        fmt_opt(report.mean_accuracy),
        format!(
            "std={} failed={}",
            fmt_opt(report.std_over_repeats),
            report.failed_folds
        ),
    ]);
    render(&rows, format)
}

pub fn reports_to_json(reports: &[CvReport]) -> Result<String> {
    serde_json::to_string_pretty(reports).map_err(|e| Error::Data(format!("cannot serialize reports: {e}")))
}

pub fn reports_from_json(text: &str) -> Result<Vec<CvReport>> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        source_name: "report".into(),
        line: e.line(),
        message: e.to_string(),
    })
}
