//! Bags, datasets, the MIL-CSV file format, standardization and
//! stratified fold assignment.
//!
//! MIL-CSV is UTF-8 text with one instance per line:
//!
//! ```text
//! # comment
//! bag_id,label,d=3
//! mol_1,1,0.5,1.25,-3
//! mol_1,1,0.25,1.5,-2
//! mol_2,0,0.0,0.75,4
//! ```
//!
//! The header is mandatory and fixes the feature count. Labels are 0/1 on every
//! line and must agree within a bag. Bags keep the order in which their id
//! first appears.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Features with a population standard deviation below this are left as-is.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    id: String,
    label: u8,
    instances: Matrix,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: u8, instances: Matrix) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains([',', '\n', '\r']) {
            return Err(Error::data(format!("invalid bag id {id:?}")));
        }
        if label > 1 {
            return Err(Error::data(format!("bag {id}: label must be 0 or 1, got {label}")));
        }
        if instances.rows() == 0 {
            return Err(Error::data(format!("bag {id} has zero instances")));
        }
        if instances.cols() == 0 {
            return Err(Error::data(format!("bag {id} has zero features")));
        }
        if !instances.is_finite() {
            return Err(Error::data(format!("bag {id} has non-finite features")));
        }
        Ok(Bag { id, label, instances })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    /// One row per instance.
    pub fn instances(&self) -> &Matrix {
        &self.instances
    }

    pub fn instance_count(&self) -> usize {
        self.instances.rows()
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    name: String,
    dim: usize,
    bags: Vec<Bag>,
}

impl BagDataset {
    pub fn new(name: impl Into<String>, bags: Vec<Bag>) -> Result<Self> {
        let name = name.into();
        let dim = bags
            .first()
            .ok_or_else(|| Error::data(format!("dataset '{name}' has no bags")))?
            .dim();
        let mut seen = HashSet::new();
        for bag in &bags {
            if bag.dim() != dim {
                return Err(Error::data(format!(
                    "bag {} has {} features, dataset '{name}' has {dim}",
                    bag.id(),
                    bag.dim()
                )));
            }
            if !seen.insert(bag.id()) {
                return Err(Error::data(format!("duplicate bag id {}", bag.id())));
            }
        }
        Ok(BagDataset { name, dim, bags })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.bags.iter().filter(|b| b.label() == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn instance_count(&self) -> usize {
        self.bags.iter().map(Bag::instance_count).sum()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.bags.iter().map(Bag::label).collect()
    }

    /// Bags at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<BagDataset> {
        BagDataset::new(
            self.name.clone(),
            indices.iter().map(|&i| self.bags[i].clone()).collect(),
        )
    }
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses MIL-CSV text. `name` labels the dataset and error messages.
pub fn parse_milcsv(text: &str, name: &str) -> Result<BagDataset> {
    let mut dim: Option<usize> = None;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<(String, u8, Vec<f64>, usize)> = Vec::new();
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(d) = dim else {
            let header_dim = match fields.as_slice() {
                ["bag_id", "label", d] => d
                    .strip_prefix("d=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .filter(|&v| v > 0),
                _ => None,
            };
            dim = Some(header_dim.ok_or_else(|| {
                parse_err(
                    name,
                    lineno,
                    format!("expected header 'bag_id,label,d=<dim>', found '{line}'"),
                )
            })?);
            continue;
        };
        if fields.len() != d + 2 {
            return Err(parse_err(
                name,
                lineno,
                format!(
                    "expected {} fields (bag_id, label, {d} features), found {}",
                    d + 2,
                    fields.len()
                ),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(parse_err(name, lineno, "empty bag id"));
        }
        let label = match fields[1] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(parse_err(
                    name,
                    lineno,
                    format!("label must be 0 or 1, found '{other}'"),
                ))
            }
        };
        let slot = match index.get(id) {
            Some(&slot) => {
                if groups[slot].1 != label {
                    return Err(parse_err(
                        name,
                        lineno,
                        format!("bag {id} has label {label} here but {} earlier", groups[slot].1),
                    ));
                }
                slot
            }
            None => {
                index.insert(id.to_string(), groups.len());
                groups.push((id.to_string(), label, Vec::new(), 0));
                groups.len() - 1
            }
        };
        let group = &mut groups[slot];
        for (k, f) in fields[2..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(name, lineno, format!("feature {} is not a number: '{f}'", k + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(
                    name,
                    lineno,
                    format!("feature {} is not finite: '{f}'", k + 1),
                ));
            }
            group.2.push(v);
        }
        group.3 += 1;
    }

    let Some(d) = dim else {
        return Err(parse_err(
            name,
            last_line.max(1),
            "empty file: missing 'bag_id,label,d=<dim>' header",
        ));
    };
    if groups.is_empty() {
        return Err(parse_err(name, last_line.max(1), "no instance lines after the header"));
    }
    let bags = groups
        .into_iter()
        .map(|(id, label, values, m)| Bag::new(id, label, Matrix::from_vec(m, d, values)?))
        .collect::<Result<Vec<_>>>()?;
    BagDataset::new(name, bags)
}

/// Reads a MIL-CSV file; the dataset is named after the file stem.
pub fn load_milcsv(path: impl AsRef<Path>) -> Result<BagDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_milcsv(&text, &name)
}

/// Renders a dataset as MIL-CSV. Features use the shortest representation
/// that parses back to the same `f64`.
pub fn write_milcsv(ds: &BagDataset) -> String {
    let mut out = format!("bag_id,label,d={}\n", ds.dim());
    for bag in ds.bags() {
        for row in bag.instances().iter_rows() {
            out.push_str(bag.id());
            out.push(',');
            out.push_str(if bag.label() == 1 { "1" } else { "0" });
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_milcsv(ds: &BagDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_milcsv(ds)).map_err(|e| Error::io(path, e))
}

/// Per-feature z-scoring with statistics from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation over every training instance.
    pub fn fit(train: &BagDataset) -> Standardizer {
        let d = train.dim();
        let n = train.instance_count() as f64;
        let mut mean = vec![0.0; d];
        for bag in train.bags() {
            for row in bag.instances().iter_rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for bag in train.bags() {
            for row in bag.instances().iter_rows() {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let mut scale = vec![1.0; d];
        for k in 0..d {
            let std = (var[k] / n).sqrt();
            if std < MIN_STD {
                mean[k] = 0.0;
            } else {
                scale[k] = std;
            }
        }
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "standardizer fitted on {} features applied to {}",
                self.dim(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &BagDataset) -> Result<BagDataset> {
        let bags = ds
            .bags()
            .iter()
            .map(|b| Bag::new(b.id(), b.label(), self.apply_matrix(b.instances())?))
            .collect::<Result<Vec<_>>>()?;
        BagDataset::new(ds.name(), bags)
    }
}

/// Fits on `train` and transforms `apply_to`.
pub fn standardize(train: &BagDataset, apply_to: &BagDataset) -> Result<BagDataset> {
    if train.dim() != apply_to.dim() {
        return Err(Error::shape(format!(
            "cannot standardize {}-feature data with statistics from {} features",
            apply_to.dim(),
            train.dim()
        )));
    }
    Standardizer::fit(train).apply(apply_to)
}

/// Stratified fold assignments for repeated k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub repeats: usize,
    pub folds: usize,
    pub seed: u64,
    /// `assignments[r][i]` is the test fold of bag `i` in repeat `r`.
    pub assignments: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn bag_count(&self) -> usize {
        self.assignments.first().map_or(0, Vec::len)
    }

    pub fn test_indices(&self, repeat: usize, fold: usize) -> Vec<usize> {
        self.assignments[repeat]
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f == fold).then_some(i))
            .collect()
    }

    pub fn train_indices(&self, repeat: usize, fold: usize) -> Vec<usize> {
        self.assignments[repeat]
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f != fold).then_some(i))
            .collect()
    }
}

/// Shuffles positives and negatives separately (one RNG stream per repeat)
/// and deals them round-robin into folds; negatives continue the deal where
/// the positives stopped so fold sizes differ by at most one.
pub fn make_folds(ds: &BagDataset, repeats: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    if repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {folds}")));
    }
    let (pos, neg) = (ds.positives(), ds.negatives());
    if folds > pos || folds > neg {
        return Err(Error::data(format!(
            "{folds} stratified folds need at least {folds} bags of each class; '{}' has {pos} positive and {neg} negative",
            ds.name()
        )));
    }
    let mut assignments = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = Rng::with_stream(seed, r as u64);
        let mut positives: Vec<usize> = (0..ds.len()).filter(|&i| ds.bags()[i].label() == 1).collect();
        let mut negatives: Vec<usize> = (0..ds.len()).filter(|&i| ds.bags()[i].label() == 0).collect();
        rng.shuffle(&mut positives);
        rng.shuffle(&mut negatives);
        let mut fold_of = vec![0usize; ds.len()];
        for (slot, &i) in positives.iter().chain(&negatives).enumerate() {
            fold_of[i] = slot % folds;
        }
        assignments.push(fold_of);
    }
    Ok(FoldPlan {
        repeats,
        folds,
        seed,
        assignments,
    })
}
