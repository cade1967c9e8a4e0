//! Shared data model and the text formats every stage reads and writes.
//!
//! Numeric files are CSV with 17-significant-digit values. Matrices carry
//! row ids in the first column and column ids in the header row; vectors are
//! a single CSV line. Lines starting with `#` are comments.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{content_lines, fmt_f64, parse_f64, read_text, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub model_id: String,
    pub param_count: u64,
    pub layer_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_graph: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_id: String,
    pub class_count: usize,
    pub sample_count: usize,
    /// model_id -> forward-feature CSV.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub feature_files: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_file: Option<PathBuf>,
    /// Filled from `proxy_file` on load when not given inline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_embedding: Option<Vec<f64>>,
    /// model_id -> fine-tuned accuracy in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<BTreeMap<String, f64>>,
}

/// Repository manifest: one JSON document listing models and tasks, with
/// file references relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub models: Vec<ModelRecord>,
    pub tasks: Vec<TaskRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(models: Vec<ModelRecord>, tasks: Vec<TaskRecord>) -> Result<Self> {
        let m = Manifest {
            models,
            tasks,
            root: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Loads and validates a manifest, resolving proxy embeddings from their
    /// files. Feature files are never opened here.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        for t in &mut m.tasks {
            if t.proxy_embedding.is_none() {
                if let Some(p) = &t.proxy_file {
                    let full = m.root.join(p);
                    t.proxy_embedding = Some(load_vector(&full)?);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn validate(&self) -> Result<()> {
        let mut model_ids = BTreeSet::new();
        for m in &self.models {
            if m.model_id.is_empty() {
                return Err(Error::invalid("model_id", "empty id"));
            }
            if !model_ids.insert(m.model_id.as_str()) {
                return Err(Error::invalid(
                    "model_id",
                    format!("duplicate model_id {}", m.model_id),
                ));
            }
        }
        let mut task_ids = BTreeSet::new();
        for t in &self.tasks {
            if t.task_id.is_empty() {
                return Err(Error::invalid("task_id", "empty id"));
            }
            if !task_ids.insert(t.task_id.as_str()) {
                return Err(Error::invalid(
                    "task_id",
                    format!("duplicate task_id {}", t.task_id),
                ));
            }
            if t.class_count == 0 || t.sample_count == 0 {
                return Err(Error::invalid(
                    format!("tasks.{}", t.task_id),
                    "class_count and sample_count must be positive",
                ));
            }
            for mid in t.feature_files.keys() {
                if !model_ids.contains(mid.as_str()) {
                    return Err(Error::invalid(
                        format!("tasks.{}.feature_files", t.task_id),
                        format!("dangling model reference {mid}"),
                    ));
                }
            }
            if let Some(gt) = &t.ground_truth {
                for (mid, acc) in gt {
                    if !model_ids.contains(mid.as_str()) {
                        return Err(Error::invalid(
                            format!("tasks.{}.ground_truth", t.task_id),
                            format!("dangling model reference {mid}"),
                        ));
                    }
                    if !(0.0..=1.0).contains(acc) {
                        return Err(Error::invalid(
                            format!("tasks.{}.ground_truth.{mid}", t.task_id),
                            format!("accuracy {acc} outside [0, 1]"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn model(&self, id: &str) -> Option<&ModelRecord> {
        self.models.iter().find(|m| m.model_id == id)
    }

    pub fn task(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.iter().map(|m| m.model_id.clone()).collect()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn feature_path(&self, task_id: &str, model_id: &str) -> Option<PathBuf> {
        self.task(task_id)?
            .feature_files
            .get(model_id)
            .map(|p| self.resolve(p))
    }
}

/// Forward features of one model on one task's probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub task_id: String,
    pub model_id: String,
    pub class_count: usize,
    /// n × D, one sample per row.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(
        task_id: impl Into<String>,
        model_id: impl Into<String>,
        class_count: usize,
        features: DMatrix<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(r) = labels.iter().position(|&l| l >= class_count) {
            return Err(Error::invalid(
                "labels",
                format!("label out of range at row {r}"),
            ));
        }
        if let Some(idx) = features.iter().position(|v| !v.is_finite()) {
            // column-major storage
            let r = idx % features.nrows();
            return Err(Error::invalid(
                "features",
                format!("non-finite value at row {r}"),
            ));
        }
        Ok(FeatureSet {
            task_id: task_id.into(),
            model_id: model_id.into(),
            class_count,
            features,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows selected by `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> FeatureSet {
        let features = self.features.select_rows(idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        FeatureSet {
            task_id: self.task_id.clone(),
            model_id: self.model_id.clone(),
            class_count: self.class_count,
            features,
            labels,
        }
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("label");
        for j in 0..d {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (r, label) in self.labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for j in 0..d {
                out.push(',');
                out.push_str(&fmt_f64(self.features[(r, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv())
    }
}

/// Parses a feature CSV (`label,f0,...,f{D-1}`).
pub fn parse_feature_set(
    text: &str,
    origin: &str,
    task_id: &str,
    model_id: &str,
    class_count: usize,
) -> Result<FeatureSet> {
    let mut lines = content_lines(text);
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, "empty feature file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(Error::parse(origin, "header must start with `label`"));
    }
    let d = cols.len() - 1;
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::parse(
                origin,
                format!("header column {} is `{c}`, expected `f{j}`", j + 1),
            ));
        }
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (row, (_, line)) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::parse(
                origin,
                format!(
                    "dimension mismatch at row {row}: {} values, header declares {d}",
                    fields.len().saturating_sub(1)
                ),
            ));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, format!("bad label at row {row}")))?;
        if label >= class_count {
            return Err(Error::parse(
                origin,
                format!("label out of range at row {row}: {label} >= {class_count}"),
            ));
        }
        labels.push(label);
        for f in &fields[1..] {
            let v = parse_f64(f)
                .ok_or_else(|| Error::parse(origin, format!("bad number at row {row}")))?;
            if !v.is_finite() {
                return Err(Error::parse(origin, format!("non-finite value at row {row}")));
            }
            values.push(v);
        }
    }
    let features = DMatrix::from_row_slice(labels.len(), d, &values);
    FeatureSet::new(task_id, model_id, class_count, features, labels)
}

pub fn load_feature_set(
    path: &Path,
    task_id: &str,
    model_id: &str,
    class_count: usize,
) -> Result<FeatureSet> {
    let text = read_text(path)?;
    parse_feature_set(
        &text,
        &path.display().to_string(),
        task_id,
        model_id,
        class_count,
    )
}

/// A real matrix with string ids on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    /// Header cell above the row ids, e.g. `model_id`.
    pub corner: String,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl LabeledMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = self.corner.clone();
        for c in &self.col_ids {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, r) in self.row_ids.iter().enumerate() {
            out.push_str(r);
            for j in 0..self.col_ids.len() {
                out.push(',');
                out.push_str(&fmt_f64(self.values[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, "malformed header: empty file"))?;
        let mut cols = header.split(',').map(|s| s.trim().to_string());
        let corner = cols.next().unwrap_or_default();
        let col_ids: Vec<String> = cols.collect();
        if col_ids.iter().any(String::is_empty) {
            return Err(Error::parse(origin, "malformed header: empty column id"));
        }
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines {
            let mut fields = line.split(',');
            let id = fields.next().unwrap_or_default().trim().to_string();
            let row: Vec<&str> = fields.collect();
            if row.len() != col_ids.len() {
                return Err(Error::parse(
                    origin,
                    format!(
                        "line {lineno}: {} value columns, header declares {}",
                        row.len(),
                        col_ids.len()
                    ),
                ));
            }
            for f in row {
                values.push(
                    parse_f64(f)
                        .ok_or_else(|| Error::parse(origin, format!("line {lineno}: bad number")))?,
                );
            }
            row_ids.push(id);
        }
        let values = DMatrix::from_row_slice(row_ids.len(), col_ids.len(), &values);
        Ok(LabeledMatrix {
            corner,
            row_ids,
            col_ids,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Historical performance matrix: models × tasks, non-negative FDA scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceMatrix {
    pub model_ids: Vec<String>,
    pub task_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl PerformanceMatrix {
    pub fn new(model_ids: Vec<String>, task_ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let p = PerformanceMatrix {
            model_ids,
            task_ids,
            values,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.nrows() != self.model_ids.len() || self.values.ncols() != self.task_ids.len()
        {
            return Err(Error::Dimension(format!(
                "matrix is {}x{} but has {} model ids and {} task ids",
                self.values.nrows(),
                self.values.ncols(),
                self.model_ids.len(),
                self.task_ids.len()
            )));
        }
        for i in 0..self.values.nrows() {
            for j in 0..self.values.ncols() {
                let v = self.values[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(
                        "perf_matrix",
                        format!(
                            "entry ({}, {}) = {v} is not a finite non-negative score",
                            self.model_ids[i], self.task_ids[j]
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.model_ids.len()
    }

    pub fn ncols(&self) -> usize {
        self.task_ids.len()
    }

    /// Columns restricted to `task_ids`, in that order.
    pub fn select_tasks(&self, task_ids: &[String]) -> Result<Self> {
        let idx: Vec<usize> = task_ids
            .iter()
            .map(|t| {
                self.task_ids
                    .iter()
                    .position(|x| x == t)
                    .ok_or_else(|| Error::invalid("task_id", format!("{t} not in matrix")))
            })
            .collect::<Result<_>>()?;
        Ok(PerformanceMatrix {
            model_ids: self.model_ids.clone(),
            task_ids: task_ids.to_vec(),
            values: self.values.select_columns(&idx),
        })
    }

    pub fn to_csv(&self) -> String {
        LabeledMatrix {
            corner: "model_id".into(),
            row_ids: self.model_ids.clone(),
            col_ids: self.task_ids.clone(),
            values: self.values.clone(),
        }
        .to_csv()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let m = LabeledMatrix::parse(text, origin)?;
        if m.corner != "model_id" {
            return Err(Error::parse(
                origin,
                format!("malformed header: first cell `{}`, expected `model_id`", m.corner),
            ));
        }
        PerformanceMatrix::new(m.row_ids, m.col_ids, m.values)
    }
}

pub fn save_matrix(p: &PerformanceMatrix, path: &Path) -> Result<()> {
    p.validate()?;
    write_atomic(path, &p.to_csv())
}

pub fn load_matrix(path: &Path) -> Result<PerformanceMatrix> {
    let text = read_text(path)?;
    PerformanceMatrix::parse(&text, &path.display().to_string())
}

pub fn vector_to_csv(v: &[f64]) -> String {
    let mut s = v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

pub fn parse_vector(text: &str, origin: &str) -> Result<Vec<f64>> {
    let mut lines = content_lines(text);
    let (lineno, line) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, "empty vector file"))?;
    if lines.next().is_some() {
        return Err(Error::parse(origin, "vector file has more than one data line"));
    }
    line.split(',')
        .map(|f| {
            parse_f64(f)
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(origin, format!("line {lineno}: bad number `{f}`")))
        })
        .collect()
}

pub fn save_vector(v: &[f64], path: &Path) -> Result<()> {
    write_atomic(path, &vector_to_csv(v))
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    parse_vector(&text, &path.display().to_string())
}
