//! Meta features and the linear meta-score model.
//!
//! A meta vector is `[log10 params, log10 layers, arch embedding, one-hot
//! cluster]` for the model followed by `[log10 classes, log10 samples]` for
//! the task. The model standardizes every dimension, drops constant ones,
//! and fits ordinary least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::archi2vec::ArchEmbeddings;
use crate::data::{Manifest, ModelRecord, PerformanceMatrix, TaskRecord};
use crate::error::{Error, Result};
use crate::io::{read_text, sha256_hex, write_atomic};

pub const RIDGE_LAMBDA: f64 = 1e-6;
const CONSTANT_STD: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;

/// Which blocks a meta vector carries. Blocks of width zero are disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaLayout {
    pub embedding_dim: usize,
    pub num_clusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
}

impl MetaLayout {
    pub fn basic() -> Self {
        MetaLayout {
            embedding_dim: 0,
            num_clusters: 0,
            vocab_hash: None,
        }
    }

    pub fn from_arch(arch: &ArchEmbeddings, use_embedding: bool, use_clusters: bool) -> Self {
        MetaLayout {
            embedding_dim: if use_embedding { arch.info.dim } else { 0 },
            num_clusters: if use_clusters { arch.info.num_clusters } else { 0 },
            vocab_hash: Some(arch.info.vocab_hash.clone()),
        }
    }

    pub fn model_dim(&self) -> usize {
        2 + self.embedding_dim + self.num_clusters
    }

    pub fn dim(&self) -> usize {
        self.model_dim() + 2
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("layout serializes").as_bytes())
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["log10_params".to_string(), "log10_layers".to_string()];
        names.extend((0..self.embedding_dim).map(|j| format!("emb{j}")));
        names.extend((0..self.num_clusters).map(|c| format!("cluster{c}")));
        names.push("log10_classes".into());
        names.push("log10_samples".into());
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaVector {
    pub values: Vec<f64>,
    pub layout_digest: String,
    /// The embedding block was zero-filled.
    pub missing_embedding: bool,
}

fn log10_count(field: &str, id: &str, v: u64) -> Result<f64> {
    if v == 0 {
        return Err(Error::invalid(field, format!("{id}: count must be positive")));
    }
    Ok((v as f64).log10())
}

/// Model block. `arch` overrides the embedding and cluster stored on the
/// record.
pub fn model_features(
    layout: &MetaLayout,
    model: &ModelRecord,
    arch: Option<(&[f64], usize)>,
) -> Result<(Vec<f64>, bool)> {
    let id = &model.model_id;
    let mut v = vec![
        log10_count("param_count", id, model.param_count)?,
        log10_count("layer_count", id, model.layer_count)?,
    ];
    let (embedding, cluster) = match arch {
        Some((e, c)) => (Some(e), Some(c)),
        None => (model.arch_embedding.as_deref(), model.cluster_id),
    };
    let mut missing = false;
    if layout.embedding_dim > 0 {
        match embedding {
            Some(e) if e.len() == layout.embedding_dim => v.extend_from_slice(e),
            Some(e) => {
                return Err(Error::Dimension(format!(
                    "{id}: embedding has {} entries, layout expects {}",
                    e.len(),
                    layout.embedding_dim
                )))
            }
            None => {
                log::warn!("{id}: no architecture embedding, using zeros");
                missing = true;
                v.extend(std::iter::repeat_n(0.0, layout.embedding_dim));
            }
        }
    }
    if layout.num_clusters > 0 {
        let mut onehot = vec![0.0; layout.num_clusters];
        match cluster {
            Some(c) if c < layout.num_clusters => onehot[c] = 1.0,
            Some(c) => {
                return Err(Error::invalid(
                    "cluster_id",
                    format!("{id}: cluster {c} out of range for {} clusters", layout.num_clusters),
                ))
            }
            None => {
                log::warn!("{id}: no cluster id, one-hot block left empty");
                missing = true;
            }
        }
        v.extend(onehot);
    }
    Ok((v, missing))
}

pub fn task_features(task: &TaskRecord) -> Result<[f64; 2]> {
    let id = &task.task_id;
    Ok([
        log10_count("class_count", id, task.class_count as u64)?,
        log10_count("sample_count", id, task.sample_count as u64)?,
    ])
}

pub fn assemble_meta(
    layout: &MetaLayout,
    model: &ModelRecord,
    task: &TaskRecord,
    arch: Option<(&[f64], usize)>,
) -> Result<MetaVector> {
    let (mut values, missing_embedding) = model_features(layout, model, arch)?;
    values.extend(task_features(task)?);
    Ok(MetaVector {
        values,
        layout_digest: layout.digest(),
        missing_embedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaModel {
    pub layout: MetaLayout,
    pub layout_digest: String,
    /// Standardized-space weights; zero for dropped dimensions.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Dimensions dropped because they were constant in training.
    pub constant: Vec<bool>,
    pub training_rmse: f64,
    pub ridge: bool,
    pub training_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// OLS on standardized features. Falls back to ridge with
/// [`RIDGE_LAMBDA`] when the normal matrix is rank-deficient.
pub fn fit_meta(layout: &MetaLayout, xs: &[Vec<f64>], ys: &[f64]) -> Result<MetaModel> {
    let dim = layout.dim();
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::Dimension(format!("{n} vectors but {} targets", ys.len())));
    }
    if let Some(bad) = xs.iter().position(|x| x.len() != dim) {
        return Err(Error::Dimension(format!(
            "meta vector {bad} has {} entries, layout expects {dim}",
            xs[bad].len()
        )));
    }
    if xs.iter().flatten().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("meta", "non-finite training value"));
    }
    if n < 2 {
        return Err(Error::invalid("meta", format!("need at least 2 training pairs, got {n}")));
    }

    let nf = n as f64;
    let mut means = vec![0.0; dim];
    let mut stds = vec![0.0; dim];
    for j in 0..dim {
        means[j] = xs.iter().map(|x| x[j]).sum::<f64>() / nf;
        stds[j] = (xs.iter().map(|x| (x[j] - means[j]).powi(2)).sum::<f64>() / nf).sqrt();
    }
    let constant: Vec<bool> = (0..dim)
        .map(|j| stds[j] <= CONSTANT_STD * means[j].abs().max(1.0))
        .collect();
    let kept: Vec<usize> = (0..dim).filter(|&j| !constant[j]).collect();
    if n < kept.len() + 1 {
        return Err(Error::invalid(
            "meta",
            format!(
                "{} non-constant features need at least {} training pairs, got {n}",
                kept.len(),
                kept.len() + 1
            ),
        ));
    }

    let y_mean = ys.iter().sum::<f64>() / nf;
    let p = kept.len();
    let x = DMatrix::from_fn(n, p, |r, c| {
        let j = kept[c];
        (xs[r][j] - means[j]) / stds[j]
    });
    let yc = DVector::from_iterator(n, ys.iter().map(|y| y - y_mean));

    let mut weights = vec![0.0; dim];
    let mut ridge = false;
    if p > 0 {
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &yc;
        let eig = xtx.clone().symmetric_eigen().eigenvalues;
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        ridge = min <= RANK_TOL * max;
        let solve = |lambda: f64| {
            let a = &xtx + DMatrix::identity(p, p) * lambda;
            a.cholesky().map(|c| c.solve(&xty))
        };
        let w = match (ridge, solve(0.0)) {
            (false, Some(w)) => w,
            _ => {
                ridge = true;
                solve(RIDGE_LAMBDA)
                    .ok_or_else(|| Error::Singular("meta normal matrix not positive definite under ridge".into()))?
            }
        };
        for (c, &j) in kept.iter().enumerate() {
            weights[j] = w[c];
        }
    }

    let mut model = MetaModel {
        layout: layout.clone(),
        layout_digest: layout.digest(),
        weights,
        intercept: y_mean,
        means,
        stds,
        constant,
        training_rmse: 0.0,
        ridge,
        training_pairs: n,
        config_digest: None,
    };
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (model.predict(x) - y).powi(2)).sum();
    model.training_rmse = (sse / nf).sqrt();
    Ok(model)
}

impl MetaModel {
    /// Prediction for a raw vector; no layout check.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut s = self.intercept;
        for j in 0..x.len() {
            if !self.constant[j] {
                s += self.weights[j] * (x[j] - self.means[j]) / self.stds[j];
            }
        }
        s
    }

    /// Weights and intercept in the original (unstandardized) feature space.
    pub fn raw_coefficients(&self) -> (Vec<f64>, f64) {
        let mut b = self.intercept;
        let w: Vec<f64> = (0..self.weights.len())
            .map(|j| {
                if self.constant[j] {
                    0.0
                } else {
                    b -= self.weights[j] * self.means[j] / self.stds[j];
                    self.weights[j] / self.stds[j]
                }
            })
            .collect();
        (w, b)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let m: MetaModel = serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let dim = m.layout.dim();
        if m.layout_digest != m.layout.digest() {
            return Err(Error::Digest(format!("{}: layout digest does not match layout", path.display())));
        }
        if [m.weights.len(), m.means.len(), m.stds.len(), m.constant.len()] != [dim; 4] {
            return Err(Error::Dimension(format!("{}: vectors disagree with layout", path.display())));
        }
        Ok(m)
    }
}

pub fn meta_score(model: &MetaModel, mv: &MetaVector) -> Result<f64> {
    if mv.layout_digest != model.layout_digest {
        return Err(Error::Digest(format!(
            "meta vector layout {} does not match model layout {}",
            &mv.layout_digest[..12.min(mv.layout_digest.len())],
            &model.layout_digest[..12.min(model.layout_digest.len())]
        )));
    }
    if mv.values.len() != model.weights.len() {
        return Err(Error::Dimension(format!(
            "meta vector has {} entries, model expects {}",
            mv.values.len(),
            model.weights.len()
        )));
    }
    Ok(model.predict(&mv.values))
}

/// Per-model architecture inputs looked up from an embedding artifact.
pub fn arch_lookup<'a>(arch: Option<&'a ArchEmbeddings>, model_id: &str) -> Option<(&'a [f64], usize)> {
    arch.and_then(|a| a.get(model_id))
}

/// Fits the meta model on every cell of a performance matrix.
pub fn fit_meta_from_matrix(
    manifest: &Manifest,
    layout: &MetaLayout,
    arch: Option<&ArchEmbeddings>,
    p: &PerformanceMatrix,
) -> Result<MetaModel> {
    let mut xs = Vec::with_capacity(p.nrows() * p.ncols());
    let mut ys = Vec::with_capacity(xs.capacity());
    for (j, t) in p.task_ids.iter().enumerate() {
        let task = manifest
            .task(t)
            .ok_or_else(|| Error::invalid("task_id", format!("{t} not in manifest")))?;
        for (i, m) in p.model_ids.iter().enumerate() {
            let model = manifest
                .model(m)
                .ok_or_else(|| Error::invalid("model_id", format!("{m} not in manifest")))?;
            xs.push(assemble_meta(layout, model, task, arch_lookup(arch, m))?.values);
            ys.push(p.values[(i, j)]);
        }
    }
    fit_meta(layout, &xs, &ys)
}
