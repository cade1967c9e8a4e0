//! Fisher discriminant scoring of forward features.
//!
//! The projection solves `S_B u = λ S_W u` on sample-averaged scatter
//! matrices, so projected within-class covariance is (regularized) identity
//! and the class posterior can use `Σ = I`:
//!
//! `g_c(x) = (Uᵀx)·μ_c − ½ μ_c·μ_c + ln π_c`
//!
//! The transfer score of a feature set is the sum over samples of the
//! softmax probability assigned to the true class.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_feature_set, FeatureSet, Manifest, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::io::derive_seed;

pub const DEFAULT_GAMMA: f64 = 1e-4;
pub const DEFAULT_PROBE_SIZE: usize = 500;
/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdaConfig {
    /// Shrinkage weight on `trace(S_W)/D · I`.
    pub gamma: f64,
    /// Stratified subsample size; `None` scores the full set.
    pub probe_size: Option<usize>,
    pub seed: u64,
}

impl Default for FdaConfig {
    fn default() -> Self {
        FdaConfig {
            gamma: DEFAULT_GAMMA,
            probe_size: Some(DEFAULT_PROBE_SIZE),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdaModel {
    /// D × D' projection `U`.
    pub projection: DMatrix<f64>,
    /// C × D' class means in projected space.
    pub class_means: DMatrix<f64>,
    pub priors: Vec<f64>,
    /// Descending, length D'.
    pub eigenvalues: Vec<f64>,
    /// Between-class scatter, averaged over samples.
    pub between: DMatrix<f64>,
    /// Regularized within-class scatter, averaged over samples.
    pub within_reg: DMatrix<f64>,
}

impl FdaModel {
    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn projected_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.priors.len()
    }

    /// Per-column `‖S_B u − λ S_W_reg u‖₂ / ‖S_B u‖₂`.
    pub fn relative_residuals(&self) -> Vec<f64> {
        (0..self.projected_dim())
            .map(|c| {
                let u = self.projection.column(c);
                let bu = &self.between * u;
                let wu = &self.within_reg * u;
                let r = &bu - self.eigenvalues[c] * wu;
                r.norm() / bu.norm()
            })
            .collect()
    }
}

/// Sample-averaged between- and within-class scatter.
pub fn scatter_matrices(fs: &FeatureSet) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = fs.n() as f64;
    let d = fs.dim();
    let counts = fs.class_counts();
    let means = class_means(fs, &counts);
    let overall = fs.features.row_mean().transpose();

    let mut between = DMatrix::zeros(d, d);
    for (c, &nc) in counts.iter().enumerate() {
        if nc == 0 {
            continue;
        }
        let diff = means.row(c).transpose() - &overall;
        between += (nc as f64 / n) * &diff * diff.transpose();
    }

    let mut centered = fs.features.clone();
    for (r, &l) in fs.labels.iter().enumerate() {
        let mut row = centered.row_mut(r);
        row -= means.row(l);
    }
    let within = centered.transpose() * &centered / n;
    (symmetrize(between), symmetrize(within))
}

fn class_means(fs: &FeatureSet, counts: &[usize]) -> DMatrix<f64> {
    let mut means = DMatrix::zeros(fs.class_count, fs.dim());
    for (r, &l) in fs.labels.iter().enumerate() {
        let mut row = means.row_mut(l);
        row += fs.features.row(r);
    }
    for (c, &nc) in counts.iter().enumerate() {
        if nc > 0 {
            let mut row = means.row_mut(c);
            row /= nc as f64;
        }
    }
    means
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `S_W + γ·trace(S_W)/D·I`.
pub fn regularize(within: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let d = within.nrows();
    let shrink = gamma * within.trace() / d as f64;
    within + DMatrix::identity(d, d) * shrink
}

/// Solves `A u = λ B u` for symmetric `A` and symmetric positive definite
/// `B` through the Cholesky factor of `B`. Eigenpairs come back sorted by
/// descending λ, each column scaled to `uᵀBu = 1` with its largest-magnitude
/// entry positive.
pub fn generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = a.nrows();
    if a.ncols() != d || b.nrows() != d || b.ncols() != d {
        return Err(Error::Dimension("generalized eigenproblem needs square matrices of equal size".into()));
    }
    let chol = b.clone().cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "regularized within-class scatter ({d}x{d}, trace {:.3e}) is not positive definite",
            b.trace()
        ))
    })?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let x = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let c = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let eig = SymmetricEigen::new(symmetrize(c));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let v = eig.eigenvectors.select_columns(&order);
    let mut u = l
        .transpose()
        .solve_upper_triangular(&v)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    for mut col in u.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
    Ok((values, u))
}

pub fn fit_fda(fs: &FeatureSet, gamma: f64) -> Result<FdaModel> {
    let c = fs.class_count;
    if c < 2 {
        return Err(Error::invalid("class_count", "FDA needs at least 2 classes"));
    }
    let counts = fs.class_counts();
    if let Some(empty) = counts.iter().position(|&k| k == 0) {
        return Err(Error::invalid(
            "labels",
            format!(
                "class {empty} has 0 samples in ({}, {})",
                fs.model_id, fs.task_id
            ),
        ));
    }
    if fs.n() <= c {
        return Err(Error::invalid(
            "labels",
            format!("need more samples ({}) than classes ({c})", fs.n()),
        ));
    }
    if fs.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features", "non-finite input"));
    }

    let (between, within) = scatter_matrices(fs);
    let within_reg = regularize(&within, gamma);
    let (values, vectors) = generalized_eigen(&between, &within_reg)?;

    let lambda_max = values.first().copied().unwrap_or(0.0);
    let rank = if lambda_max > 0.0 {
        values
            .iter()
            .take_while(|&&l| l > RANK_CUTOFF * lambda_max)
            .count()
    } else {
        0
    };
    let keep = rank.min(c - 1);
    let projection = vectors.columns(0, keep).into_owned();
    let eigenvalues = values[..keep].to_vec();

    let n = fs.n() as f64;
    let priors: Vec<f64> = counts.iter().map(|&k| k as f64 / n).collect();
    let class_means = class_means(fs, &counts) * &projection;

    Ok(FdaModel {
        projection,
        class_means,
        priors,
        eigenvalues,
        between,
        within_reg,
    })
}

/// Unnormalized class log-scores for one raw feature vector.
pub fn fda_posterior(model: &FdaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "feature vector has {} entries, model expects {}",
            x.len(),
            model.dim()
        )));
    }
    let projected = model.projection.tr_mul(&DVector::from_column_slice(x));
    Ok(class_scores(model, projected.as_slice()))
}

fn class_scores(model: &FdaModel, projected: &[f64]) -> Vec<f64> {
    (0..model.class_count())
        .map(|c| {
            let mu = model.class_means.row(c);
            let mut dot = 0.0;
            let mut sq = 0.0;
            for (k, &f) in projected.iter().enumerate() {
                dot += f * mu[k];
                sq += mu[k] * mu[k];
            }
            dot - 0.5 * sq + model.priors[c].ln()
        })
        .collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Sum over samples of the true-class softmax probability.
pub fn fda_score(model: &FdaModel, fs: &FeatureSet) -> Result<f64> {
    if fs.dim() != model.dim() {
        return Err(Error::Dimension(format!(
            "feature set has {} dims, model expects {}",
            fs.dim(),
            model.dim()
        )));
    }
    if fs.class_count != model.class_count() {
        return Err(Error::Dimension(format!(
            "feature set has {} classes, model expects {}",
            fs.class_count,
            model.class_count()
        )));
    }
    let projected = &fs.features * &model.projection;
    let mut total = 0.0;
    for (r, &label) in fs.labels.iter().enumerate() {
        let row: Vec<f64> = projected.row(r).iter().copied().collect();
        total += softmax(&class_scores(model, &row))[label];
    }
    Ok(total)
}

/// Seeded stratified subsample of at most `size` rows. Class shares follow
/// the largest-remainder rule with every present class keeping at least one
/// sample. Selected rows keep their original order.
pub fn stratified_probe(fs: &FeatureSet, size: usize, seed: u64) -> FeatureSet {
    let n = fs.n();
    if size >= n {
        return fs.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); fs.class_count];
    for (i, &l) in fs.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..fs.class_count).filter(|&c| !by_class[c].is_empty()).collect();
    let size = size.max(present.len());

    let mut quota = vec![0usize; fs.class_count];
    let mut remainders = Vec::new();
    for &c in &present {
        let exact = size as f64 * by_class[c].len() as f64 / n as f64;
        quota[c] = (exact.floor() as usize).max(1);
        remainders.push((exact - exact.floor(), c));
    }
    let mut assigned: usize = quota.iter().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 4) {
        if assigned >= size {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            assigned += 1;
        }
    }
    while assigned > size {
        // floor-at-one overshoot: trim the largest quotas
        let c = *present.iter().max_by_key(|&&c| (quota[c], std::cmp::Reverse(c))).unwrap();
        quota[c] -= 1;
        assigned -= 1;
    }

    let mut picked = Vec::with_capacity(size);
    for &c in &present {
        let idx = &mut by_class[c];
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..quota[c]]);
    }
    picked.sort_unstable();
    fs.subset(&picked)
}

/// Proxy transfer score of one feature set: fit on the probe subset and
/// score that same subset.
pub fn score_feature_set(fs: &FeatureSet, cfg: &FdaConfig) -> Result<f64> {
    let probe = match cfg.probe_size {
        Some(size) => stratified_probe(fs, size, derive_seed(cfg.seed, &fs.task_id)),
        None => fs.clone(),
    };
    let model = fit_fda(&probe, cfg.gamma)?;
    fda_score(&model, &probe)
}

/// Scores every requested (model, task) pair. Missing feature files abort
/// the build and are all listed in the error; no partial matrix is returned.
pub fn build_performance_matrix(
    manifest: &Manifest,
    task_ids: &[String],
    model_ids: &[String],
    cfg: &FdaConfig,
) -> Result<PerformanceMatrix> {
    let mut missing = Vec::new();
    let mut cells = Vec::new();
    for (i, m) in model_ids.iter().enumerate() {
        if manifest.model(m).is_none() {
            return Err(Error::invalid("model_id", format!("{m} not in manifest")));
        }
        for (j, t) in task_ids.iter().enumerate() {
            let task = manifest
                .task(t)
                .ok_or_else(|| Error::invalid("task_id", format!("{t} not in manifest")))?;
            match manifest.feature_path(t, m) {
                Some(p) if p.is_file() => cells.push((i, j, p, task.class_count)),
                _ => missing.push((m.clone(), t.clone())),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }

    let scores: Vec<(usize, usize, f64)> = cells
        .par_iter()
        .map(|(i, j, path, classes)| {
            let fs = load_feature_set(path, &task_ids[*j], &model_ids[*i], *classes)?;
            Ok((*i, *j, score_feature_set(&fs, cfg)?))
        })
        .collect::<Result<_>>()?;

    let mut values = DMatrix::zeros(model_ids.len(), task_ids.len());
    for (i, j, s) in scores {
        values[(i, j)] = s;
    }
    PerformanceMatrix::new(model_ids.to_vec(), task_ids.to_vec(), values)
}
