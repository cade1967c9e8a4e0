//! Leave-one-task-out evaluation and the Pearson metric.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archi2vec::{ArchEmbeddings, ArchGraph, EmbedConfig};
use crate::data::{Manifest, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::fda::{build_performance_matrix, FdaConfig};
use crate::io::derive_seed;
use crate::merge::{fit_proxy_from_space, rank_models, ForestConfig, MergeConfig};
use crate::meta::{fit_meta_from_matrix, MetaLayout};
use crate::nmf::{factorize, NmfConfig};

/// Sample Pearson correlation. Errors on length mismatch, fewer than two
/// points, or a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("pearson: lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson", "need at least 2 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("pearson", "non-finite input"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson", "undefined for a constant vector"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fda: FdaConfig,
    pub nmf: NmfConfig,
    /// `None` disables architecture embeddings.
    pub archi2vec: Option<EmbedConfig>,
    pub num_clusters: usize,
    pub use_embedding: bool,
    pub use_clusters: bool,
    pub forest: ForestConfig,
    pub merge: MergeConfig,
    pub seeds: Vec<u64>,
}

impl EvalConfig {
    /// `count` seeds derived from one master seed.
    pub fn derived_seeds(master: u64, count: usize) -> Vec<u64> {
        (0..count).map(|r| derive_seed(master, &format!("eval/{r}"))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    /// Per-fold fits: factorization, meta model, proxy regressor.
    pub offline_secs: f64,
    pub online_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub held_out_task: String,
    pub seed: u64,
    /// Tasks whose columns formed the history for this fold.
    pub history: Vec<String>,
    pub model_ids: Vec<String>,
    pub estimated: Vec<f64>,
    pub ground_truth: Vec<f64>,
    pub pearson: f64,
    pub timing: StageTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_pearson: f64,
    /// Performance matrix and architecture embedding, shared by all folds.
    pub shared_offline_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<EvalRun>,
    pub per_seed: Vec<SeedSummary>,
    /// Mean over all runs.
    pub mean_pearson: f64,
    /// Sample standard deviation of the per-seed means.
    pub std_pearson: f64,
    pub skipped: Vec<String>,
    pub merge: MergeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub fn load_manifest_graphs(manifest: &Manifest) -> Result<Option<Vec<ArchGraph>>> {
    let mut graphs = Vec::with_capacity(manifest.models.len());
    for m in &manifest.models {
        match &m.arch_graph {
            Some(p) => graphs.push(ArchGraph::load(&manifest.resolve(p))?.0),
            None => return Ok(None),
        }
    }
    Ok(Some(graphs))
}

fn ground_truth_vector(manifest: &Manifest, task: &str, models: &[String]) -> Option<Vec<f64>> {
    let gt = manifest.task(task)?.ground_truth.as_ref()?;
    models.iter().map(|m| gt.get(m).copied()).collect()
}

/// For each seed and each eligible task `t`: drop column `t` from the
/// performance matrix, refit every model on the remaining tasks, rank `t`
/// from its proxy embedding alone and correlate with its ground truth.
pub fn leave_one_out_eval(manifest: &Manifest, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.merge.validate()?;
    cfg.nmf.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("eval.seeds", "at least one seed is required"));
    }
    let models = manifest.model_ids();
    let tasks: Vec<String> = manifest
        .tasks
        .iter()
        .filter(|t| t.proxy_embedding.is_some() && !t.feature_files.is_empty())
        .map(|t| t.task_id.clone())
        .collect();
    if tasks.len() < 3 {
        return Err(Error::invalid(
            "eval",
            format!("need at least 3 tasks with features and proxy embeddings, found {}", tasks.len()),
        ));
    }
    let mut skipped = Vec::new();
    let mut targets = Vec::new();
    for t in &tasks {
        match ground_truth_vector(manifest, t, &models) {
            Some(gt) => targets.push((t.clone(), gt)),
            None => {
                log::warn!("task {t}: incomplete ground truth, skipped as a target");
                skipped.push(t.clone());
            }
        }
    }
    let graphs = match &cfg.archi2vec {
        Some(_) => {
            let g = load_manifest_graphs(manifest)?;
            if g.is_none() {
                log::warn!("some models lack architecture graphs; meta features use counts only");
            }
            g
        }
        None => None,
    };

    let mut runs = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let shared = Instant::now();
        let fda = FdaConfig {
            seed: derive_seed(seed, "fda"),
            ..cfg.fda.clone()
        };
        let full = build_performance_matrix(manifest, &tasks, &models, &fda)?;
        let arch = match (&graphs, &cfg.archi2vec) {
            (Some(g), Some(e)) => {
                let e = EmbedConfig {
                    seed: derive_seed(seed, "archi2vec"),
                    ..e.clone()
                };
                Some(ArchEmbeddings::fit(g, &e, cfg.num_clusters)?)
            }
            _ => None,
        };
        let layout = match &arch {
            Some(a) => MetaLayout::from_arch(a, cfg.use_embedding, cfg.use_clusters),
            None => MetaLayout::basic(),
        };
        let shared_offline_secs = shared.elapsed().as_secs_f64();

        let mut seed_runs = Vec::new();
        for (target, gt) in &targets {
            let history: Vec<String> = tasks.iter().filter(|t| *t != target).cloned().collect();
            let run = evaluate_fold(manifest, cfg, seed, &full, &history, target, gt, arch.as_ref(), &layout)?;
            seed_runs.push(run);
        }
        let mean = seed_runs.iter().map(|r| r.pearson).sum::<f64>() / seed_runs.len().max(1) as f64;
        per_seed.push(SeedSummary {
            seed,
            mean_pearson: mean,
            shared_offline_secs,
        });
        runs.extend(seed_runs);
    }
    if runs.is_empty() {
        return Err(Error::invalid("eval", "no task has complete ground truth"));
    }
    let mean_pearson = runs.iter().map(|r| r.pearson).sum::<f64>() / runs.len() as f64;
    let std_pearson = if per_seed.len() > 1 {
        let m = per_seed.iter().map(|s| s.mean_pearson).sum::<f64>() / per_seed.len() as f64;
        (per_seed.iter().map(|s| (s.mean_pearson - m).powi(2)).sum::<f64>() / (per_seed.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        runs,
        per_seed,
        mean_pearson,
        std_pearson,
        skipped,
        merge: cfg.merge.clone(),
        config_digest: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_fold(
    manifest: &Manifest,
    cfg: &EvalConfig,
    seed: u64,
    full: &PerformanceMatrix,
    history: &[String],
    target: &str,
    gt: &[f64],
    arch: Option<&ArchEmbeddings>,
    layout: &MetaLayout,
) -> Result<EvalRun> {
    let offline = Instant::now();
    let p = full.select_tasks(history)?;
    assert!(!p.task_ids.iter().any(|t| t == target), "held-out column leaked into history");
    let nmf = NmfConfig {
        seed: derive_seed(seed, "factorize"),
        k: cfg.nmf.k.min(p.nrows()).min(p.ncols()),
        ..cfg.nmf.clone()
    };
    let space = factorize(&p, &nmf)?;
    let meta = fit_meta_from_matrix(manifest, layout, arch, &p)?;
    let forest = ForestConfig {
        seed: derive_seed(seed, "train-proxy"),
        ..cfg.forest.clone()
    };
    let reg = fit_proxy_from_space(manifest, &space, &forest)?;
    let offline_secs = offline.elapsed().as_secs_f64();

    let online = Instant::now();
    let report = rank_models(&space, &reg, &meta, manifest, arch, target, &cfg.merge)?;
    let online_secs = online.elapsed().as_secs_f64();

    let by_model: BTreeMap<&str, f64> = report.scores().into_iter().collect();
    let estimated: Vec<f64> = space.model_ids.iter().map(|m| by_model[m.as_str()]).collect();
    let pearson = pearson(&estimated, gt)?;
    Ok(EvalRun {
        held_out_task: target.to_string(),
        seed,
        history: history.to_vec(),
        model_ids: space.model_ids.clone(),
        estimated,
        ground_truth: gt.to_vec(),
        pearson,
        timing: StageTiming {
            offline_secs,
            online_secs,
        },
    })
}
