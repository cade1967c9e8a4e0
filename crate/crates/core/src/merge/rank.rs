use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forest::ProxyRegressor;
use crate::archi2vec::ArchEmbeddings;
use crate::data::{Manifest, ModelRecord};
use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};
use crate::meta::{arch_lookup, meta_score, model_features, task_features, MetaModel, MetaVector};
use crate::nmf::{transfer_score, TransferSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    #[default]
    Zscore,
    None,
}

impl std::str::FromStr for Normalize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Normalize::Zscore),
            "none" => Ok(Normalize::None),
            other => Err(Error::invalid("merge.normalize", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub alpha: f64,
    pub normalize: Normalize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            alpha: 0.5,
            normalize: Normalize::Zscore,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("merge.alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankEntry {
    pub model_id: String,
    /// Raw component scores, before normalization.
    pub trans_score: f64,
    pub meta_score: f64,
    pub merged_score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingReport {
    pub task_id: String,
    pub alpha: f64,
    pub normalize: Normalize,
    pub task_vector: Vec<f64>,
    pub entries: Vec<RankEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl RankingReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    /// Merged scores keyed by model, in entry order.
    pub fn scores(&self) -> Vec<(&str, f64)> {
        self.entries.iter().map(|e| (e.model_id.as_str(), e.merged_score)).collect()
    }
}

/// Population z-scores; a constant vector maps to zeros.
pub fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / std).collect()
}

/// `(1 − α)·trans + α·meta`, after optional per-component normalization.
pub fn merge_scores(trans: &[f64], meta: &[f64], cfg: &MergeConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if trans.len() != meta.len() {
        return Err(Error::Dimension(format!(
            "{} transfer scores but {} meta scores",
            trans.len(),
            meta.len()
        )));
    }
    let (t, m) = match cfg.normalize {
        Normalize::Zscore => (zscore(trans), zscore(meta)),
        Normalize::None => (trans.to_vec(), meta.to_vec()),
    };
    Ok(t.iter().zip(&m).map(|(t, m)| (1.0 - cfg.alpha) * t + cfg.alpha * m).collect())
}

/// Sorts by descending merged score, ties by model id, and assigns ranks.
pub fn rank_entries(model_ids: &[String], trans: &[f64], meta: &[f64], merged: &[f64]) -> Vec<RankEntry> {
    let mut order: Vec<usize> = (0..model_ids.len()).collect();
    order.sort_by(|&a, &b| {
        merged[b]
            .partial_cmp(&merged[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| model_ids[a].cmp(&model_ids[b]))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(r, i)| RankEntry {
            model_id: model_ids[i].clone(),
            trans_score: trans[i],
            meta_score: meta[i],
            merged_score: merged[i],
            rank: r + 1,
        })
        .collect()
}

/// Ranks every model in the transfer space for a task known only by its
/// proxy embedding. Reads nothing from disk.
pub fn rank_models(
    space: &TransferSpace,
    regressor: &ProxyRegressor,
    meta_model: &MetaModel,
    manifest: &Manifest,
    arch: Option<&ArchEmbeddings>,
    task_id: &str,
    cfg: &MergeConfig,
) -> Result<RankingReport> {
    cfg.validate()?;
    let task = manifest
        .task(task_id)
        .ok_or_else(|| Error::invalid("task", format!("{task_id} not in manifest")))?;
    let g = task
        .proxy_embedding
        .as_ref()
        .ok_or_else(|| Error::invalid("task", format!("{task_id} has no proxy embedding")))?;
    if regressor.output_dim != space.k() {
        return Err(Error::Dimension(format!(
            "regressor predicts {} dims, transfer space has k = {}",
            regressor.output_dim,
            space.k()
        )));
    }
    let d_t = regressor.infer_task_vector(g)?;

    let layout = &meta_model.layout;
    let digest = layout.digest();
    let task_part = task_features(task)?;
    let records: BTreeMap<&str, &ModelRecord> = manifest.models.iter().map(|m| (m.model_id.as_str(), m)).collect();
    let mut trans = Vec::with_capacity(space.model_ids.len());
    let mut meta = Vec::with_capacity(space.model_ids.len());
    for (i, m) in space.model_ids.iter().enumerate() {
        let model = records
            .get(m.as_str())
            .ok_or_else(|| Error::invalid("model_id", format!("{m} not in manifest")))?;
        trans.push(transfer_score(space, i, &d_t)?);
        let (mut values, missing_embedding) = model_features(layout, model, arch_lookup(arch, m))?;
        values.extend(task_part);
        let mv = MetaVector {
            values,
            layout_digest: digest.clone(),
            missing_embedding,
        };
        meta.push(meta_score(meta_model, &mv)?);
    }
    let merged = merge_scores(&trans, &meta, cfg)?;
    Ok(RankingReport {
        task_id: task_id.to_string(),
        alpha: cfg.alpha,
        normalize: cfg.normalize,
        task_vector: d_t,
        entries: rank_entries(&space.model_ids, &trans, &meta, &merged),
        config_digest: None,
    })
}
