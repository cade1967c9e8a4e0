//! Cold-start placement of a new task in the transfer space and the final
//! merge of transfer and meta scores.

pub mod forest;
pub mod rank;

pub use forest::{fit_proxy_regressor, ForestConfig, ProxyRegressor};
pub use rank::{merge_scores, rank_entries, rank_models, zscore, MergeConfig, Normalize, RankEntry, RankingReport};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::nmf::TransferSpace;

/// Fits the proxy regressor on `(g_j, d_j)` for every task in the transfer
/// space.
pub fn fit_proxy_from_space(manifest: &Manifest, space: &TransferSpace, cfg: &ForestConfig) -> Result<ProxyRegressor> {
    let mut xs = Vec::with_capacity(space.task_ids.len());
    let mut ys = Vec::with_capacity(space.task_ids.len());
    for (j, t) in space.task_ids.iter().enumerate() {
        let task = manifest
            .task(t)
            .ok_or_else(|| Error::invalid("task_id", format!("{t} not in manifest")))?;
        let g = task
            .proxy_embedding
            .as_ref()
            .ok_or_else(|| Error::invalid("task", format!("{t} has no proxy embedding")))?;
        xs.push(g.clone());
        ys.push(space.task_factors.row(j).iter().copied().collect());
    }
    fit_proxy_regressor(&xs, &ys, cfg)
}
