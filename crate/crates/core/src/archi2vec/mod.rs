//! Architecture encoding: runtime graphs → WL token documents → embeddings
//! → clusters.

pub mod builders;
pub mod embed;
pub mod graph;
pub mod kmeans;
pub mod wl;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use embed::{cosine, train_graph_embeddings, EmbedConfig, GraphEmbedding};
pub use graph::{load_graph_dir, ArchGraph, ArchNode, ATOMS, UNKNOWN_ATOM};
pub use kmeans::{cluster_architectures, kmeans, KMeansFit};
pub use wl::wl_relabel;

use crate::error::{Error, Result};
use crate::io::{content_lines, fmt_f64, parse_f64, read_text, write_atomic};

/// Embeddings and cluster ids for a model repository, as written by the
/// `archi2vec` stage. Embeddings are kept sorted by graph id.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchEmbeddings {
    pub embeddings: Vec<GraphEmbedding>,
    pub clusters: BTreeMap<String, usize>,
    pub info: ArchInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchInfo {
    pub dim: usize,
    pub wl_iterations: usize,
    pub num_clusters: usize,
    pub vocab_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl ArchEmbeddings {
    pub fn fit(graphs: &[ArchGraph], cfg: &EmbedConfig, num_clusters: usize) -> Result<Self> {
        let mut embeddings = train_graph_embeddings(graphs, cfg)?;
        embeddings.sort_by(|a, b| a.graph_id.cmp(&b.graph_id));
        let num_clusters = num_clusters.min(embeddings.len());
        let clusters = cluster_architectures(&embeddings, num_clusters, cfg.seed)?;
        let vocab_hash = embeddings[0].vocab_hash.clone();
        Ok(ArchEmbeddings {
            embeddings,
            clusters,
            info: ArchInfo {
                dim: cfg.dim,
                wl_iterations: cfg.wl_iterations,
                num_clusters,
                vocab_hash,
                seed: cfg.seed,
                config_digest: None,
            },
        })
    }

    pub fn get(&self, graph_id: &str) -> Option<(&[f64], usize)> {
        let i = self
            .embeddings
            .binary_search_by(|e| e.graph_id.as_str().cmp(graph_id))
            .ok()?;
        Some((&self.embeddings[i].vector, self.clusters[graph_id]))
    }

    fn sidecar(path: &Path) -> std::path::PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        s.into()
    }

    /// CSV `graph_id,cluster_id,e0..e{d-1}` plus a `<path>.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("graph_id,cluster_id");
        for j in 0..self.info.dim {
            out.push_str(&format!(",e{j}"));
        }
        out.push('\n');
        for e in &self.embeddings {
            out.push_str(&format!("{},{}", e.graph_id, self.clusters[&e.graph_id]));
            for v in &e.vector {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        write_atomic(path, &out)?;
        write_atomic(&Self::sidecar(path), &(serde_json::to_string_pretty(&self.info)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let meta_path = Self::sidecar(path);
        let info: ArchInfo = serde_json::from_str(&read_text(&meta_path)?)
            .map_err(|e| Error::parse(meta_path.display().to_string(), e.to_string()))?;
        let text = read_text(path)?;
        let mut lines = content_lines(&text);
        let (_, header) = lines.next().ok_or_else(|| Error::parse(&origin, "empty file"))?;
        if header.split(',').count() != info.dim + 2 || !header.starts_with("graph_id,cluster_id") {
            return Err(Error::parse(&origin, "malformed header"));
        }
        let mut embeddings = Vec::new();
        let mut clusters = BTreeMap::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != info.dim + 2 {
                return Err(Error::parse(&origin, format!("line {lineno}: wrong column count")));
            }
            let cluster: usize = fields[1]
                .parse()
                .map_err(|_| Error::parse(&origin, format!("line {lineno}: bad cluster id")))?;
            if cluster >= info.num_clusters {
                return Err(Error::parse(&origin, format!("line {lineno}: cluster id out of range")));
            }
            let vector = fields[2..]
                .iter()
                .map(|f| parse_f64(f).ok_or_else(|| Error::parse(&origin, format!("line {lineno}: bad number"))))
                .collect::<Result<Vec<f64>>>()?;
            clusters.insert(fields[0].to_string(), cluster);
            embeddings.push(GraphEmbedding {
                graph_id: fields[0].to_string(),
                vector,
                wl_iterations: info.wl_iterations,
                vocab_hash: info.vocab_hash.clone(),
            });
        }
        embeddings.sort_by(|a, b| a.graph_id.cmp(&b.graph_id));
        Ok(ArchEmbeddings {
            embeddings,
            clusters,
            info,
        })
    }
}
