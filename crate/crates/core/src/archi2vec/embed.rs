//! Graph-level embeddings: each graph is a document of WL tokens and its
//! vector is trained PV-DBOW style, predicting the document's tokens with
//! skip-gram negative sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::ArchGraph;
use super::wl::wl_document;
use crate::error::{Error, Result};
use crate::io::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub dim: usize,
    pub wl_iterations: usize,
    pub epochs: usize,
    pub negative: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 64,
            wl_iterations: 2,
            epochs: 100,
            negative: 5,
            learning_rate: 0.025,
            min_learning_rate: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEmbedding {
    pub graph_id: String,
    /// Unit norm.
    pub vector: Vec<f64>,
    pub wl_iterations: usize,
    /// Digest of the sorted token vocabulary the vector was trained against.
    pub vocab_hash: String,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cumulative unigram^0.75 distribution for negative draws.
struct NegativeTable {
    cumulative: Vec<f64>,
}

impl NegativeTable {
    fn new(counts: &[usize]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        NegativeTable { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.gen::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

/// Trains one vector per graph. Graphs are processed in `graph_id` order;
/// graphs with identical token documents share one trained vector. Training
/// is single-threaded so a seed fixes the output bit for bit.
pub fn train_graph_embeddings(graphs: &[ArchGraph], cfg: &EmbedConfig) -> Result<Vec<GraphEmbedding>> {
    if graphs.is_empty() {
        return Err(Error::invalid("graphs", "empty graph list"));
    }
    if cfg.dim < 2 {
        return Err(Error::invalid("archi2vec.dim", "must be at least 2"));
    }
    if cfg.negative == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("archi2vec", "epochs and negative must be positive"));
    }

    let mut order: Vec<usize> = (0..graphs.len()).collect();
    order.sort_by(|&a, &b| graphs[a].graph_id.cmp(&graphs[b].graph_id));

    let mut doc_index: BTreeMap<Vec<(String, usize)>, usize> = BTreeMap::new();
    let mut docs: Vec<BTreeMap<String, usize>> = Vec::new();
    let mut graph_doc = vec![0usize; graphs.len()];
    for &g in &order {
        let doc = wl_document(&graphs[g], cfg.wl_iterations);
        let key: Vec<(String, usize)> = doc.iter().map(|(t, c)| (t.clone(), *c)).collect();
        let next = docs.len();
        let idx = *doc_index.entry(key).or_insert(next);
        if idx == next {
            docs.push(doc);
        }
        graph_doc[g] = idx;
    }

    let mut vocab: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &docs {
        for (t, c) in doc {
            *vocab.entry(t.as_str()).or_insert(0) += c;
        }
    }
    let token_ids: BTreeMap<&str, usize> = vocab.keys().enumerate().map(|(i, t)| (*t, i)).collect();
    let counts: Vec<usize> = vocab.values().copied().collect();
    let vocab_hash = sha256_hex(vocab.keys().copied().collect::<Vec<_>>().join("\n").as_bytes());

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for (t, &c) in doc {
            let w = token_ids[t.as_str()];
            pairs.extend(std::iter::repeat_n((d, w), c));
        }
    }

    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut doc_vecs: Vec<f64> = (0..docs.len() * dim)
        .map(|_| (rng.gen::<f64>() - 0.5) / dim as f64)
        .collect();
    let mut out_vecs = vec![0.0f64; counts.len() * dim];
    let table = NegativeTable::new(&counts);

    let total_steps = (cfg.epochs * pairs.len()) as f64;
    let mut step = 0usize;
    let mut grad = vec![0.0f64; dim];
    for _ in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        for &(d, w) in &pairs {
            let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps)).max(cfg.min_learning_rate);
            step += 1;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let dv = d * dim..(d + 1) * dim;
            for s in 0..=cfg.negative {
                let (target, label) = if s == 0 {
                    (w, 1.0)
                } else {
                    let neg = table.sample(&mut rng);
                    if neg == w {
                        continue;
                    }
                    (neg, 0.0)
                };
                let ov = target * dim..(target + 1) * dim;
                let f: f64 = doc_vecs[dv.clone()].iter().zip(&out_vecs[ov.clone()]).map(|(a, b)| a * b).sum();
                let g = (label - sigmoid(f)) * lr;
                for k in 0..dim {
                    grad[k] += g * out_vecs[ov.start + k];
                    out_vecs[ov.start + k] += g * doc_vecs[dv.start + k];
                }
            }
            for k in 0..dim {
                doc_vecs[dv.start + k] += grad[k];
            }
        }
    }

    Ok(graphs
        .iter()
        .enumerate()
        .map(|(g, graph)| {
            let d = graph_doc[g];
            let mut v = doc_vecs[d * dim..(d + 1) * dim].to_vec();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            GraphEmbedding {
                graph_id: graph.graph_id.clone(),
                vector: v,
                wl_iterations: cfg.wl_iterations,
                vocab_hash: vocab_hash.clone(),
            }
        })
        .collect())
}
