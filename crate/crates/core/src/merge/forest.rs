//! Multi-output random forest regressor mapping proxy embeddings to task
//! vectors in the transfer space.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_seed, read_text, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    pub num_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means ⌈dim / 3⌉.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            num_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            bootstrap: true,
            max_features: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 {
            return Err(Error::invalid("forest.num_trees", "must be at least 1"));
        }
        if self.min_leaf == 0 {
            return Err(Error::invalid("forest.min_leaf", "must be at least 1"));
        }
        if self.max_features == Some(0) {
            return Err(Error::invalid("forest.max_features", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: Vec<f64>,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in an arena; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict<'a>(&'a self, x: &[f64]) -> &'a [f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match &t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyRegressor {
    pub config: ForestConfig,
    pub input_dim: usize,
    pub output_dim: usize,
    pub trees: Vec<Tree>,
    /// Per output dimension, on the training pairs.
    pub training_r2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

struct Builder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [Vec<f64>],
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

fn mean_of(ys: &[Vec<f64>], rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; ys[0].len()];
    for &r in rows {
        for (a, y) in m.iter_mut().zip(&ys[r]) {
            *a += y;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

/// Sum over outputs of Σy² − (Σy)²/n.
fn sse(sum: &[f64], sq: &[f64], n: f64) -> f64 {
    sum.iter().zip(sq).map(|(s, q)| q - s * s / n).sum()
}

impl Builder<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: Vec::new() });
        let pure = rows.iter().all(|&r| self.ys[r] == self.ys[rows[0]]);
        let split = if pure || depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_leaf {
            None
        } else {
            self.best_split(&rows, rng)
        };
        self.nodes[at] = match split {
            None => Node::Leaf {
                value: mean_of(self.ys, &rows),
            },
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| self.xs[i][feature] <= threshold);
                let left = self.build(l, depth + 1, rng);
                let right = self.build(r, depth + 1, rng);
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                }
            }
        };
        at
    }

    /// Tries `mtry` random features, continuing through the rest only when
    /// none of them admits a valid split.
    fn best_split(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let dim = self.xs[0].len();
        let outs = self.ys[0].len();
        let mut features: Vec<usize> = (0..dim).collect();
        features.shuffle(rng);
        let min_leaf = self.cfg.min_leaf;
        let n = rows.len();

        let mut best: Option<(f64, usize, f64)> = None;
        for (tried, &f) in features.iter().enumerate() {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            let mut order = rows.to_vec();
            order.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]).then(a.cmp(&b)));
            let mut tot_sum = vec![0.0; outs];
            let mut tot_sq = vec![0.0; outs];
            for &r in &order {
                for o in 0..outs {
                    tot_sum[o] += self.ys[r][o];
                    tot_sq[o] += self.ys[r][o] * self.ys[r][o];
                }
            }
            let mut l_sum = vec![0.0; outs];
            let mut l_sq = vec![0.0; outs];
            for pos in 0..n - 1 {
                let r = order[pos];
                for o in 0..outs {
                    l_sum[o] += self.ys[r][o];
                    l_sq[o] += self.ys[r][o] * self.ys[r][o];
                }
                let nl = pos + 1;
                let (lo, hi) = (self.xs[r][f], self.xs[order[pos + 1]][f]);
                if nl < min_leaf || n - nl < min_leaf || lo >= hi {
                    continue;
                }
                let r_sum: Vec<f64> = tot_sum.iter().zip(&l_sum).map(|(t, l)| t - l).collect();
                let r_sq: Vec<f64> = tot_sq.iter().zip(&l_sq).map(|(t, l)| t - l).collect();
                let cost = sse(&l_sum, &l_sq, nl as f64) + sse(&r_sum, &r_sq, (n - nl) as f64);
                let threshold = lo + (hi - lo) / 2.0;
                if best.is_none_or(|(c, _, _)| cost < c) {
                    best = Some((cost, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn fit_tree(xs: &[Vec<f64>], ys: &[Vec<f64>], cfg: &ForestConfig, mtry: usize, seed: u64) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let rows: Vec<usize> = if cfg.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut b = Builder {
        xs,
        ys,
        cfg,
        mtry,
        nodes: Vec::new(),
    };
    b.build(rows, 0, &mut rng);
    Tree { nodes: b.nodes }
}

/// Fits one forest predicting the whole target vector. Trees are grown in
/// parallel from per-tree seeds, so the result does not depend on thread
/// scheduling.
pub fn fit_proxy_regressor(xs: &[Vec<f64>], ys: &[Vec<f64>], cfg: &ForestConfig) -> Result<ProxyRegressor> {
    cfg.validate()?;
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("{} inputs but {} targets", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("proxy", format!("need at least 2 training pairs, got {}", xs.len())));
    }
    let input_dim = xs[0].len();
    let output_dim = ys[0].len();
    if input_dim == 0 || output_dim == 0 {
        return Err(Error::Dimension("empty input or target vectors".into()));
    }
    if xs.iter().any(|x| x.len() != input_dim) || ys.iter().any(|y| y.len() != output_dim) {
        return Err(Error::Dimension("inconsistent vector lengths in training pairs".into()));
    }
    if xs.iter().chain(ys).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("proxy", "non-finite training value"));
    }
    let mtry = cfg.max_features.unwrap_or(input_dim.div_ceil(3)).min(input_dim);
    let trees: Vec<Tree> = (0..cfg.num_trees)
        .into_par_iter()
        .map(|t| fit_tree(xs, ys, cfg, mtry, derive_seed(cfg.seed, &format!("tree/{t}"))))
        .collect();
    let mut reg = ProxyRegressor {
        config: cfg.clone(),
        input_dim,
        output_dim,
        trees,
        training_r2: Vec::new(),
        config_digest: None,
    };

    let preds: Vec<Vec<f64>> = xs.iter().map(|x| reg.average(x)).collect();
    reg.training_r2 = (0..output_dim)
        .map(|o| {
            let mean = ys.iter().map(|y| y[o]).sum::<f64>() / ys.len() as f64;
            let sst: f64 = ys.iter().map(|y| (y[o] - mean).powi(2)).sum();
            let sse: f64 = ys.iter().zip(&preds).map(|(y, p)| (y[o] - p[o]).powi(2)).sum();
            if sst > 0.0 {
                1.0 - sse / sst
            } else if sse == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(reg)
}

impl ProxyRegressor {
    fn average(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict(x)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.trees.len() as f64);
        out
    }

    /// Mean of the tree predictions, without clamping.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "proxy embedding has {} entries, regressor expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(self.average(x))
    }

    /// Task vector for a proxy embedding, clamped to the non-negative orthant.
    pub fn infer_task_vector(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(g)?.into_iter().map(|v| v.max(0.0)).collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, &(serde_json::to_string(self)? + "\n"))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let r: ProxyRegressor = serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        for t in &r.trees {
            for n in &t.nodes {
                match n {
                    Node::Leaf { value } if value.len() != r.output_dim => {
                        return Err(Error::Dimension(format!("{}: leaf width mismatch", path.display())))
                    }
                    Node::Split { feature, left, right, .. }
                        if *feature >= r.input_dim || *left >= t.nodes.len() || *right >= t.nodes.len() =>
                    {
                        return Err(Error::parse(path.display().to_string(), "split references out of range"))
                    }
                    _ => {}
                }
            }
        }
        Ok(r)
    }
}
