//! Planted benchmark generator.
//!
//! Ground truth is `a_ij = m*_i · d*_j` rescaled to max 1, plus Gaussian
//! noise. Every artifact the pipeline consumes is generated from the planted
//! factors: forward features are class-conditional Gaussians whose class
//! separation grows with `a_ij`, proxy embeddings are a random linear image
//! of `d*_j`, and each model gets an architecture graph from its family.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archi2vec::builders::{densenet_like, inception_like, mobilenet_like, plain_conv, resnet_like};
use crate::archi2vec::ArchGraph;
use crate::data::{FeatureSet, Manifest, ModelRecord, TaskRecord};
use crate::error::{Error, Result};
use crate::io::{derive_seed, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub models: usize,
    pub tasks: usize,
    /// Planted latent dimension.
    pub k: usize,
    /// Ground-truth noise standard deviation, as a fraction of the largest
    /// noiseless accuracy.
    pub noise: f64,
    pub proxy_dim: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            models: 30,
            tasks: 8,
            k: 4,
            noise: 0.02,
            proxy_dim: 16,
            min_samples: 150,
            max_samples: 300,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models < 2 {
            return Err(Error::invalid("synth.models", "need at least 2 models"));
        }
        if self.tasks < 3 {
            return Err(Error::invalid("synth.tasks", "need at least 3 tasks"));
        }
        if self.k < 1 {
            return Err(Error::invalid("synth.k", "must be at least 1"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("synth.noise", "must be non-negative"));
        }
        if self.proxy_dim < 1 {
            return Err(Error::invalid("synth.proxy_dim", "must be at least 1"));
        }
        if self.min_samples < 2 * MAX_CLASSES || self.max_samples < self.min_samples {
            return Err(Error::invalid(
                "synth.min_samples",
                format!("sample range must satisfy {} <= min <= max", 2 * MAX_CLASSES),
            ));
        }
        Ok(())
    }
}

const FAMILIES: [&str; 5] = ["resnet", "vgg", "densenet", "mobilenet", "inception"];
const MIN_CLASSES: usize = 3;
const MAX_CLASSES: usize = 8;

/// Planted quantities, kept for oracles and diagnostics.
#[derive(Debug, Clone)]
pub struct SynthBench {
    pub manifest: Manifest,
    pub model_factors: DMatrix<f64>,
    pub task_factors: DMatrix<f64>,
    /// Noisy ground truth, models × tasks.
    pub accuracies: DMatrix<f64>,
    pub graphs: Vec<ArchGraph>,
    pub features: Vec<FeatureSet>,
    pub proxies: Vec<Vec<f64>>,
}

fn family_graph(family: usize, variant: usize, id: &str) -> ArchGraph {
    let v = variant % 4;
    match family {
        0 => resnet_like(id, &[1 + v / 2, 1 + (v + 1) / 2, 1 + v / 2, 1 + (v + 1) / 2]),
        1 => plain_conv(id, &[1 + v / 2, 1 + v / 2, 2 + v, 2 + v]),
        2 => densenet_like(id, &[2 + v, 2 + v, 2 + v]),
        3 => mobilenet_like(id, 3 + 2 * v),
        _ => inception_like(id, 1 + v),
    }
}

fn layer_count(g: &ArchGraph) -> u64 {
    (g.count_atom("ConvolutionBackward0") + g.count_atom("AddmmBackward0")) as u64
}

/// Orthonormal class directions scaled so every pair of class means is
/// exactly `separation` apart.
fn class_means(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let g = DMatrix::<f64>::from_fn(dim, classes, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let scale = separation / std::f64::consts::SQRT_2;
    (0..classes)
        .map(|c| q.column(c).iter().map(|v| v * scale).collect())
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthBench> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth"));
    let (m_count, t_count, k) = (cfg.models, cfg.tasks, cfg.k);

    let family_base: Vec<Vec<f64>> = (0..FAMILIES.len())
        .map(|_| (0..k).map(|_| rng.gen_range(0.2..1.0)).collect())
        .collect();
    let mut model_factors = DMatrix::zeros(m_count, k);
    let mut models = Vec::with_capacity(m_count);
    let mut graphs = Vec::with_capacity(m_count);
    for i in 0..m_count {
        let (family, variant) = (i % FAMILIES.len(), i / FAMILIES.len());
        let id = format!("{}{variant:02}", FAMILIES[family]);
        let size: f64 = rng.gen_range(0.0..1.0);
        let quality = 0.6 + 0.6 * size;
        for c in 0..k {
            model_factors[(i, c)] = quality * family_base[family][c] * rng.gen_range(0.8..1.2);
        }
        let graph = family_graph(family, variant, &id);
        let params = (10f64.powf(6.0 + 2.0 * size) * rng.gen_range(0.9..1.1)).round() as u64;
        models.push(ModelRecord {
            model_id: id.clone(),
            param_count: params.max(1),
            layer_count: layer_count(&graph).max(1),
            arch_graph: Some(PathBuf::from(format!("graphs/{id}.json"))),
            arch_embedding: None,
            cluster_id: None,
        });
        graphs.push(graph);
    }

    let task_factors = DMatrix::from_fn(t_count, k, |_, _| rng.gen_range(0.1..1.0));
    let clean = &model_factors * task_factors.transpose();
    let scale = clean.max();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid("synth.noise", e.to_string()))?;
    let accuracies = clean.map(|v| (v / scale + noise.sample(&mut rng)).clamp(0.0, 1.0));

    let b = DMatrix::<f64>::from_fn(cfg.proxy_dim, k, |_, _| StandardNormal.sample(&mut rng));
    let proxy_noise = Normal::new(0.0, 0.01).expect("valid");
    let proxies: Vec<Vec<f64>> = (0..t_count)
        .map(|j| {
            let d = task_factors.row(j).transpose();
            let mut g: Vec<f64> = (&b * d).iter().map(|v| v + proxy_noise.sample(&mut rng)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            g.iter_mut().for_each(|v| *v /= norm);
            g
        })
        .collect();

    let dims: Vec<usize> = (0..m_count).map(|i| 10 + (i % FAMILIES.len()) + (i / FAMILIES.len()) % 3).collect();
    let mut tasks = Vec::with_capacity(t_count);
    let mut features = Vec::with_capacity(t_count * m_count);
    for j in 0..t_count {
        let task_id = format!("task{j:02}");
        let classes = rng.gen_range(MIN_CLASSES..=MAX_CLASSES);
        let n = rng.gen_range(cfg.min_samples..=cfg.max_samples);
        let mut labels: Vec<usize> = (0..n).map(|r| r % classes).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        let mut feature_files = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for (i, model) in models.iter().enumerate() {
            let a = accuracies[(i, j)];
            let dim = dims[i];
            let means = class_means(classes, dim, 0.5 + 4.0 * a, &mut rng);
            let x = DMatrix::from_fn(n, dim, |r, c| means[labels[r]][c] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            features.push(FeatureSet::new(&task_id, &model.model_id, classes, x, labels.clone())?);
            feature_files.insert(
                model.model_id.clone(),
                PathBuf::from(format!("features/{task_id}/{}.csv", model.model_id)),
            );
            truth.insert(model.model_id.clone(), a);
        }
        tasks.push(TaskRecord {
            task_id: task_id.clone(),
            class_count: classes,
            sample_count: n,
            feature_files,
            proxy_file: Some(PathBuf::from(format!("proxy/{task_id}.csv"))),
            proxy_embedding: Some(proxies[j].clone()),
            ground_truth: Some(truth),
        });
    }

    Ok(SynthBench {
        manifest: Manifest::new(models, tasks)?,
        model_factors,
        task_factors,
        accuracies,
        graphs,
        features,
        proxies,
    })
}

impl SynthBench {
    /// Writes `manifest.json`, `features/`, `graphs/`, `proxy/` and a
    /// `pipeline.json` that runs every stage with outputs under `out/`, with
    /// the factorization rank set to the planted one.
    pub fn write(&self, dir: &Path, seed: u64) -> Result<PathBuf> {
        for fs in &self.features {
            fs.save(&dir.join("features").join(&fs.task_id).join(format!("{}.csv", fs.model_id)))?;
        }
        for g in &self.graphs {
            g.save(&dir.join("graphs").join(format!("{}.json", g.graph_id)))?;
        }
        for (t, g) in self.manifest.tasks.iter().zip(&self.proxies) {
            let text = format!("# mean-pooled proxy embedding, L2-normalized\n{}", crate::data::vector_to_csv(g));
            write_atomic(&dir.join("proxy").join(format!("{}.csv", t.task_id)), &text)?;
        }
        // proxies live in files; the manifest carries only the references
        let mut manifest = self.manifest.clone();
        for t in &mut manifest.tasks {
            t.proxy_embedding = None;
        }
        let manifest_path = dir.join("manifest.json");
        manifest.save(&manifest_path)?;

        let target = self.manifest.tasks.last().expect("tasks validated").task_id.clone();
        let config = crate::pipeline::PipelineConfig {
            manifest: PathBuf::from("manifest.json"),
            out_dir: PathBuf::from("out"),
            targets: vec![target],
            seed,
            nmf: crate::pipeline::NmfSection {
                k: self.model_factors.ncols(),
                ..Default::default()
            },
            ..Default::default()
        };
        let config_path = dir.join("pipeline.json");
        config.save(&config_path)?;
        Ok(config_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            models: 6,
            tasks: 3,
            min_samples: 40,
            max_samples: 60,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let b = generate(&small()).unwrap();
        assert_eq!(b.manifest.models.len(), 6);
        assert_eq!(b.features.len(), 18);
        assert!(b.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(b.model_factors.iter().chain(b.task_factors.iter()).all(|v| *v > 0.0));
        for g in &b.proxies {
            assert!((g.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_means_equidistant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = class_means(4, 10, 3.0, &mut rng);
        for a in 0..4 {
            for b in a + 1..4 {
                let d: f64 = m[a].iter().zip(&m[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.accuracies, b.accuracies);
        assert_eq!(a.features, b.features);
    }
}
