use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::embed::GraphEmbedding;
use crate::error::{Error, Result};
use crate::io::derive_seed;

pub const MAX_LLOYD_ITERS: usize = 100;
pub const DEFAULT_RESTARTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Cluster ids in order of first appearance in the input.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(p, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > u && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a chosen center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansFit {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let inertia = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
    KMeansFit {
        assignments: assign,
        centroids,
        inertia,
    }
}

/// Relabels clusters by first appearance so ids do not depend on the
/// internal centroid order.
fn canonicalize(fit: KMeansFit) -> KMeansFit {
    let mut map = BTreeMap::new();
    for &a in &fit.assignments {
        let next = map.len();
        map.entry(a).or_insert(next);
    }
    let mut centroids = vec![Vec::new(); map.len()];
    for (&old, &new) in &map {
        centroids[new] = fit.centroids[old].clone();
    }
    KMeansFit {
        assignments: fit.assignments.iter().map(|a| map[a]).collect(),
        centroids,
        inertia: fit.inertia,
    }
}

/// Lloyd's algorithm from seeded k-means++ starts; keeps the lowest-inertia
/// run out of `restarts`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansFit> {
    if k < 1 {
        return Err(Error::invalid("num_clusters", "must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::invalid(
            "num_clusters",
            format!("{k} clusters requested for {} points", points.len()),
        ));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("points differ in length".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("kmeans/{r}")));
        let fit = lloyd(points, kmeans_pp(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(canonicalize(best.unwrap()))
}

pub fn cluster_architectures(
    embeddings: &[GraphEmbedding],
    num_clusters: usize,
    seed: u64,
) -> Result<BTreeMap<String, usize>> {
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let fit = kmeans(&points, num_clusters, seed, DEFAULT_RESTARTS)?;
    Ok(embeddings
        .iter()
        .zip(fit.assignments)
        .map(|(e, a)| (e.graph_id.clone(), a))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..20 {
            let c = i % 2;
            let center = if c == 0 { -10.0 } else { 10.0 };
            pts.push(vec![center + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            truth.push(c);
        }
        (pts, truth)
    }

    #[test]
    fn separated_blobs() {
        let (pts, truth) = blobs(1);
        let fit = kmeans(&pts, 2, 7, 1).unwrap();
        // canonical ids: first point's cluster is 0
        assert_eq!(fit.assignments, truth);
    }

    #[test]
    fn one_cluster_per_point() {
        let (pts, _) = blobs(2);
        let fit = kmeans(&pts, pts.len(), 3, 1).unwrap();
        let mut a = fit.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), pts.len());
        assert!(fit.inertia.abs() < 1e-24);
    }

    #[test]
    fn invalid_cluster_counts() {
        let (pts, _) = blobs(3);
        assert!(kmeans(&pts, 0, 0, 1).is_err());
        assert!(kmeans(&pts, 21, 0, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let (pts, _) = blobs(4);
        assert_eq!(kmeans(&pts, 3, 5, 4).unwrap(), kmeans(&pts, 3, 5, 4).unwrap());
    }
}
