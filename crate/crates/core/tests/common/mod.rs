#![allow(dead_code)]

//! Test-side oracles shared by integration tests.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Independent reference: whiten with the symmetric square root of the
/// regularized within-class scatter, then eigendecompose the whitened
/// between-class scatter.
pub struct Oracle {
    proj: DMatrix<f64>,
    means: Vec<DVector<f64>>,
    log_priors: Vec<f64>,
}

impl Oracle {
    pub fn fit(x: &DMatrix<f64>, y: &[usize], c: usize, gamma: f64) -> Oracle {
        let (n, d) = x.shape();
        let rows: Vec<DVector<f64>> = (0..n).map(|r| x.row(r).transpose()).collect();
        let mut mu = vec![DVector::zeros(d); c];
        let mut cnt = vec![0usize; c];
        for (v, &l) in rows.iter().zip(y) {
            mu[l] += v;
            cnt[l] += 1;
        }
        for k in 0..c {
            mu[k] /= cnt[k] as f64;
        }
        let overall = rows.iter().fold(DVector::zeros(d), |a, v| a + v) / n as f64;
        let mut sb = DMatrix::zeros(d, d);
        for k in 0..c {
            let diff = &mu[k] - &overall;
            sb += &diff * diff.transpose() * cnt[k] as f64;
        }
        sb /= n as f64;
        let mut sw = DMatrix::zeros(d, d);
        for (v, &l) in rows.iter().zip(y) {
            let diff = v - &mu[l];
            sw += &diff * diff.transpose();
        }
        sw /= n as f64;
        let tr = sw.trace();
        sw += DMatrix::identity(d, d) * (gamma * tr / d as f64);

        let e = SymmetricEigen::new(sw);
        let inv_sqrt = DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let w = &e.eigenvectors * inv_sqrt * e.eigenvectors.transpose();
        let m = &w * &sb * &w;
        let e2 = SymmetricEigen::new((&m + m.transpose()) * 0.5);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| e2.eigenvalues[b].total_cmp(&e2.eigenvalues[a]));
        let top = e2.eigenvalues[order[0]];
        let keep = order
            .iter()
            .take_while(|&&i| e2.eigenvalues[i] > 1e-10 * top)
            .count()
            .min(c - 1);
        let v = e2.eigenvectors.select_columns(&order[..keep]);
        let proj = w * v;
        let means = mu.iter().map(|m| proj.tr_mul(m)).collect();
        let log_priors = cnt.iter().map(|&k| (k as f64 / n as f64).ln()).collect();
        Oracle { proj, means, log_priors }
    }

    pub fn log_scores(&self, x: &[f64]) -> Vec<f64> {
        let f = self.proj.tr_mul(&DVector::from_column_slice(x));
        self.means
            .iter()
            .zip(&self.log_priors)
            .map(|(m, lp)| f.dot(m) - 0.5 * m.dot(m) + lp)
            .collect()
    }

    pub fn score(&self, x: &DMatrix<f64>, y: &[usize]) -> f64 {
        let mut total = 0.0;
        for (r, &l) in y.iter().enumerate() {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            let s = self.log_scores(&row);
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
            total += (s[l] - max).exp() / z;
        }
        total
    }
}
