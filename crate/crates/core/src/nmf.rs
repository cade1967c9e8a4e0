//! Regularized non-negative factorization of the performance matrix.
//!
//! Minimizes `‖P − M Dᵀ‖²_F + α_m‖M‖²_F + α_d‖D‖²_F` over `M, D ≥ 0` with
//! multiplicative updates:
//!
//! ```text
//! M ← M ⊙ (P D) ⊘ (M DᵀD + α_m M)
//! D ← D ⊙ (Pᵀ M) ⊘ (D MᵀM + α_d D)
//! ```
//!
//! Each step is a majorize-minimize step, so the objective never increases.
//! One iteration repeats each factor's update a few times while the other is
//! held fixed, reusing the shared products.

use std::path::Path;

use nalgebra::{DMatrix, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledMatrix, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::io::{derive_seed, read_text, write_atomic};

/// Floor for initial factor entries; exact zeros never recover under MU.
const INIT_FLOOR: f64 = 1e-6;
/// Inner repeats per factor update.
const INNER_STEPS: usize = 10;
const INNER_EPS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmfInit {
    SeededUniform,
    NndsvdLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmfConfig {
    pub k: usize,
    pub alpha_m: f64,
    pub alpha_d: f64,
    pub max_iters: usize,
    /// Stop once one iteration lowers the objective by less than
    /// `rel_tol` times the objective at initialization.
    pub rel_tol: f64,
    pub seed: u64,
    /// Start of the first run; later runs start seeded uniform.
    pub init: NmfInit,
    /// Independent runs; the lowest final objective wins.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    5
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            k: 8,
            alpha_m: 0.01,
            alpha_d: 0.01,
            max_iters: 500,
            rel_tol: 1e-6,
            seed: 0,
            init: NmfInit::SeededUniform,
            restarts: default_restarts(),
        }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("nmf.k", "must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("nmf.restarts", "must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("nmf.max_iters", "must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("nmf.rel_tol", "must be positive"));
        }
        if !(self.alpha_m >= 0.0) || !(self.alpha_d >= 0.0) {
            return Err(Error::invalid("nmf.alpha", "regularization weights must be >= 0"));
        }
        Ok(())
    }
}

/// Learned latent transfer space.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSpace {
    pub model_ids: Vec<String>,
    pub task_ids: Vec<String>,
    /// M × k, non-negative.
    pub model_factors: DMatrix<f64>,
    /// N × k, non-negative.
    pub task_factors: DMatrix<f64>,
    pub info: FactorizationInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizationInfo {
    pub k: usize,
    pub alpha_m: f64,
    pub alpha_d: f64,
    pub seed: u64,
    pub init: NmfInit,
    /// Run whose factors were kept; 0 is the `init` start.
    #[serde(default)]
    pub best_restart: usize,
    pub final_objective: f64,
    pub iterations_run: usize,
    /// Stopped on `rel_tol` rather than `max_iters`.
    pub converged: bool,
    /// Objective at initialization followed by one value per iteration,
    /// for the kept run.
    pub objective_history: Vec<f64>,
    /// Models whose performance row is all zeros (zero factor rows).
    pub zero_models: Vec<String>,
    /// Tasks whose performance column is all zeros.
    pub zero_tasks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub fn objective(p: &DMatrix<f64>, m: &DMatrix<f64>, d: &DMatrix<f64>, alpha_m: f64, alpha_d: f64) -> f64 {
    let resid = p - m * d.transpose();
    resid.norm_squared() + alpha_m * m.norm_squared() + alpha_d * d.norm_squared()
}

fn init_factors(p: &DMatrix<f64>, cfg: &NmfConfig, restart: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = p.shape();
    let k = cfg.k;
    let (init, seed) = match restart {
        0 => (cfg.init, cfg.seed),
        r => (NmfInit::SeededUniform, derive_seed(cfg.seed, &format!("restart/{r}"))),
    };
    match init {
        NmfInit::SeededUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(rows, k, |_, _| rng.gen_range(INIT_FLOOR..1.0));
            let d = DMatrix::from_fn(cols, k, |_, _| rng.gen_range(INIT_FLOOR..1.0));
            (m, d)
        }
        NmfInit::NndsvdLike => nndsvd(p, k),
    }
}

/// Non-negative double SVD start: for each singular triplet keep the
/// dominant sign-part of the singular vectors.
fn nndsvd(p: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = p.shape();
    let svd = SVD::new(p.clone(), true, true);
    let u = svd.u.expect("svd computed with u");
    let vt = svd.v_t.expect("svd computed with v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let fill = p.mean().max(INIT_FLOOR);
    let mut m = DMatrix::from_element(rows, k, fill);
    let mut d = DMatrix::from_element(cols, k, fill);
    for (j, &idx) in order.iter().take(k).enumerate() {
        let s = svd.singular_values[idx];
        let x: Vec<f64> = u.column(idx).iter().copied().collect();
        let y: Vec<f64> = vt.row(idx).iter().copied().collect();
        let pos = |v: &[f64]| v.iter().map(|&a| a.max(0.0)).collect::<Vec<_>>();
        let neg = |v: &[f64]| v.iter().map(|&a| (-a).max(0.0)).collect::<Vec<_>>();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let (xp, xn, yp, yn) = (pos(&x), neg(&x), pos(&y), neg(&y));
        let (np, nn) = (norm(&xp) * norm(&yp), norm(&xn) * norm(&yn));
        let (a, b, scale) = if np >= nn {
            (xp.clone(), yp.clone(), np)
        } else {
            (xn.clone(), yn.clone(), nn)
        };
        if scale <= 0.0 {
            continue;
        }
        let (na, nb) = (norm(&a), norm(&b));
        let w = (s * scale).sqrt();
        for i in 0..rows {
            m[(i, j)] = { let v = w * a[i] / na; if v > 0.0 { v } else { fill } };
        }
        for i in 0..cols {
            d[(i, j)] = { let v = w * b[i] / nb; if v > 0.0 { v } else { fill } };
        }
    }
    (m, d)
}

/// `x ← x ⊙ num ⊘ den`, with `0/0 → 0` so all-zero rows stay zero.
fn mu_step(x: &mut DMatrix<f64>, num: &DMatrix<f64>, den: &DMatrix<f64>) {
    for ((v, &n), &dd) in x.iter_mut().zip(num.iter()).zip(den.iter()) {
        *v = if dd > 0.0 { *v * n / dd } else { 0.0 };
    }
}

/// Repeats the update of one factor while the other is held fixed, reusing
/// `num` and `gram`. Stops once a step moves the factor by less than
/// [`INNER_EPS`] of the first step.
fn repeat_step(x: &mut DMatrix<f64>, num: &DMatrix<f64>, gram: &DMatrix<f64>, alpha: f64) {
    let mut first = 0.0;
    for r in 0..INNER_STEPS {
        let prev = x.clone();
        let den = &*x * gram + &*x * alpha;
        mu_step(x, num, &den);
        let moved = (&*x - prev).norm();
        if r == 0 {
            first = moved;
        } else if moved <= INNER_EPS * first {
            break;
        }
    }
}

struct Run {
    m: DMatrix<f64>,
    d: DMatrix<f64>,
    history: Vec<f64>,
    converged: bool,
    iterations: usize,
    restart: usize,
}

impl Run {
    fn objective(&self) -> f64 {
        *self.history.last().unwrap()
    }
}

fn descend(pm: &DMatrix<f64>, mut m: DMatrix<f64>, mut d: DMatrix<f64>, cfg: &NmfConfig, restart: usize) -> Run {
    let mut history = vec![objective(pm, &m, &d, cfg.alpha_m, cfg.alpha_d)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let num = pm * &d;
        let gram = d.transpose() * &d;
        repeat_step(&mut m, &num, &gram, cfg.alpha_m);

        let num = pm.transpose() * &m;
        let gram = m.transpose() * &m;
        repeat_step(&mut d, &num, &gram, cfg.alpha_d);

        debug_assert!(m.iter().chain(d.iter()).all(|&v| v >= 0.0 && v.is_finite()));
        iterations += 1;

        let prev = *history.last().unwrap();
        let initial = history[0];
        let cur = objective(pm, &m, &d, cfg.alpha_m, cfg.alpha_d);
        history.push(cur);
        if initial <= f64::MIN_POSITIVE || (prev - cur).abs() / initial < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    Run { m, d, history, converged, iterations, restart }
}

pub fn factorize(p: &PerformanceMatrix, cfg: &NmfConfig) -> Result<TransferSpace> {
    cfg.validate()?;
    p.validate()?;
    let (rows, cols) = (p.nrows(), p.ncols());
    if cfg.k > rows.min(cols) {
        return Err(Error::invalid(
            "nmf.k",
            format!("k = {} exceeds min(models, tasks) = {}", cfg.k, rows.min(cols)),
        ));
    }
    let pm = &p.values;

    let zero_models: Vec<String> = (0..rows)
        .filter(|&i| pm.row(i).iter().all(|&v| v == 0.0))
        .map(|i| p.model_ids[i].clone())
        .collect();
    let zero_tasks: Vec<String> = (0..cols)
        .filter(|&j| pm.column(j).iter().all(|&v| v == 0.0))
        .map(|j| p.task_ids[j].clone())
        .collect();
    if !zero_models.is_empty() || !zero_tasks.is_empty() {
        log::warn!(
            "performance matrix has {} all-zero model rows and {} all-zero task columns; their factors are zero",
            zero_models.len(),
            zero_tasks.len()
        );
    }

    let mut best: Option<Run> = None;
    for restart in 0..cfg.restarts {
        let (mut m, mut d) = init_factors(pm, cfg, restart);
        for (i, id) in p.model_ids.iter().enumerate() {
            if zero_models.contains(id) {
                m.row_mut(i).fill(0.0);
            }
        }
        for (j, id) in p.task_ids.iter().enumerate() {
            if zero_tasks.contains(id) {
                d.row_mut(j).fill(0.0);
            }
        }
        let run = descend(pm, m, d, cfg, restart);
        if best.as_ref().map_or(true, |b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    let Run { m, d, history, converged, iterations, restart } = best.expect("restarts >= 1");

    Ok(TransferSpace {
        model_ids: p.model_ids.clone(),
        task_ids: p.task_ids.clone(),
        model_factors: m,
        task_factors: d,
        info: FactorizationInfo {
            k: cfg.k,
            alpha_m: cfg.alpha_m,
            alpha_d: cfg.alpha_d,
            seed: cfg.seed,
            init: cfg.init,
            best_restart: restart,
            final_objective: *history.last().unwrap(),
            iterations_run: iterations,
            converged,
            objective_history: history,
            zero_models,
            zero_tasks,
            config_digest: None,
        },
    })
}

/// `m_i · d_t`.
pub fn transfer_score(space: &TransferSpace, model_index: usize, task_vector: &[f64]) -> Result<f64> {
    let k = space.k();
    if task_vector.len() != k {
        return Err(Error::Dimension(format!(
            "task vector has {} entries, transfer space has k = {k}",
            task_vector.len()
        )));
    }
    if model_index >= space.model_ids.len() {
        return Err(Error::invalid(
            "model_index",
            format!("{model_index} out of range for {} models", space.model_ids.len()),
        ));
    }
    Ok(space
        .model_factors
        .row(model_index)
        .iter()
        .zip(task_vector)
        .map(|(a, b)| a * b)
        .sum())
}

impl TransferSpace {
    pub fn k(&self) -> usize {
        self.model_factors.ncols()
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.model_ids.iter().position(|m| m == id)
    }

    pub fn task_vector(&self, task_id: &str) -> Option<Vec<f64>> {
        let j = self.task_ids.iter().position(|t| t == task_id)?;
        Some(self.task_factors.row(j).iter().copied().collect())
    }

    /// `M Dᵀ`.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.model_factors * self.task_factors.transpose()
    }

    fn factor_matrix(corner: &str, ids: &[String], values: &DMatrix<f64>) -> LabeledMatrix {
        LabeledMatrix {
            corner: corner.into(),
            row_ids: ids.to_vec(),
            col_ids: (0..values.ncols()).map(|j| format!("k{j}")).collect(),
            values: values.clone(),
        }
    }

    /// Writes `model_factors.csv`, `task_factors.csv` and `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        Self::factor_matrix("model_id", &self.model_ids, &self.model_factors)
            .save(&dir.join("model_factors.csv"))?;
        Self::factor_matrix("task_id", &self.task_ids, &self.task_factors)
            .save(&dir.join("task_factors.csv"))?;
        write_atomic(
            &dir.join("meta.json"),
            &(serde_json::to_string_pretty(&self.info)? + "\n"),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = LabeledMatrix::load(&dir.join("model_factors.csv"))?;
        let d = LabeledMatrix::load(&dir.join("task_factors.csv"))?;
        let meta_path = dir.join("meta.json");
        let info: FactorizationInfo = serde_json::from_str(&read_text(&meta_path)?)
            .map_err(|e| Error::parse(meta_path.display().to_string(), e.to_string()))?;
        if m.values.ncols() != info.k || d.values.ncols() != info.k {
            return Err(Error::Dimension(format!(
                "factor files disagree with k = {} in meta.json",
                info.k
            )));
        }
        if m.values.iter().chain(d.values.iter()).any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("transfer_space", "negative or non-finite factor entry"));
        }
        Ok(TransferSpace {
            model_ids: m.row_ids,
            task_ids: d.row_ids,
            model_factors: m.values,
            task_factors: d.values,
            info,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(rows: usize, cols: usize, v: &[f64]) -> PerformanceMatrix {
        PerformanceMatrix::new(
            (0..rows).map(|i| format!("m{i}")).collect(),
            (0..cols).map(|j| format!("t{j}")).collect(),
            DMatrix::from_row_slice(rows, cols, v),
        )
        .unwrap()
    }

    fn unregularized(k: usize) -> NmfConfig {
        NmfConfig {
            k,
            alpha_m: 0.0,
            alpha_d: 0.0,
            ..NmfConfig::default()
        }
    }

    #[test]
    fn rank_one_exact() {
        let p = pm(2, 2, &[2.0, 4.0, 1.0, 2.0]);
        let space = factorize(&p, &unregularized(1)).unwrap();
        let err = (&p.values - space.reconstruction()).norm() / p.values.norm();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn planted_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vecs = || DMatrix::from_fn(12, 1, |_, _| rng.gen::<f64>());
        let (u, v, w, z) = (vecs(), vecs(), vecs(), vecs());
        let values = &u * v.transpose() + &w * z.transpose();
        let p = PerformanceMatrix::new(
            (0..12).map(|i| format!("m{i}")).collect(),
            (0..12).map(|j| format!("t{j}")).collect(),
            values,
        )
        .unwrap();
        let cfg = NmfConfig {
            max_iters: 5000,
            rel_tol: 1e-12,
            ..unregularized(2)
        };
        let space = factorize(&p, &cfg).unwrap();
        let err = (&p.values - space.reconstruction()).norm() / p.values.norm();
        assert!(err <= 1e-2, "{err}");
    }

    #[test]
    fn objective_is_monotone_and_factors_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let p = pm(20, 10, &v);
        let space = factorize(&p, &NmfConfig::default()).unwrap();
        for w in space.info.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "{} -> {}", w[0], w[1]);
        }
        assert!(space.model_factors.iter().all(|&x| x >= 0.0));
        assert!(space.task_factors.iter().all(|&x| x >= 0.0));
        assert!(space.info.iterations_run <= 500);
    }

    #[test]
    fn deterministic_for_seed() {
        let p = pm(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.5]);
        let cfg = NmfConfig { k: 2, seed: 9, ..NmfConfig::default() };
        let a = factorize(&p, &cfg).unwrap();
        let b = factorize(&p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_out_of_range() {
        let p = pm(2, 3, &[1.0; 6]);
        assert!(factorize(&p, &NmfConfig { k: 3, ..NmfConfig::default() }).is_err());
        assert!(factorize(&p, &NmfConfig { k: 0, ..NmfConfig::default() }).is_err());
    }

    #[test]
    fn zero_matrix_gives_zero_factors() {
        let p = pm(2, 2, &[0.0; 4]);
        let space = factorize(&p, &NmfConfig { k: 1, ..NmfConfig::default() }).unwrap();
        assert!(space.model_factors.iter().all(|&x| x == 0.0));
        assert!(space.task_factors.iter().all(|&x| x == 0.0));
        assert_eq!(space.info.zero_models.len(), 2);
        assert!(space.info.final_objective == 0.0);
    }

    #[test]
    fn zero_row_is_flagged_not_nan() {
        let p = pm(3, 2, &[1.0, 2.0, 0.0, 0.0, 3.0, 1.0]);
        let space = factorize(&p, &NmfConfig { k: 2, ..NmfConfig::default() }).unwrap();
        assert_eq!(space.info.zero_models, vec!["m1".to_string()]);
        assert!(space.model_factors.row(1).iter().all(|&x| x == 0.0));
        assert!(space.model_factors.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn nndsvd_start_also_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let p = pm(20, 10, &v);
        let cfg = NmfConfig { k: 4, init: NmfInit::NndsvdLike, ..NmfConfig::default() };
        let space = factorize(&p, &cfg).unwrap();
        let h = &space.info.objective_history;
        assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].max(1.0)));
    }

    #[test]
    fn transfer_score_arithmetic() {
        let space = TransferSpace {
            model_ids: vec!["a".into(), "b".into()],
            task_ids: vec!["t".into()],
            model_factors: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, 0.0]),
            task_factors: DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            info: FactorizationInfo {
                k: 2,
                alpha_m: 0.0,
                alpha_d: 0.0,
                seed: 0,
                init: NmfInit::SeededUniform,
                best_restart: 0,
                final_objective: 0.0,
                iterations_run: 0,
                converged: true,
                objective_history: vec![],
                zero_models: vec![],
                zero_tasks: vec![],
                config_digest: None,
            },
        };
        assert_eq!(transfer_score(&space, 0, &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(transfer_score(&space, 1, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(transfer_score(&space, 0, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(transfer_score(&space, 0, &[1.0]), Err(Error::Dimension(_))));
        let t = space.task_vector("t").unwrap();
        let recon = space.reconstruction();
        for i in 0..2 {
            assert_eq!(transfer_score(&space, i, &t).unwrap(), recon[(i, 0)]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let p = pm(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.5]);
        let space = factorize(&p, &NmfConfig { k: 2, ..NmfConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        space.save(dir.path()).unwrap();
        assert_eq!(TransferSpace::load(dir.path()).unwrap(), space);
    }
}
