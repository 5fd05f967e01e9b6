//! Mahalanobis task coefficient, task-id probability and the final
//! class-incremental decision.
//!
//! A test input is scored against every learned task `k`:
//!
//! * `c_k(x) = max_y 1 / MD(f(x, k); μ_y, Σ_k)`, the inverse distance to the
//!   closest class mean of the task,
//! * `raw_k = c_k(x) · max_j softmax(h_k(f(x, k)))_j`, where the OOD logit
//!   sits in the softmax denominator but not in the max,
//! * `P(task k | x) = raw_k / Σ_t raw_t`,
//! * `P(class j of task k | x) = softmax(g_k(f(x, k)))_j · P(task k | x)`.
//!
//! The decision is the argmax over that table, ties going to the lowest
//! `(task, class)` pair.

use crate::error::{input, shape, Error, Result};
use crate::nn::{softmax_in_place, Matrix};
use crate::par::{self, Exec};
use crate::row::TaskModel;

/// Relative covariance ridge: `ε = COV_EPS · trace(Σ) / dim`.
pub const COV_EPS: f64 = 1e-6;
/// Distance floor used by [`md_coefficient`].
pub const MD_DELTA: f64 = 1e-6;

/// Class means and the pooled, ridge-regularized covariance of one task,
/// with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub means: Vec<Vec<f64>>,
    pub covariance: Matrix,
    /// Lower-triangular `L` with `L Lᵀ = Σ`.
    pub cholesky: Matrix,
}

/// Fit per-class means and `Σ = Σ_y Σ_y + ε I` with biased (1/n) class
/// covariances. `labels` are local class indices `< num_classes`.
pub fn fit_task_stats(features: &Matrix, labels: &[usize], num_classes: usize, eps_rel: f64) -> Result<TaskStats> {
    if labels.len() != features.rows() {
        return Err(shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let dim = features.cols();
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![vec![0.0; dim]; num_classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= num_classes {
            return Err(input(format!("label {y} >= {num_classes} classes")));
        }
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(row) {
            *m += v;
        }
    }
    if let Some(y) = counts.iter().position(|&c| c < 2) {
        return Err(input(format!("class {y} has {} samples, need at least 2", counts[y])));
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    // Σ_y Σ_y = Σ_y (1/n_y) Σ_i (x_i − μ_y)(x_i − μ_y)ᵀ
    let mut cov = Matrix::zeros(dim, dim);
    let mut centred = vec![0.0; dim];
    for (row, &y) in features.iter_rows().zip(labels) {
        let w = 1.0 / counts[y] as f64;
        for (c, (v, m)) in centred.iter_mut().zip(row.iter().zip(&means[y])) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centred[i] * w;
            if ci == 0.0 {
                continue;
            }
            let dst = cov.row_mut(i);
            for j in 0..dim {
                dst[j] += ci * centred[j];
            }
        }
    }
    // symmetrize exactly
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let trace: f64 = (0..dim).map(|i| cov.get(i, i)).sum();
    let eps = if trace > 0.0 {
        eps_rel * trace / dim as f64
    } else {
        eps_rel
    };
    for i in 0..dim {
        cov.set(i, i, cov.get(i, i) + eps);
    }
    let cholesky = cholesky(&cov)?;
    Ok(TaskStats {
        means,
        covariance: cov,
        cholesky,
    })
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(shape("cholesky of a non-square matrix"));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if d.is_nan() || d <= 0.0 {
                    return Err(Error::Numeric(format!("covariance is not positive definite at pivot {i}")));
                }
                l.set(i, i, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

impl TaskStats {
    pub fn dim(&self) -> usize {
        self.covariance.rows()
    }

    /// `sqrt((u − μ)ᵀ Σ⁻¹ (u − μ))` via forward substitution on `L`.
    pub fn mahalanobis(&self, u: &[f64], mean: &[f64]) -> f64 {
        let n = self.dim();
        let mut z = vec![0.0; n];
        let mut sq = 0.0;
        for i in 0..n {
            let row = self.cholesky.row(i);
            let s: f64 = (0..i).map(|k| row[k] * z[k]).sum();
            z[i] = (u[i] - mean[i] - s) / row[i];
            sq += z[i] * z[i];
        }
        sq.sqrt()
    }
}

/// `max_y 1 / max(MD(u; μ_y, Σ), δ)`.
pub fn md_coefficient(stats: &TaskStats, u: &[f64], delta: f64) -> f64 {
    stats
        .means
        .iter()
        .map(|m| 1.0 / stats.mahalanobis(u, m).max(delta))
        .fold(0.0, f64::max)
}

/// Largest in-distribution softmax probability of an OOD-head row whose
/// last logit is the OOD class.
pub fn max_ind_probability(ood_logits: &[f64]) -> f64 {
    let mut p = ood_logits.to_vec();
    softmax_in_place(&mut p);
    p[..p.len() - 1].iter().copied().fold(0.0, f64::max)
}

/// Normalize non-negative task scores into a distribution.
pub fn normalize_tasks(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|r| r / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// WP rows times TP.
    Full,
    /// OOD heads only: `c_k · softmax(h_k)_j` over IND classes.
    NoWp,
    /// OOD heads only, raw IND logits concatenated across tasks.
    NoWpNoMd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CilPrediction {
    /// Decision scores per task and local class. In [`PredictMode::Full`]
    /// these are the joint probabilities `WP · TP`.
    pub table: Vec<Vec<f64>>,
    /// Task-id distribution. Drops the MD coefficient in `NoWpNoMd`.
    pub tp: Vec<f64>,
    /// Within-task distributions: the WP head in `Full`, otherwise the OOD
    /// head renormalized over its IND classes.
    pub wp: Vec<Vec<f64>>,
    pub task: usize,
    pub class: usize,
}

/// First maximum in row-major order.
pub fn argmax_table(table: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for (k, row) in table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = (k, j);
            }
        }
    }
    best
}

/// Joint table `wp[k][j] · tp[k]` and its argmax.
pub fn combine(wp: Vec<Vec<f64>>, tp: Vec<f64>) -> CilPrediction {
    let table: Vec<Vec<f64>> = wp
        .iter()
        .zip(&tp)
        .map(|(row, &t)| row.iter().map(|w| w * t).collect())
        .collect();
    let (task, class) = argmax_table(&table);
    CilPrediction {
        table,
        tp,
        wp,
        task,
        class,
    }
}

/// Per-task head outputs for a batch, computed under each task's mask.
struct TaskOutputs {
    ood_logits: Matrix,
    wp_logits: Matrix,
    features: Matrix,
}

fn task_outputs(model: &TaskModel, batch: &Matrix, exec: Exec) -> Result<Vec<TaskOutputs>> {
    if model.num_tasks() == 0 {
        return Err(Error::State("no task has been trained".into()));
    }
    (0..model.num_tasks())
        .map(|k| {
            let features = model.task_features_with(batch, k, exec)?;
            let heads = &model.heads()[k];
            Ok(TaskOutputs {
                ood_logits: heads.ood.forward_with(&features, exec)?,
                wp_logits: heads.wp.forward_with(&features, exec)?,
                features,
            })
        })
        .collect()
}

fn assemble(model: &TaskModel, outs: &[TaskOutputs], r: usize, mode: PredictMode, delta: f64) -> CilPrediction {
    let ind_wp: Vec<Vec<f64>> = outs
        .iter()
        .map(|o| {
            let row = o.ood_logits.row(r);
            let mut p = row[..row.len() - 1].to_vec();
            softmax_in_place(&mut p);
            p
        })
        .collect();
    let coeff = |k: usize| md_coefficient(&model.stats()[k], outs[k].features.row(r), delta);
    match mode {
        PredictMode::Full => {
            let raw: Vec<f64> = (0..outs.len())
                .map(|k| coeff(k) * max_ind_probability(outs[k].ood_logits.row(r)))
                .collect();
            let wp = outs
                .iter()
                .map(|o| {
                    let mut p = o.wp_logits.row(r).to_vec();
                    softmax_in_place(&mut p);
                    p
                })
                .collect();
            combine(wp, normalize_tasks(&raw))
        }
        PredictMode::NoWp => {
            let table: Vec<Vec<f64>> = (0..outs.len())
                .map(|k| {
                    let c = coeff(k);
                    let mut p = outs[k].ood_logits.row(r).to_vec();
                    softmax_in_place(&mut p);
                    p.pop();
                    p.into_iter().map(|v| c * v).collect()
                })
                .collect();
            let raw: Vec<f64> = table.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect();
            let (task, class) = argmax_table(&table);
            CilPrediction {
                table,
                tp: normalize_tasks(&raw),
                wp: ind_wp,
                task,
                class,
            }
        }
        PredictMode::NoWpNoMd => {
            let table: Vec<Vec<f64>> = outs
                .iter()
                .map(|o| {
                    let row = o.ood_logits.row(r);
                    row[..row.len() - 1].to_vec()
                })
                .collect();
            let raw: Vec<f64> = outs.iter().map(|o| max_ind_probability(o.ood_logits.row(r))).collect();
            let (task, class) = argmax_table(&table);
            CilPrediction {
                table,
                tp: normalize_tasks(&raw),
                wp: ind_wp,
                task,
                class,
            }
        }
    }
}

/// `P(task k | x)` for every learned task.
pub fn tp_probability(model: &TaskModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(predict_cil(model, x, PredictMode::Full)?.tp)
}

pub fn predict_cil(model: &TaskModel, x: &[f64], mode: PredictMode) -> Result<CilPrediction> {
    let batch = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(predict_batch(model, &batch, mode, Exec::Sequential)?.remove(0))
}

/// Predictions for every row of `batch`; rows are scored independently
/// and in parallel under [`Exec::Parallel`].
pub fn predict_batch(model: &TaskModel, batch: &Matrix, mode: PredictMode, exec: Exec) -> Result<Vec<CilPrediction>> {
    let outs = task_outputs(model, batch, exec)?;
    let delta = model.md_delta();
    Ok(par::map_indices(exec, batch.rows(), |r| assemble(model, &outs, r, mode, delta)))
}
