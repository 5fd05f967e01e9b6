#![allow(clippy::needless_range_loop)]

mod common;

use std::sync::OnceLock;

use common::*;
use proptest::prelude::*;
use row_cil::data::{gen_gaussian_clusters, split_tasks_with_order};
use row_cil::nn::{softmax, Matrix};
use row_cil::row::{Learner, TaskModel};
use row_cil::scoring::{
    fit_task_stats, md_coefficient, predict_batch, predict_cil, tp_probability, PredictMode, TaskStats,
    COV_EPS, MD_DELTA,
};
use row_cil::Exec;

fn trained(tasks: usize) -> &'static [TaskModel] {
    static CELL: OnceLock<Vec<TaskModel>> = OnceLock::new();
    let models = CELL.get_or_init(|| {
        let d = gen_gaussian_clusters(6, 8, 60, 0.3, 2).unwrap();
        let seq = split_tasks_with_order(&d, 3, &[0, 1, 2, 3, 4, 5]).unwrap();
        let mut hyper = fast_hyper();
        hyper.epochs = 5;
        let mut l = Learner::new(8, &[16, 16], 30, hyper, 4).unwrap();
        seq.tasks
            .iter()
            .map(|t| {
                l.train_task(t).unwrap();
                l.model.clone()
            })
            .collect()
    });
    &models[..tasks]
}

fn probe() -> Matrix {
    random_matrix(40, 8, &mut rng(123))
}

#[test]
fn single_task_tp_is_one() {
    let m = &trained(1)[0];
    let x = probe();
    for r in x.iter_rows() {
        assert_eq!(tp_probability(m, r).unwrap(), vec![1.0]);
    }
}

#[test]
fn tp_sums_to_one() {
    let m = trained(3).last().unwrap();
    for r in probe().iter_rows() {
        let tp = tp_probability(m, r).unwrap();
        assert_eq!(tp.len(), 3);
        assert!(tp.iter().all(|&p| p >= 0.0));
        assert!((tp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn untrained_model_is_a_state_error() {
    let m = TaskModel::new(8, &[4], 0).unwrap();
    assert!(matches!(
        predict_cil(&m, &[0.0; 8], PredictMode::Full),
        Err(row_cil::Error::State(_))
    ));
}

#[test]
fn no_wp_no_md_is_concatenated_logit_argmax() {
    let m = &trained(2)[1];
    let x = probe();
    let preds = predict_batch(m, &x, PredictMode::NoWpNoMd, Exec::Sequential).unwrap();
    let l0 = m.ood_logits(&x, 0).unwrap();
    let l1 = m.ood_logits(&x, 1).unwrap();
    for (r, p) in preds.iter().enumerate() {
        // brute force: concatenate IND logits, first maximum wins
        let mut concat: Vec<(usize, usize, f64)> = Vec::new();
        for (k, l) in [&l0, &l1].iter().enumerate() {
            let row = l.row(r);
            for (j, &v) in row[..row.len() - 1].iter().enumerate() {
                concat.push((k, j, v));
            }
        }
        let mut best = concat[0];
        for &c in &concat[1..] {
            if c.2 > best.2 {
                best = c;
            }
        }
        assert_eq!((p.task, p.class), (best.0, best.1));
    }
}

#[test]
fn no_wp_is_md_scaled_ind_softmax_argmax() {
    let m = &trained(2)[1];
    let x = probe();
    let preds = predict_batch(m, &x, PredictMode::NoWp, Exec::Sequential).unwrap();
    let inv: Vec<Matrix> = m.stats().iter().map(|s| dense_inverse(&s.covariance)).collect();
    for (r, p) in preds.iter().enumerate() {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for k in 0..2 {
            let f = m.task_features(&x, k).unwrap();
            let u = f.row(r);
            let c = m.stats()[k]
                .means
                .iter()
                .map(|mu| {
                    let d: Vec<f64> = u.iter().zip(mu).map(|(a, b)| a - b).collect();
                    1.0 / quadratic_form_sqrt(&inv[k], &d).max(MD_DELTA)
                })
                .fold(0.0, f64::max);
            let logits = m.heads()[k].ood.forward(&f).unwrap();
            let row = logits.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..row.len() - 1 {
                let s = c * (row[j] - mx).exp() / z;
                if s > best.2 * (1.0 + 1e-12) {
                    best = (k, j, s);
                }
            }
        }
        assert_eq!((p.task, p.class), (best.0, best.1), "row {r}");
    }
}

#[test]
fn full_mode_table_is_wp_times_tp() {
    let m = trained(3).last().unwrap();
    let x = probe();
    for p in predict_batch(m, &x, PredictMode::Full, Exec::default()).unwrap() {
        for (k, row) in p.table.iter().enumerate() {
            assert!((p.wp[k].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                assert!((v - p.wp[k][j] * p.tp[k]).abs() < 1e-12);
            }
        }
        let best = p.table.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(p.table[p.task][p.class], best);
    }
}

#[test]
fn wp_rows_match_head_softmax() {
    let m = trained(2).last().unwrap();
    let x = probe();
    let p = predict_batch(m, &x, PredictMode::Full, Exec::Sequential).unwrap();
    let s1 = softmax(&m.wp_logits(&x, 1).unwrap());
    for (r, pr) in p.iter().enumerate() {
        assert_eq!(pr.wp[1], s1.row(r));
    }
}

#[test]
fn exec_policies_agree() {
    let m = trained(3).last().unwrap();
    let x = random_matrix(600, 8, &mut rng(5));
    for mode in [PredictMode::Full, PredictMode::NoWp, PredictMode::NoWpNoMd] {
        assert_eq!(
            predict_batch(m, &x, mode, Exec::Sequential).unwrap(),
            predict_batch(m, &x, mode, Exec::Parallel).unwrap()
        );
    }
}

#[test]
fn ood_logit_shift_leaves_tp_unchanged() {
    let mut m = trained(2)[1].clone();
    let x = probe();
    let before = predict_batch(&m, &x, PredictMode::Full, Exec::Sequential).unwrap();
    // adding c to every output of head 0 shifts all its logits by c
    m.heads_mut()[0].ood.bias.iter_mut().for_each(|b| *b += 3.0);
    let after = predict_batch(&m, &x, PredictMode::Full, Exec::Sequential).unwrap();
    for (a, b) in before.iter().zip(&after) {
        for (p, q) in a.tp.iter().zip(&b.tp) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

fn random_stats(seed: u64) -> (TaskStats, Vec<f64>) {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..5).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let stats = fit_task_stats(&Matrix::from_rows(&rows).unwrap(), &labels, 3, COV_EPS).unwrap();
    let u = (0..5).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
    (stats, u)
}

proptest! {
    #[test]
    fn md_coefficient_ignores_class_order(seed in any::<u64>(), rot in 0usize..3) {
        let (stats, u) = random_stats(seed);
        let mut perm = stats.clone();
        perm.means.rotate_left(rot);
        perm.means.swap(0, 2);
        prop_assert_eq!(md_coefficient(&stats, &u, MD_DELTA), md_coefficient(&perm, &u, MD_DELTA));
    }

    #[test]
    fn covariance_is_symmetric_positive_definite(seed in any::<u64>()) {
        let (stats, _) = random_stats(seed);
        let c = &stats.covariance;
        for i in 0..c.rows() {
            for j in 0..c.cols() {
                prop_assert_eq!(c.get(i, j), c.get(j, i));
            }
        }
        // a Cholesky factor with a positive diagonal exists iff Σ is PD
        for i in 0..c.rows() {
            prop_assert!(stats.cholesky.get(i, i) > 0.0);
        }
        // smallest eigenvalue via inverse: all quadratic forms positive
        let inv = dense_inverse(c);
        for i in 0..c.rows() {
            prop_assert!(inv.get(i, i) > 0.0);
        }
    }
}
