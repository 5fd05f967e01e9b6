#![allow(clippy::needless_range_loop)]
//! Independent oracles shared by the integration suites: central finite
//! differences, a Gauss-Jordan dense inverse, and small fixtures.
#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use row_cil::data::{gen_gaussian_clusters, split_tasks_with_order, TaskSequence};
use row_cil::nn::{Matrix, Network};
use row_cil::row::Hyper;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Relative error with a tiny floor so that two exact zeros agree.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn central_difference<F: FnMut(f64) -> f64>(x0: f64, mut f: F) -> f64 {
    (f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2.0 * FD_STEP)
}

/// `L = Σ upstream ⊙ net(x)`: its gradient is what `backward` returns for
/// the given upstream matrix.
pub fn probe_loss(net: &Network, x: &Matrix, gates: Option<&[Vec<f64>]>, upstream: &Matrix) -> f64 {
    let (f, _) = net.forward(x, gates).unwrap();
    f.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn dense_inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    let data = m.into_iter().flat_map(|row| row[n..].to_vec()).collect();
    Matrix::new(n, n, data).unwrap()
}

/// `sqrt(dᵀ A d)` by explicit summation.
pub fn quadratic_form_sqrt(inv: &Matrix, d: &[f64]) -> f64 {
    let n = d.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += d[i] * inv.get(i, j) * d[j];
        }
    }
    s.sqrt()
}

/// The 4-task, 8-class benchmark (dim 16, 200 samples per class) with a
/// fixed class order.
pub fn benchmark_tasks(spread: f64) -> TaskSequence {
    let d = gen_gaussian_clusters(8, 16, 200, spread, 0).unwrap();
    split_tasks_with_order(&d, 4, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap()
}

pub fn fast_hyper() -> Hyper {
    Hyper {
        lr: 0.05,
        wp_lr: 0.05,
        tp_lr: 0.05,
        ..Hyper::default()
    }
}
