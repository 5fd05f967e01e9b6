//! Continual-learning metrics and the task-weighting bound multipliers.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{input, Error, Result};

/// `A[i][t]`: accuracy on task `i`'s test split after training task `t`
/// (both 0-based), defined for `i <= t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyLedger {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, task: usize, after: usize, acc: f64) -> Result<()> {
        if task > after {
            return Err(input(format!("task {task} cannot be evaluated after task {after}")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(input(format!("accuracy {acc} outside [0, 1]")));
        }
        if self.rows.len() <= after {
            self.rows.resize_with(after + 1, Vec::new);
        }
        let row = &mut self.rows[after];
        if row.len() <= task {
            row.resize(task + 1, None);
        }
        row[task] = Some(acc);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.rows.get(after)?.get(task).copied().flatten()
    }

    fn require(&self, task: usize, after: usize) -> Result<f64> {
        self.get(task, after)
            .ok_or_else(|| Error::State(format!("no accuracy for task {task} after task {after}")))
    }

    /// Row `t`: accuracies of tasks `0..=t`.
    pub fn row(&self, after: usize) -> Result<Vec<f64>> {
        (0..=after).map(|i| self.require(i, after)).collect()
    }
}

/// Average classification accuracy after task `t`: `Σ_{i≤t} A_i^t / (t+1)`.
pub fn aca(ledger: &AccuracyLedger, t: usize) -> Result<f64> {
    let row = ledger.row(t)?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forgetting {
    /// `Σ_{i<t} (A_i^i − A_i^t)`
    pub sum: f64,
    /// `sum / t`, the mean over earlier tasks.
    pub mean: f64,
}

/// Forgetting after task `t` (0-based, so `t >= 1`).
pub fn forgetting(ledger: &AccuracyLedger, t: usize) -> Result<Forgetting> {
    if t < 1 {
        return Err(input("forgetting needs at least two tasks"));
    }
    let mut sum = 0.0;
    for i in 0..t {
        sum += ledger.require(i, i)? - ledger.require(i, t)?;
    }
    Ok(Forgetting {
        sum,
        mean: sum / t as f64,
    })
}

fn exact_weights(pi: &[f64]) -> Result<Vec<BigRational>> {
    if pi.is_empty() {
        return Err(input("no task weights"));
    }
    if let Some(bad) = pi.iter().find(|&&p| !(p > 0.0 && p.is_finite())) {
        return Err(input(format!("task weight {bad} is not positive")));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(input(format!("task weights sum to {total}, expected 1")));
    }
    pi.iter()
        .map(|&p| BigRational::from_float(p).ok_or_else(|| input(format!("weight {p} is not representable"))))
        .collect()
}

fn prefix_sums(pi: &[BigRational]) -> Vec<BigRational> {
    let mut acc = BigRational::zero();
    let mut out = vec![BigRational::zero()];
    for p in pi {
        acc += p;
        out.push(acc.clone());
    }
    out
}

fn max_to_f64(values: impl Iterator<Item = BigRational>) -> f64 {
    values
        .max()
        .and_then(|v| v.to_f64())
        .expect("non-empty set of finite ratios")
}

/// `max_k Σ_{t=1}^k π_{[t:T]} / π_{[1:k]}` with `π_{[a:b]} = Σ_{i=a}^b π_i`,
/// evaluated in exact rational arithmetic over the given `f64` weights.
pub fn bound_multiplier_seq(pi: &[f64]) -> Result<f64> {
    let w = exact_weights(pi)?;
    let pre = prefix_sums(&w);
    let n = w.len();
    let range = |a: usize, b: usize| &pre[b] - &pre[a - 1];
    Ok(max_to_f64((1..=n).map(|k| {
        let num = (1..=k).fold(BigRational::zero(), |acc, t| acc + range(t, n));
        num / range(1, k)
    })))
}

/// `max_k k · π_{[1:T]} / π_{[1:k]}`, exact like [`bound_multiplier_seq`].
pub fn bound_multiplier_replay(pi: &[f64]) -> Result<f64> {
    let w = exact_weights(pi)?;
    let pre = prefix_sums(&w);
    let n = w.len();
    Ok(max_to_f64((1..=n).map(|k| {
        BigRational::from_integer(BigInt::from(k)) * &pre[n] / &pre[k]
    })))
}
