//! Hard attention to the task: per-task unit gates, their binarized
//! union over past tasks, gradient gating and the sparsity regularizer.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape, Error, Result};
use crate::nn::NetGrads;
use crate::rng::Rng;

/// Threshold on `sigmoid(s_max · e)` above which a unit counts as used.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Embedding-gradient magnitude cap applied during training.
pub const EMBEDDING_GRAD_CLAMP: f64 = 10.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trainable gate embeddings of the task being learned.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMask {
    pub embeddings: Vec<Vec<f64>>,
}

impl TaskMask {
    /// Standard-normal embeddings, one vector per layer.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Self {
        let embeddings = widths
            .iter()
            .map(|&w| (0..w).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        TaskMask { embeddings }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.embeddings.iter().map(Vec::len).collect()
    }

    /// Soft gates `sigmoid(s · e)`.
    pub fn gates(&self, scale: f64) -> Vec<Vec<f64>> {
        self.embeddings
            .iter()
            .map(|e| e.iter().map(|&v| sigmoid(scale * v)).collect())
            .collect()
    }

    pub fn binarize(&self, s_max: f64) -> BinaryMask {
        BinaryMask {
            units: self
                .embeddings
                .iter()
                .map(|e| {
                    e.iter()
                        .map(|&v| sigmoid(s_max * v) >= BINARIZE_THRESHOLD)
                        .collect()
                })
                .collect(),
        }
    }
}

/// Per-layer 0/1 unit mask. Used both for a finished task's mask and for
/// the running union over all finished tasks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub units: Vec<Vec<bool>>,
}

/// Union of the binarized masks of all previously learned tasks.
pub type AccumulatedMask = BinaryMask;

impl BinaryMask {
    pub fn empty(widths: &[usize]) -> Self {
        BinaryMask {
            units: widths.iter().map(|&w| vec![false; w]).collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.units.iter().map(Vec::len).collect()
    }

    /// The mask as multiplicative 0/1 gates.
    pub fn gates(&self) -> Vec<Vec<f64>> {
        self.units
            .iter()
            .map(|l| l.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    pub fn count_used(&self) -> usize {
        self.units.iter().flatten().filter(|&&u| u).count()
    }

    pub fn count_total(&self) -> usize {
        self.units.iter().map(Vec::len).sum()
    }

    /// Element-wise OR.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.widths() != other.widths() {
            return Err(shape("masks cover different layer widths"));
        }
        Ok(BinaryMask {
            units: self
                .units
                .iter()
                .zip(&other.units)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x || y).collect())
                .collect(),
        })
    }

    /// True when every unit set in `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.widths() == other.widths()
            && self
                .units
                .iter()
                .flatten()
                .zip(other.units.iter().flatten())
                .all(|(&a, &b)| !a || b)
    }
}

/// Zero the gradients of weights whose two endpoint units are both owned
/// by earlier tasks. Raw inputs carry no mask, so first-layer weights are
/// frozen by their output unit alone. Biases follow their unit.
pub fn gate_gradients(grads: &mut NetGrads, accumulated: &AccumulatedMask) -> Result<()> {
    if grads.layers.len() != accumulated.units.len() {
        return Err(shape(format!(
            "{} gradient layers for a mask over {} layers",
            grads.layers.len(),
            accumulated.units.len()
        )));
    }
    for (l, g) in grads.layers.iter_mut().enumerate() {
        let out_units = &accumulated.units[l];
        if g.weights.rows() != out_units.len() || g.bias.len() != out_units.len() {
            return Err(shape(format!("layer {l} gradient does not match mask width")));
        }
        let in_units = if l == 0 {
            None
        } else {
            let prev = &accumulated.units[l - 1];
            if prev.len() != g.weights.cols() {
                return Err(shape(format!("layer {l} gradient does not match input mask width")));
            }
            Some(prev)
        };
        for (i, &used) in out_units.iter().enumerate() {
            if !used {
                continue;
            }
            g.bias[i] = 0.0;
            let row = g.weights.row_mut(i);
            match in_units {
                None => row.fill(0.0),
                Some(prev) => {
                    for (w, &p) in row.iter_mut().zip(prev) {
                        if p {
                            *w = 0.0;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Sparsity regularizer `Σ a(1 − a^{<k}) / Σ (1 − a^{<k})` over all units,
/// with soft gates `a = sigmoid(scale · e)`. Returns the loss and its
/// gradient with respect to the embeddings.
pub fn mask_regularizer(
    current: &TaskMask,
    accumulated: &AccumulatedMask,
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if current.widths() != accumulated.widths() {
        return Err(shape("task mask and accumulated mask widths differ"));
    }
    let free = accumulated.count_total() - accumulated.count_used();
    if free == 0 {
        return Err(Error::CapacityExhausted);
    }
    let denom = free as f64;
    let mut num = 0.0;
    let mut grad = Vec::with_capacity(current.embeddings.len());
    for (emb, used) in current.embeddings.iter().zip(&accumulated.units) {
        let mut g = vec![0.0; emb.len()];
        for ((gi, &e), &u) in g.iter_mut().zip(emb).zip(used) {
            if u {
                continue;
            }
            let a = sigmoid(scale * e);
            num += a;
            *gi = scale * a * (1.0 - a) / denom;
        }
        grad.push(g);
    }
    Ok((num / denom, grad))
}

/// Clamp each embedding-gradient entry to `[-limit, limit]`.
pub fn clamp_embedding_grads(grads: &mut [Vec<f64>], limit: f64) {
    grads
        .iter_mut()
        .flatten()
        .for_each(|g| *g = g.clamp(-limit, limit));
}

/// Linear gate-scale annealing within an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub s_max: f64,
    pub batch_index: usize,
    pub batches_per_epoch: usize,
}

/// `1/s_max + (s_max − 1/s_max) · b / (B − 1)`, clamped to `[1/s_max, s_max]`.
/// A single-batch epoch trains at `s_max`.
pub fn anneal_scale(sched: AnnealSchedule) -> f64 {
    let lo = 1.0 / sched.s_max;
    if sched.batches_per_epoch <= 1 {
        return sched.s_max;
    }
    let frac = sched.batch_index as f64 / (sched.batches_per_epoch - 1) as f64;
    (lo + (sched.s_max - lo) * frac).clamp(lo, sched.s_max)
}

/// Fold the binarized current mask into the running union.
pub fn finalize_task_mask(current: &TaskMask, accumulated: &AccumulatedMask, s_max: f64) -> Result<AccumulatedMask> {
    accumulated.union(&current.binarize(s_max))
}
