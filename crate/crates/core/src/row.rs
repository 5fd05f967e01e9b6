//! The three-step per-task training pipeline.
//!
//! For task `k`:
//! 1. train the shared extractor (under task `k`'s soft gates, with
//!    gradients of earlier tasks' weights gated off) together with a fresh
//!    OOD head on `D_k` as IND data and upsampled replay as the OOD class;
//! 2. freeze the extractor and fit the WP head on `D_k`;
//! 3. admit `D_k` to the replay memory and re-tune every OOD head on the
//!    memory, each task's own exemplars as IND and the rest as OOD.
//!
//! Class statistics for the Mahalanobis coefficient are fitted last.

use rand::seq::SliceRandom;

use crate::data::{to_matrix, Task};
use crate::error::{input, shape, Error, Result};
use crate::hat::{self, AccumulatedMask, AnnealSchedule, BinaryMask, TaskMask};
use crate::memory::{ReplayBuffer, StoredSample};
use crate::nn::{softmax_xent, Linear, Matrix, Network, SgdState};
use crate::par::Exec;
use crate::rng::{derive, stream, Rng};
use crate::scoring::{fit_task_stats, TaskStats, COV_EPS, MD_DELTA};

/// Training hyper-parameters. Defaults follow the reference recipe:
/// momentum 0.9, batch 64 for the extractor and 32 for head fine-tuning,
/// learning rate 0.005 everywhere, 20/5/10 epochs, `s_max = 400`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub wp_lr: f64,
    pub wp_epochs: usize,
    pub tp_lr: f64,
    pub tp_epochs: usize,
    pub head_batch_size: usize,
    pub s_max: f64,
    pub embedding_clamp: f64,
    pub cov_eps: f64,
    pub md_delta: f64,
    /// Train step 1 against replayed OOD samples. Off for the HAT-only
    /// baseline, which also skips replay and step 3.
    pub replay: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 0.005,
            momentum: 0.9,
            batch_size: 64,
            epochs: 20,
            wp_lr: 0.005,
            wp_epochs: 5,
            tp_lr: 0.005,
            tp_epochs: 10,
            head_batch_size: 32,
            s_max: 400.0,
            embedding_clamp: hat::EMBEDDING_GRAD_CLAMP,
            cov_eps: COV_EPS,
            md_delta: MD_DELTA,
            replay: true,
        }
    }
}

/// OOD head (`|Y_k| + 1` outputs, the last being the OOD class) and WP
/// head (`|Y_k|` outputs) of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHeads {
    pub ood: Linear,
    pub wp: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    net: Network,
    task_masks: Vec<BinaryMask>,
    accumulated: AccumulatedMask,
    heads: Vec<TaskHeads>,
    stats: Vec<TaskStats>,
    classes: Vec<Vec<usize>>,
    md_delta: f64,
}

/// Mean training loss of every epoch of one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub epoch_losses: Vec<f64>,
}

impl StepReport {
    pub fn first(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskReport {
    pub step1: StepReport,
    pub step2: StepReport,
    /// One report per re-tuned OOD head, ascending task order.
    pub step3: Vec<StepReport>,
}

impl TaskModel {
    pub fn new(input_dim: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0x6e6574);
        let net = Network::new(input_dim, widths, &mut rng)?;
        Ok(TaskModel {
            accumulated: BinaryMask::empty(&net.widths()),
            net,
            task_masks: Vec::new(),
            heads: Vec::new(),
            stats: Vec::new(),
            classes: Vec::new(),
            md_delta: MD_DELTA,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[TaskHeads] {
        &self.heads
    }

    /// Mutable access to the per-task heads, e.g. for loading weights.
    pub fn heads_mut(&mut self) -> &mut [TaskHeads] {
        &mut self.heads
    }

    pub fn stats(&self) -> &[TaskStats] {
        &self.stats
    }

    pub fn task_masks(&self) -> &[BinaryMask] {
        &self.task_masks
    }

    pub fn accumulated(&self) -> &AccumulatedMask {
        &self.accumulated
    }

    /// Global labels of task `k`, in head order.
    pub fn classes(&self, k: usize) -> &[usize] {
        &self.classes[k]
    }

    pub fn md_delta(&self) -> f64 {
        self.md_delta
    }

    /// Global label of `(task, local class)`.
    pub fn global_label(&self, task: usize, class: usize) -> usize {
        self.classes[task][class]
    }

    /// Extractor output under task `k`'s binarized mask.
    pub fn task_features(&self, batch: &Matrix, k: usize) -> Result<Matrix> {
        self.task_features_with(batch, k, Exec::default())
    }

    pub fn task_features_with(&self, batch: &Matrix, k: usize, exec: Exec) -> Result<Matrix> {
        let mask = self
            .task_masks
            .get(k)
            .ok_or_else(|| Error::State(format!("task {k} has no mask yet")))?;
        self.net.features_with(batch, Some(&mask.gates()), exec)
    }

    /// WP-head logits of task `k`.
    pub fn wp_logits(&self, batch: &Matrix, k: usize) -> Result<Matrix> {
        let f = self.task_features(batch, k)?;
        self.heads[k].wp.forward(&f)
    }

    /// OOD-head logits of task `k`.
    pub fn ood_logits(&self, batch: &Matrix, k: usize) -> Result<Matrix> {
        let f = self.task_features(batch, k)?;
        self.heads[k].ood.forward(&f)
    }

    /// Task-incremental prediction (task id given): local class argmax of
    /// the WP head.
    pub fn predict_within_task(&self, batch: &Matrix, k: usize) -> Result<Vec<usize>> {
        let logits = self.wp_logits(batch, k)?;
        Ok(logits
            .iter_rows()
            .map(|r| crate::scoring::argmax_table(&[r.to_vec()]).1)
            .collect())
    }

    fn local_labels(task: &Task) -> Result<Vec<usize>> {
        task.train
            .iter()
            .map(|s| {
                task.local_label(s.label)
                    .ok_or_else(|| input(format!("label {} is not a class of this task", s.label)))
            })
            .collect()
    }

    fn task_inputs(task: &Task, dim: usize) -> Matrix {
        let rows: Vec<&[f64]> = task.train.iter().map(|s| s.features.as_slice()).collect();
        to_matrix(&rows, dim)
    }

    /// Step 1: extractor and a new OOD head for the next task, followed by
    /// mask finalization. Replay samples act as the OOD class unless the
    /// memory is empty or `hyper.replay` is off.
    pub fn train_step1(&mut self, task: &Task, buf: &ReplayBuffer, hyper: &Hyper, seed: u64) -> Result<StepReport> {
        if task.train.is_empty() {
            return Err(input("task has no training data"));
        }
        if task.classes.is_empty() {
            return Err(input("task has no classes"));
        }
        let dim = self.net.input_dim();
        if task.train.iter().any(|s| s.features.len() != dim) {
            return Err(shape(format!("task samples must have {dim} features")));
        }
        let k = self.num_tasks();
        let n_cls = task.num_classes();
        let labels = Self::local_labels(task)?;
        let x = Self::task_inputs(task, dim);
        let n = x.rows();

        let mut rng: Rng = stream(seed, derive(k as u64, 1));
        let widths = self.net.widths();
        let mut mask = TaskMask::init(&widths, &mut rng);
        let mut ood = Linear::init(self.net.feature_dim(), n_cls + 1, &mut rng);
        let use_replay = hyper.replay && !buf.is_empty();

        let mut sgd = SgdState::new(hyper.lr, hyper.momentum)?;
        let n_layers = widths.len();
        let head_slot = 2 * n_layers;
        let emb_slot = head_slot + 2;
        let batch = hyper.batch_size.max(1);
        let batches = n.div_ceil(batch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut report = StepReport::default();

        for epoch in 0..hyper.epochs {
            order.shuffle(&mut rng);
            let replay: Vec<StoredSample> = if use_replay {
                buf.upsample_to(n, derive(derive(seed, k as u64), epoch as u64))?
            } else {
                Vec::new()
            };
            let mut epoch_loss = 0.0;
            for b in 0..batches {
                let idx = &order[b * batch..((b + 1) * batch).min(n)];
                let scale = hat::anneal_scale(AnnealSchedule {
                    s_max: hyper.s_max,
                    batch_index: b,
                    batches_per_epoch: batches,
                });
                let mut rows: Vec<&[f64]> = idx.iter().map(|&i| x.row(i)).collect();
                let mut ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                if use_replay {
                    for s in &replay[b * batch..b * batch + idx.len()] {
                        rows.push(&s.features);
                        ys.push(n_cls);
                    }
                }
                let xb = to_matrix(&rows, dim);
                let gates = mask.gates(scale);
                let (feat, cache) = self.net.forward(&xb, Some(&gates))?;
                let logits = ood.forward_with(&feat, Exec::Sequential)?;
                let (ce, g_logits) = softmax_xent(&logits, &ys)?;
                let (g_head, g_feat) = ood.backward(&feat, &g_logits)?;
                let mut g_net = self.net.backward(&cache, &g_feat, Some(&gates))?;
                hat::gate_gradients(&mut g_net, &self.accumulated)?;
                let (reg, mut g_emb) = hat::mask_regularizer(&mask, &self.accumulated, scale)?;
                for ((ge, ga), a) in g_emb.iter_mut().zip(&g_net.gates).zip(&gates) {
                    for ((e, &d), &av) in ge.iter_mut().zip(ga).zip(a) {
                        *e += d * scale * av * (1.0 - av);
                    }
                }
                hat::clamp_embedding_grads(&mut g_emb, hyper.embedding_clamp);

                for (l, (layer, g)) in self.net.layers_mut().iter_mut().zip(&g_net.layers).enumerate() {
                    sgd.step_linear(2 * l, layer, g)?;
                }
                sgd.step_linear(head_slot, &mut ood, &g_head)?;
                for (l, (e, g)) in mask.embeddings.iter_mut().zip(&g_emb).enumerate() {
                    sgd.step(emb_slot + l, e, g)?;
                }
                epoch_loss += (ce + reg) * idx.len() as f64;
            }
            report.epoch_losses.push(epoch_loss / n as f64);
            if !self.net.is_finite() {
                return Err(Error::Numeric(format!("extractor diverged in epoch {epoch} of task {k}")));
            }
        }

        let task_mask = mask.binarize(hyper.s_max);
        self.accumulated = self.accumulated.union(&task_mask)?;
        log::debug!(
            "task {k}: mask uses {}/{} units, {} accumulated",
            task_mask.count_used(),
            task_mask.count_total(),
            self.accumulated.count_used()
        );
        self.task_masks.push(task_mask);
        let wp = Linear::init(self.net.feature_dim(), n_cls, &mut rng);
        self.heads.push(TaskHeads { ood, wp });
        self.classes.push(task.classes.clone());
        Ok(report)
    }

    /// Step 2: fit the WP head of the most recent task on frozen features.
    pub fn train_step2(&mut self, task: &Task, hyper: &Hyper, seed: u64) -> Result<StepReport> {
        let k = self
            .num_tasks()
            .checked_sub(1)
            .ok_or_else(|| Error::State("step 2 before step 1".into()))?;
        if self.classes[k] != task.classes {
            return Err(Error::State("step 2 task does not match the last trained task".into()));
        }
        if self.stats.len() > k {
            return Err(Error::State(format!("task {k} is already complete")));
        }
        let labels = Self::local_labels(task)?;
        let x = Self::task_inputs(task, self.net.input_dim());
        let feats = self.task_features(&x, k)?;
        let mut rng = stream(seed, derive(k as u64, 2));
        fit_head(
            &mut self.heads[k].wp,
            &feats,
            &labels,
            hyper.wp_lr,
            hyper.momentum,
            hyper.wp_epochs,
            hyper.head_batch_size,
            &mut rng,
        )
    }

    /// Step 3: re-tune every OOD head on the replay memory, one task at a
    /// time in ascending order. The extractor and WP heads stay fixed.
    pub fn train_step3(&mut self, buf: &ReplayBuffer, hyper: &Hyper, seed: u64) -> Result<Vec<StepReport>> {
        let stored = buf.tasks();
        if let Some(missing) = (0..self.num_tasks()).find(|t| !stored.contains(t)) {
            return Err(input(format!("replay memory holds no samples of task {missing}")));
        }
        let dim = self.net.input_dim();
        let mut reports = Vec::with_capacity(self.num_tasks());
        for k in 0..self.num_tasks() {
            let (ind, ood) = buf.pseudo_split(k)?;
            let n_cls = self.classes[k].len();
            let mut rows: Vec<&[f64]> = Vec::with_capacity(ind.len() + ood.len());
            let mut labels = Vec::with_capacity(ind.len() + ood.len());
            for s in &ind {
                let y = self.classes[k]
                    .iter()
                    .position(|&c| c == s.label)
                    .ok_or_else(|| Error::State(format!("stored label {} is not in task {k}", s.label)))?;
                rows.push(&s.features);
                labels.push(y);
            }
            for s in &ood {
                rows.push(&s.features);
                labels.push(n_cls);
            }
            let x = to_matrix(&rows, dim);
            let feats = self.task_features(&x, k)?;
            let mut rng = stream(seed, derive(derive(self.num_tasks() as u64, 3), k as u64));
            reports.push(fit_head(
                &mut self.heads[k].ood,
                &feats,
                &labels,
                hyper.tp_lr,
                hyper.momentum,
                hyper.tp_epochs,
                hyper.head_batch_size,
                &mut rng,
            )?);
        }
        Ok(reports)
    }

    /// Fit the Mahalanobis statistics of the most recent task.
    pub fn fit_stats(&mut self, task: &Task, hyper: &Hyper) -> Result<()> {
        let k = self
            .num_tasks()
            .checked_sub(1)
            .ok_or_else(|| Error::State("no task to fit statistics for".into()))?;
        if self.stats.len() != k {
            return Err(Error::State(format!("statistics for task {k} already fitted")));
        }
        let labels = Self::local_labels(task)?;
        let x = Self::task_inputs(task, self.net.input_dim());
        let feats = self.task_features(&x, k)?;
        self.stats.push(fit_task_stats(&feats, &labels, task.num_classes(), hyper.cov_eps)?);
        self.md_delta = hyper.md_delta;
        Ok(())
    }
}

/// Minibatch SGD on a single linear head over fixed features.
#[allow(clippy::too_many_arguments)]
fn fit_head(
    head: &mut Linear,
    feats: &Matrix,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    epochs: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<StepReport> {
    let n = feats.rows();
    if n == 0 {
        return Err(input("no samples to fit the head on"));
    }
    let batch = batch.max(1);
    let mut sgd = SgdState::new(lr, momentum)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = StepReport::default();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let xb = feats.gather_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = head.forward_with(&xb, Exec::Sequential)?;
            let (loss, g) = softmax_xent(&logits, &yb)?;
            let (grad, _) = head.backward(&xb, &g)?;
            sgd.step_linear(0, head, &grad)?;
            total += loss * idx.len() as f64;
        }
        report.epoch_losses.push(total / n as f64);
    }
    Ok(report)
}

/// A model together with its replay memory and training recipe.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: TaskModel,
    pub buffer: ReplayBuffer,
    pub hyper: Hyper,
    seed: u64,
}

impl Learner {
    pub fn new(input_dim: usize, widths: &[usize], budget: usize, hyper: Hyper, seed: u64) -> Result<Self> {
        Ok(Learner {
            model: TaskModel::new(input_dim, widths, seed)?,
            buffer: ReplayBuffer::new(budget, derive(seed, 0x6d656d)),
            hyper,
            seed,
        })
    }

    /// Step 1, step 2, memory update, step 3, statistics.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskReport> {
        let k = self.model.num_tasks();
        let step1 = self.model.train_step1(task, &self.buffer, &self.hyper, self.seed)?;
        let step2 = self.model.train_step2(task, &self.hyper, self.seed)?;
        let mut step3 = Vec::new();
        if self.hyper.replay {
            self.buffer.rebalance_and_insert(&task.train, k)?;
            step3 = self.model.train_step3(&self.buffer, &self.hyper, self.seed)?;
        }
        self.model.fit_stats(task, &self.hyper)?;
        log::info!(
            "task {k} done: step1 loss {:.4} -> {:.4}, step2 loss {:.4} -> {:.4}, memory {}",
            step1.first(),
            step1.last(),
            step2.first(),
            step2.last(),
            self.buffer.len()
        );
        Ok(TaskReport { step1, step2, step3 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_clusters, split_tasks_with_order};

    fn quick() -> Hyper {
        Hyper {
            lr: 0.05,
            epochs: 8,
            wp_lr: 0.05,
            tp_lr: 0.05,
            ..Hyper::default()
        }
    }

    fn tasks() -> crate::data::TaskSequence {
        let d = gen_gaussian_clusters(4, 6, 60, 0.1, 3).unwrap();
        split_tasks_with_order(&d, 2, &[0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn first_task_without_memory() {
        let seq = tasks();
        let mut m = TaskModel::new(6, &[16, 16], 1).unwrap();
        let buf = ReplayBuffer::new(40, 0);
        let r = m.train_step1(&seq.tasks[0], &buf, &quick(), 1).unwrap();
        assert_eq!(r.epoch_losses.len(), 8);
        assert!(r.last() < r.first());
        assert_eq!(m.num_tasks(), 1);
        assert_eq!(m.heads()[0].ood.output_dim(), 3);
        assert_eq!(m.heads()[0].wp.output_dim(), 2);
        assert!(m.task_masks()[0].is_subset_of(m.accumulated()));
    }

    #[test]
    fn step2_touches_only_wp_head() {
        let seq = tasks();
        let mut m = TaskModel::new(6, &[16], 2).unwrap();
        let h = quick();
        m.train_step1(&seq.tasks[0], &ReplayBuffer::new(40, 0), &h, 2).unwrap();
        let before = m.clone();
        m.train_step2(&seq.tasks[0], &h, 2).unwrap();
        assert_eq!(m.network(), before.network());
        assert_eq!(m.heads()[0].ood, before.heads()[0].ood);
        assert_eq!(m.task_masks(), before.task_masks());
        assert_ne!(m.heads()[0].wp, before.heads()[0].wp);
    }

    #[test]
    fn step_order_enforced() {
        let seq = tasks();
        let mut m = TaskModel::new(6, &[8], 2).unwrap();
        assert!(matches!(m.train_step2(&seq.tasks[0], &quick(), 0), Err(Error::State(_))));
        assert!(matches!(m.fit_stats(&seq.tasks[0], &quick()), Err(Error::State(_))));
        let empty = Task {
            classes: vec![0, 1],
            train: vec![],
            test: vec![],
        };
        assert!(m.train_step1(&empty, &ReplayBuffer::new(4, 0), &quick(), 0).is_err());
    }

    #[test]
    fn single_task_step3_is_ind_only() {
        let seq = tasks();
        let mut l = Learner::new(6, &[16], 20, quick(), 5).unwrap();
        l.train_task(&seq.tasks[0]).unwrap();
        let (d, m) = l.buffer.pseudo_split(0).unwrap();
        assert_eq!(d.len(), 20);
        assert!(m.is_empty());
        let before = l.model.heads()[0].ood.clone();
        let rep = l.model.train_step3(&l.buffer, &l.hyper, 9).unwrap();
        assert_eq!(rep.len(), 1);
        assert_ne!(l.model.heads()[0].ood, before);
    }

    #[test]
    fn step3_requires_every_task_in_memory() {
        let seq = tasks();
        let mut l = Learner::new(6, &[16], 20, quick(), 5).unwrap();
        l.train_task(&seq.tasks[0]).unwrap();
        let empty = ReplayBuffer::new(20, 0);
        assert!(matches!(l.model.train_step3(&empty, &l.hyper, 0), Err(Error::Input(_))));
    }
}
