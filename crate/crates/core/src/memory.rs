//! Class-balanced replay memory under a fixed global budget.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};

use crate::data::Sample;
use crate::error::{input, Error, Result};
use crate::rng::{derive, stream};

/// A raw input kept for replay, tagged with the task that introduced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    budget: usize,
    seed: u64,
    store: BTreeMap<usize, Vec<StoredSample>>,
}

impl ReplayBuffer {
    pub fn new(budget: usize, seed: u64) -> Self {
        ReplayBuffer {
            budget,
            seed,
            store: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.store.len()
    }

    /// Stored count per class label, ascending by label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.store.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// All samples, ordered by class label then insertion.
    pub fn samples(&self) -> impl Iterator<Item = &StoredSample> {
        self.store.values().flatten()
    }

    pub fn tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.samples().map(|s| s.task).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Per-class quota when `classes` labels share the budget: the floor
    /// share, plus one for the `budget % n` smallest labels.
    pub fn quotas(budget: usize, classes: &[usize]) -> Result<BTreeMap<usize, usize>> {
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let n = sorted.len();
        if n == 0 {
            return Ok(BTreeMap::new());
        }
        if budget < n {
            return Err(Error::QuotaZero { budget, classes: n });
        }
        let base = budget / n;
        let extra = budget % n;
        Ok(sorted
            .into_iter()
            .enumerate()
            .map(|(rank, c)| (c, base + usize::from(rank < extra)))
            .collect())
    }

    /// Shrink stored classes to the new quotas and admit `task_data`'s
    /// classes, each by a seeded without-replacement draw.
    pub fn rebalance_and_insert(&mut self, task_data: &[Sample], task_id: usize) -> Result<()> {
        let mut incoming: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for s in task_data {
            if self.store.contains_key(&s.label) {
                return Err(input(format!(
                    "class {} of task {task_id} is already stored by an earlier task",
                    s.label
                )));
            }
            incoming.entry(s.label).or_default().push(s);
        }
        let all: Vec<usize> = self.store.keys().chain(incoming.keys()).copied().collect();
        let quotas = Self::quotas(self.budget, &all)?;

        for (class, kept) in self.store.iter_mut() {
            let q = quotas[class];
            if kept.len() > q {
                let mut rng = stream(self.seed, derive(task_id as u64, *class as u64));
                kept.shuffle(&mut rng);
                kept.truncate(q);
            }
        }
        for (class, pool) in incoming {
            let q = quotas[&class].min(pool.len());
            let mut rng = stream(self.seed, derive(task_id as u64, class as u64));
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), q).into_vec();
            picked.sort_unstable();
            let kept = picked
                .into_iter()
                .map(|i| StoredSample {
                    features: pool[i].features.clone(),
                    label: class,
                    task: task_id,
                })
                .collect();
            self.store.insert(class, kept);
        }
        Ok(())
    }

    /// Exactly `n` samples. Every stored sample appears `n / len` times,
    /// and a without-replacement subset fills the remainder; the result is
    /// shuffled. With `n <= len` this is a random subset, and with
    /// `n == len` a permutation.
    pub fn upsample_to(&self, n: usize, seed: u64) -> Result<Vec<StoredSample>> {
        let all: Vec<&StoredSample> = self.samples().collect();
        if all.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let mut rng = stream(self.seed, derive(seed, 0x7570));
        let mut out = Vec::with_capacity(n);
        for _ in 0..n / all.len() {
            out.extend(all.iter().map(|&s| s.clone()));
        }
        let rest = n % all.len();
        out.extend(
            index::sample(&mut rng, all.len(), rest)
                .into_iter()
                .map(|i| all[i].clone()),
        );
        out.shuffle(&mut rng);
        Ok(out)
    }

    /// Partition into (samples of `task`, everything else).
    pub fn pseudo_split(&self, task: usize) -> Result<(Vec<StoredSample>, Vec<StoredSample>)> {
        let (ind, ood): (Vec<_>, Vec<_>) = self.samples().cloned().partition(|s| s.task == task);
        if ind.is_empty() {
            return Err(input(format!("replay memory holds no samples of task {task}")));
        }
        Ok((ind, ood))
    }

    /// A copy holding only the samples matching `keep`.
    pub fn filtered<F: Fn(usize, &StoredSample) -> bool>(&self, keep: F) -> ReplayBuffer {
        let store = self
            .store
            .iter()
            .map(|(&c, v)| {
                let kept: Vec<StoredSample> = v
                    .iter()
                    .enumerate()
                    .filter(|(i, s)| keep(*i, s))
                    .map(|(_, s)| s.clone())
                    .collect();
                (c, kept)
            })
            .filter(|(_, v)| !v.is_empty())
            .collect();
        ReplayBuffer {
            budget: self.budget,
            seed: self.seed,
            store,
        }
    }
}
