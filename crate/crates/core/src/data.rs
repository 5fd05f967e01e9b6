//! Dataset sources and the split into class-disjoint tasks.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{input, Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Global class label.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

/// Held-out count for a class with `n` samples: a fifth, at least one.
fn test_count(n: usize) -> usize {
    (n / 5).max(1)
}

impl Dataset {
    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(input("no training samples"));
        }
        for s in self.train.iter().chain(&self.test) {
            if s.features.len() != self.feature_dim {
                return Err(input(format!(
                    "sample of width {} in a dataset of width {}",
                    s.features.len(),
                    self.feature_dim
                )));
            }
            if s.label >= self.num_classes {
                return Err(input(format!("label {} >= {} classes", s.label, self.num_classes)));
            }
        }
        Ok(())
    }

    /// Write `label,f0,f1,...` rows: all training rows, then all test rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "label")?;
        for i in 0..self.feature_dim {
            write!(out, ",f{i}")?;
        }
        writeln!(out)?;
        for s in self.train.iter().chain(&self.test) {
            write!(out, "{}", s.label)?;
            for v in &s.features {
                // `{:?}` is the shortest representation that round-trips exactly.
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Isotropic Gaussian blobs around unit-norm class centres. With
/// `num_classes <= dim` the centres are the scaled simplex vertices
/// `e_0, ..., e_{C-1}`; otherwise they are seeded random directions.
/// Each class is split 80/20 into train and test.
pub fn gen_gaussian_clusters(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim == 0 {
        return Err(input("need at least two classes and one dimension"));
    }
    if n_per_class < 2 {
        return Err(input("need at least two samples per class"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(input(format!("spread must be finite and non-negative, got {spread}")));
    }
    let mut rng = stream(seed, 0x6461_7461);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            if num_classes <= dim {
                let mut v = vec![0.0; dim];
                v[c] = 1.0;
                v
            } else {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            }
        })
        .collect();
    let noise = Normal::new(0.0, spread).map_err(|e| input(e.to_string()))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_test = test_count(n_per_class);
    for (label, centre) in centres.iter().enumerate() {
        for i in 0..n_per_class {
            let features = centre.iter().map(|&m| m + noise.sample(&mut rng)).collect();
            let s = Sample { features, label };
            if i < n_per_class - n_test {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Ok(Dataset {
        train,
        test,
        num_classes,
        feature_dim: dim,
    })
}

/// Read a `label,f0,f1,...` file. Within each class, rows are assigned to
/// train in file order and the last fifth (at least one row) to test; a
/// class with a single row has no test sample.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be `label,f0,f1,...`".into(),
        });
    }
    let dim = header.len() - 1;
    let mut rows: Vec<Sample> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", dim + 1, record.len()),
            });
        }
        let label: usize = record[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label `{}` is not a non-negative integer", &record[0]),
        })?;
        let features = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(i, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("feature f{i} `{f}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(Sample { features, label });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let num_classes = rows.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut per_class = vec![0usize; num_classes];
    for s in &rows {
        per_class[s.label] += 1;
    }
    let mut seen = vec![0usize; num_classes];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in rows {
        let n = per_class[s.label];
        let idx = seen[s.label];
        seen[s.label] += 1;
        if n >= 2 && idx >= n - test_count(n) {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    let ds = Dataset {
        train,
        test,
        num_classes,
        feature_dim: dim,
    };
    ds.validate()?;
    Ok(ds)
}

/// One task: its classes (global labels, in head order) and data.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Task {
    /// Head index of a global label.
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == global)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub feature_dim: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Shuffle the class labels with `class_order_seed` and cut them into
/// `num_tasks` equal groups.
pub fn split_tasks(dataset: &Dataset, num_tasks: usize, class_order_seed: u64) -> Result<TaskSequence> {
    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    let mut rng: Rng = stream(class_order_seed, 0x6f72_6465);
    order.shuffle(&mut rng);
    split_tasks_with_order(dataset, num_tasks, &order)
}

pub fn split_tasks_with_order(dataset: &Dataset, num_tasks: usize, order: &[usize]) -> Result<TaskSequence> {
    if num_tasks == 0 || !dataset.num_classes.is_multiple_of(num_tasks) {
        return Err(input(format!(
            "{} classes cannot be split into {num_tasks} equal tasks",
            dataset.num_classes
        )));
    }
    let distinct: BTreeSet<usize> = order.iter().copied().collect();
    if order.len() != dataset.num_classes || distinct.len() != order.len() || distinct.iter().any(|&c| c >= dataset.num_classes) {
        return Err(input("class order must be a permutation of all labels"));
    }
    let per = dataset.num_classes / num_tasks;
    let tasks = order
        .chunks(per)
        .map(|classes| {
            let pick = |split: &[Sample]| -> Vec<Sample> {
                split.iter().filter(|s| classes.contains(&s.label)).cloned().collect()
            };
            Task {
                classes: classes.to_vec(),
                train: pick(&dataset.train),
                test: pick(&dataset.test),
            }
        })
        .collect();
    Ok(TaskSequence {
        tasks,
        feature_dim: dataset.feature_dim,
    })
}

/// Stack sample features into a batch matrix.
pub fn to_matrix(samples: &[&[f64]], dim: usize) -> Matrix {
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        data.extend_from_slice(s);
    }
    Matrix::new(samples.len(), dim, data).expect("uniform sample width")
}
