//! Experiment runner: `key = value` configuration, multi-seed training
//! and evaluation, CSV reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{gen_gaussian_clusters, load_csv, split_tasks, to_matrix, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{aca, forgetting, AccuracyLedger};
use crate::par::{self, Exec};
use crate::row::{Hyper, Learner, TaskModel};
use crate::scoring::{predict_batch, PredictMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Row,
    RowNoWp,
    RowNoWpNoMd,
    HatOnly,
}

impl Mode {
    pub fn predict_mode(self) -> PredictMode {
        match self {
            Mode::Row => PredictMode::Full,
            Mode::RowNoWp => PredictMode::NoWp,
            Mode::RowNoWpNoMd | Mode::HatOnly => PredictMode::NoWpNoMd,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Row => "row",
            Mode::RowNoWp => "row_no_wp",
            Mode::RowNoWpNoMd => "row_no_wp_no_md",
            Mode::HatOnly => "hat_only",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "row" => Ok(Mode::Row),
            "row_no_wp" => Ok(Mode::RowNoWp),
            "row_no_wp_no_md" => Ok(Mode::RowNoWpNoMd),
            "hat_only" => Ok(Mode::HatOnly),
            other => Err(format!(
                "unknown mode `{other}` (expected row, row_no_wp, row_no_wp_no_md or hat_only)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        spread: f64,
        seed: u64,
    },
    Csv(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                classes,
                dim,
                n_per_class,
                spread,
                seed,
            } => gen_gaussian_clusters(*classes, *dim, *n_per_class, *spread, *seed),
            DataSource::Csv(p) => load_csv(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub tasks: usize,
    pub budget: usize,
    pub hidden: Vec<usize>,
    pub hyper: Hyper,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic {
                classes: 8,
                dim: 16,
                n_per_class: 200,
                spread: 0.1,
                seed: 0,
            },
            tasks: 4,
            budget: 200,
            hidden: vec![64, 64],
            hyper: Hyper::default(),
            seeds: vec![1, 2, 3, 4, 5],
            mode: Mode::Row,
            output: None,
        }
    }
}

/// Keys accepted by [`parse_config`].
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "csv_path",
    "classes",
    "dim",
    "n_per_class",
    "spread",
    "data_seed",
    "tasks",
    "budget",
    "hidden",
    "lr",
    "momentum",
    "batch_size",
    "epochs",
    "wp_lr",
    "wp_epochs",
    "tp_lr",
    "tp_epochs",
    "head_batch_size",
    "s_max",
    "cov_eps",
    "md_delta",
    "seeds",
    "mode",
    "output",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        msg: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// Parse `key = value` lines; `#` starts a comment. Unset keys keep their
/// defaults. The result is validated, except for checks that need the
/// dataset itself (see [`ExperimentConfig::validate_against`]).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut dataset = String::from("synthetic");
    let mut csv_path: Option<PathBuf> = None;
    let (mut classes, mut dim, mut n_per_class, mut spread, mut data_seed) = (8usize, 16usize, 200usize, 0.1f64, 0u64);
    let mut seen = std::collections::BTreeSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, found `{line}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config {
                key: key.to_string(),
                msg: "unknown key".into(),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config {
                key: key.to_string(),
                msg: format!("set twice (line {})", i + 1),
            });
        }
        let h = &mut cfg.hyper;
        match key {
            "dataset" => dataset = value.to_string(),
            "csv_path" => csv_path = Some(PathBuf::from(value)),
            "classes" => classes = parse_value(key, value)?,
            "dim" => dim = parse_value(key, value)?,
            "n_per_class" => n_per_class = parse_value(key, value)?,
            "spread" => spread = parse_value(key, value)?,
            "data_seed" => data_seed = parse_value(key, value)?,
            "tasks" => cfg.tasks = parse_value(key, value)?,
            "budget" => cfg.budget = parse_value(key, value)?,
            "hidden" => cfg.hidden = parse_list(key, value)?,
            "lr" => h.lr = parse_value(key, value)?,
            "momentum" => h.momentum = parse_value(key, value)?,
            "batch_size" => h.batch_size = parse_value(key, value)?,
            "epochs" => h.epochs = parse_value(key, value)?,
            "wp_lr" => h.wp_lr = parse_value(key, value)?,
            "wp_epochs" => h.wp_epochs = parse_value(key, value)?,
            "tp_lr" => h.tp_lr = parse_value(key, value)?,
            "tp_epochs" => h.tp_epochs = parse_value(key, value)?,
            "head_batch_size" => h.head_batch_size = parse_value(key, value)?,
            "s_max" => h.s_max = parse_value(key, value)?,
            "cov_eps" => h.cov_eps = parse_value(key, value)?,
            "md_delta" => h.md_delta = parse_value(key, value)?,
            "seeds" => cfg.seeds = parse_list(key, value)?,
            "mode" => {
                cfg.mode = value.parse().map_err(|msg| Error::Config {
                    key: key.to_string(),
                    msg,
                })?
            }
            "output" => cfg.output = Some(PathBuf::from(value)),
            _ => unreachable!("key list and match arms agree"),
        }
    }
    // learning rates of the fine-tuning steps follow `lr` unless set
    if !seen.contains("wp_lr") {
        cfg.hyper.wp_lr = cfg.hyper.lr;
    }
    if !seen.contains("tp_lr") {
        cfg.hyper.tp_lr = cfg.hyper.lr;
    }
    cfg.data = match dataset.as_str() {
        "synthetic" => DataSource::Synthetic {
            classes,
            dim,
            n_per_class,
            spread,
            seed: data_seed,
        },
        "csv" => DataSource::Csv(csv_path.ok_or_else(|| Error::Config {
            key: "csv_path".into(),
            msg: "required when dataset = csv".into(),
        })?),
        other => {
            return Err(Error::Config {
                key: "dataset".into(),
                msg: format!("unknown dataset `{other}` (expected synthetic or csv)"),
            })
        }
    };
    cfg.hyper.replay = cfg.mode != Mode::HatOnly;
    cfg.validate()?;
    Ok(cfg)
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        for (key, v) in [("lr", h.lr), ("wp_lr", h.wp_lr), ("tp_lr", h.tp_lr), ("s_max", h.s_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [("cov_eps", h.cov_eps), ("md_delta", h.md_delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&h.momentum) {
            return Err(bad("momentum", format!("must lie in [0, 1), got {}", h.momentum)));
        }
        for (key, v) in [
            ("epochs", h.epochs),
            ("wp_epochs", h.wp_epochs),
            ("tp_epochs", h.tp_epochs),
            ("batch_size", h.batch_size),
            ("head_batch_size", h.head_batch_size),
            ("tasks", self.tasks),
        ] {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "at least one seed is required"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(bad("hidden", "needs at least one non-zero layer width"));
        }
        if let DataSource::Synthetic {
            classes,
            dim,
            n_per_class,
            spread,
            ..
        } = self.data
        {
            if classes < 2 {
                return Err(bad("classes", "need at least 2"));
            }
            if dim == 0 {
                return Err(bad("dim", "must be at least 1"));
            }
            if n_per_class < 2 {
                return Err(bad("n_per_class", "need at least 2"));
            }
            if !(spread >= 0.0 && spread.is_finite()) {
                return Err(bad("spread", "must be finite and non-negative"));
            }
            self.validate_classes(classes)?;
        }
        Ok(())
    }

    /// Checks that depend on the number of classes in the data.
    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        if !classes.is_multiple_of(self.tasks) {
            return Err(bad(
                "tasks",
                format!("{classes} classes cannot be split into {} equal tasks", self.tasks),
            ));
        }
        if self.budget < classes {
            return Err(bad(
                "budget",
                format!("memory budget {} is below the {classes} classes", self.budget),
            ));
        }
        Ok(())
    }

    pub fn validate_against(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.test.is_empty() {
            return Err(bad("dataset", "the test split is empty"));
        }
        self.validate_classes(data.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub seed: u64,
    /// 1-based number of tasks learned so far.
    pub task: usize,
    pub aca: f64,
    pub forgetting_sum: Option<f64>,
    pub forgetting_mean: Option<f64>,
    /// Mean WP accuracy with the true task id, over tasks learned so far.
    pub til: f64,
    /// CIL accuracy on each learned task's test split.
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub task: usize,
    pub aca_mean: f64,
    pub aca_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub til_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: Mode,
    pub tasks: usize,
    pub rows: Vec<ReportRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl RunReport {
    pub fn final_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.task == self.tasks)
    }

    /// Mean final ACA across seeds.
    pub fn final_aca(&self) -> f64 {
        let v: Vec<f64> = self.final_rows().map(|r| r.aca).collect();
        mean_std(&v).0
    }

    pub fn final_til(&self) -> f64 {
        let v: Vec<f64> = self.final_rows().map(|r| r.til).collect();
        mean_std(&v).0
    }

    /// Mean and population standard deviation across seeds, per checkpoint.
    pub fn summary(&self) -> Vec<SummaryRow> {
        (1..=self.tasks)
            .map(|t| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.task == t).collect();
                let (aca_mean, aca_std) = mean_std(&rows.iter().map(|r| r.aca).collect::<Vec<_>>());
                let f: Vec<f64> = rows.iter().filter_map(|r| r.forgetting_mean).collect();
                let (forgetting_mean, forgetting_std) = if f.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_std(&f);
                    (Some(m), Some(s))
                };
                let (til_mean, _) = mean_std(&rows.iter().map(|r| r.til).collect::<Vec<_>>());
                SummaryRow {
                    task: t,
                    aca_mean,
                    aca_std,
                    forgetting_mean,
                    forgetting_std,
                    til_mean,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,task,aca,forgetting_sum,forgetting_mean,til_acc");
        for i in 1..=self.tasks {
            let _ = write!(s, ",acc_task_{i}");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{:.6},{},{},{:.6}",
                r.seed,
                r.task,
                r.aca,
                opt(r.forgetting_sum),
                opt(r.forgetting_mean),
                r.til
            );
            for i in 0..self.tasks {
                s.push(',');
                if let Some(a) = r.per_task.get(i) {
                    let _ = write!(s, "{a:.6}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("mode,task,aca_mean,aca_std,forgetting_mean,forgetting_std,til_mean\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{},{:.6}",
                self.mode.as_str(),
                r.task,
                r.aca_mean,
                r.aca_std,
                opt(r.forgetting_mean),
                opt(r.forgetting_std),
                r.til_mean
            );
        }
        s
    }
}

/// Path of the per-checkpoint summary written next to `output`.
pub fn summary_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    output.with_file_name(format!("{stem}.summary.csv"))
}

fn accuracy(model: &TaskModel, samples: &[Sample], dim: usize, mode: PredictMode, exec: Exec) -> Result<f64> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let preds = predict_batch(model, &to_matrix(&rows, dim), mode, exec)?;
    let hits = preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| model.global_label(p.task, p.class) == s.label)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

fn til_accuracy(model: &TaskModel, k: usize, samples: &[Sample], dim: usize) -> Result<f64> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let preds = model.predict_within_task(&to_matrix(&rows, dim), k)?;
    let hits = preds
        .iter()
        .zip(samples)
        .filter(|(&c, s)| model.global_label(k, c) == s.label)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Train one seed and evaluate after every task, once per prediction
/// mode in `modes`. Returns one row list per mode.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64, modes: &[PredictMode], exec: Exec) -> Result<Vec<Vec<ReportRow>>> {
    let seq = split_tasks(data, cfg.tasks, seed)?;
    let mut learner = Learner::new(data.feature_dim, &cfg.hidden, cfg.budget, cfg.hyper.clone(), seed)?;
    let mut ledgers = vec![AccuracyLedger::new(); modes.len()];
    let mut out = vec![Vec::new(); modes.len()];
    let dim = data.feature_dim;
    for (t, task) in seq.tasks.iter().enumerate() {
        learner.train_task(task)?;
        let mut til = 0.0;
        for (i, past) in seq.tasks[..=t].iter().enumerate() {
            til += til_accuracy(&learner.model, i, &past.test, dim)?;
        }
        til /= (t + 1) as f64;
        for (m, &mode) in modes.iter().enumerate() {
            for (i, past) in seq.tasks[..=t].iter().enumerate() {
                let a = accuracy(&learner.model, &past.test, dim, mode, exec)?;
                ledgers[m].record(i, t, a)?;
            }
            let f = if t >= 1 { Some(forgetting(&ledgers[m], t)?) } else { None };
            out[m].push(ReportRow {
                seed,
                task: t + 1,
                aca: aca(&ledgers[m], t)?,
                forgetting_sum: f.map(|f| f.sum),
                forgetting_mean: f.map(|f| f.mean),
                til,
                per_task: ledgers[m].row(t)?,
            });
        }
    }
    Ok(out)
}

/// Run every seed (in parallel under [`Exec::Parallel`]) and merge the rows
/// in seed order.
pub fn run_with(cfg: &ExperimentConfig, exec: Exec) -> Result<RunReport> {
    let data = cfg.data.load()?;
    cfg.validate_against(&data)?;
    let mut hyper_cfg = cfg.clone();
    hyper_cfg.hyper.replay = cfg.mode != Mode::HatOnly;
    let mode = cfg.mode.predict_mode();
    let per_seed = par::map_indices(exec, cfg.seeds.len(), |i| {
        run_seed(&hyper_cfg, &data, cfg.seeds[i], &[mode], exec)
    });
    let mut rows = Vec::with_capacity(cfg.seeds.len() * cfg.tasks);
    for r in per_seed {
        rows.extend(r?.remove(0));
    }
    Ok(RunReport {
        mode: cfg.mode,
        tasks: cfg.tasks,
        rows,
    })
}

/// [`run_with`] under the default execution policy; writes the CSV report
/// and its summary when `output` is set.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let report = run_with(cfg, Exec::default())?;
    if let Some(out) = &cfg.output {
        std::fs::write(out, report.to_csv())?;
        std::fs::write(summary_path(out), report.summary_csv())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.hyper.lr, 0.005);
        assert_eq!(cfg.hyper.momentum, 0.9);
        assert_eq!(cfg.hyper.batch_size, 64);
        assert_eq!(cfg.hyper.s_max, 400.0);
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = parse_config(
            "# ablation\nmode = row_no_wp\nseeds = 3, 4\nhidden = 32\nlr = 0.01  # faster\n\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::RowNoWp);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.hidden, vec![32]);
        assert_eq!(cfg.hyper.lr, 0.01);
        assert_eq!(cfg.hyper.wp_lr, 0.01);
        assert_eq!(cfg.hyper.tp_lr, 0.01);
        let hat = parse_config("mode = hat_only").unwrap();
        assert!(!hat.hyper.replay);
    }

    #[test]
    fn rejects_bad_configs() {
        let key_of = |text: &str| match parse_config(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{text}: {other:?}"),
        };
        assert_eq!(key_of("budget = -1"), "budget");
        assert_eq!(key_of("budget = 4"), "budget");
        assert_eq!(key_of("colour = red"), "colour");
        assert_eq!(key_of("lr = fast"), "lr");
        assert_eq!(key_of("lr = 0"), "lr");
        assert_eq!(key_of("momentum = 1.0"), "momentum");
        assert_eq!(key_of("seeds = "), "seeds");
        assert_eq!(key_of("tasks = 3"), "tasks");
        assert_eq!(key_of("mode = best"), "mode");
        assert_eq!(key_of("dataset = csv"), "csv_path");
        assert_eq!(key_of("epochs = 0"), "epochs");
        assert_eq!(key_of("lr = 0.1\nlr = 0.2"), "lr");
        assert!(matches!(parse_config("just words"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn summary_path_sits_next_to_output() {
        assert_eq!(summary_path(Path::new("out/r.csv")), PathBuf::from("out/r.summary.csv"));
    }
}
