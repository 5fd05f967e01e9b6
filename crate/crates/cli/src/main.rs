use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use row_cil::data::gen_gaussian_clusters;
use row_cil::metrics::{bound_multiplier_replay, bound_multiplier_seq};

/// Class-incremental learning experiments.
///
/// Log verbosity is controlled with `RUST_LOG` (e.g. `RUST_LOG=info`).
#[derive(Debug, Parser)]
#[command(name = "row", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every seed of a configuration; writes the results CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `output` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic Gaussian-cluster dataset as `label,f0,f1,...` CSV.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the sequential and replay bound multipliers for task weights.
    Bounds {
        /// Comma-separated positive weights summing to 1.
        #[arg(long)]
        pi: String,
    },
}

fn parse_weights(text: &str) -> Result<Vec<f64>> {
    let pi = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("`{s}` is not a number")))
        .collect::<Result<Vec<_>>>()?;
    if pi.is_empty() {
        bail!("no weights given");
    }
    Ok(pi)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = row_cil::parse_config(&text).with_context(|| format!("in {}", config.display()))?;
            if out.is_some() {
                cfg.output = out;
            }
            if cfg.output.is_none() {
                cfg.output = Some(PathBuf::from("results.csv"));
            }
            let report = row_cil::run(&cfg)?;
            print!("{}", report.summary_csv());
            if let Some(p) = &cfg.output {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Gen {
            out,
            classes,
            dim,
            n_per_class,
            spread,
            seed,
        } => {
            let data = gen_gaussian_clusters(classes, dim, n_per_class, spread, seed)?;
            data.write_csv(&out)?;
            println!(
                "wrote {} samples ({} classes, dim {}) to {}",
                data.train.len() + data.test.len(),
                classes,
                dim,
                out.display()
            );
        }
        Command::Bounds { pi } => {
            let pi = parse_weights(&pi)?;
            println!("sequential = {}", bound_multiplier_seq(&pi)?);
            println!("replay = {}", bound_multiplier_replay(&pi)?);
        }
    }
    Ok(())
}
