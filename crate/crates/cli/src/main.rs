//! `idea`: command-line front end for the cache-adapter experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand, ValueEnum};
use idea_core::harness::{
    run_ablation, run_experiment_full, run_shot_curve, shot_curve_csv, ExperimentConfig,
};
use idea_core::hypersearch::{
    coordinate_sweep, grid_table_csv, search_prepared, sweep_table_csv, PreparedValidation,
};
use idea_core::synthetic::{SyntheticBenchmark, SyntheticSpec};
use idea_core::tidea::{save_checkpoint, CheckpointMeta};
use idea_core::{load_experiment, Components, GridSpec, Mode, Stage, StageExt};

#[derive(Parser)]
#[command(name = "idea", version, about = "Few-shot cache adapters over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Print the full JSON report instead of a summary line.
        #[arg(long)]
        json: bool,
    },
    /// Grid-search the fusion weights on the validation split.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// JSON file with `alphas`, `betas`, `thetas`; omitted means the default grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SearchMode::Full)]
        mode: SearchMode,
        /// Write the result table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the T-IDEA parameters and evaluate them.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the trained parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every subset of the listed components.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "proj,bias")]
        components: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Accuracy against shot count, one run per (shots, seed).
    Shots {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        list: Vec<usize>,
        /// Shot-sampling seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchMode {
    /// Every point of the Cartesian grid.
    Full,
    /// One axis at a time around the configured fusion weights.
    Coordinate,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path).at(Stage::Config)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| anyhow!("[report] writing {}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval { config, json } => {
            let config = load_config(&config)?;
            let report = run_experiment_full(&config)?.report;
            if let Some(path) = &config.output {
                report.write(path).at(Stage::Report)?;
            }
            if json {
                print!("{}", report.to_canonical_json().at(Stage::Report)?);
            } else {
                println!(
                    "{} top1={:.4} ({}/{}) alpha={} beta={} theta={}",
                    serde_json::to_value(report.mode)?.as_str().unwrap_or_default(),
                    report.accuracy.top1_accuracy,
                    report.accuracy.correct,
                    report.accuracy.total,
                    report.fusion.alpha,
                    report.fusion.beta,
                    report.fusion.theta
                );
            }
        }
        Command::Search { config, grid, mode, csv } => {
            let config = load_config(&config)?;
            let grid = match grid {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| anyhow!("[config] reading {}: {e}", path.display()))?;
                    serde_json::from_str::<GridSpec>(&text)
                        .map_err(|e| anyhow!("[config] parsing {}: {e}", path.display()))?
                }
                None => GridSpec::default(),
            };
            grid.validate().at(Stage::Config)?;
            let data = load_experiment(&config)?;
            let prepared =
                PreparedValidation::new(&data.cache, &data.head, &data.val.0, &data.val.1, None)
                    .at(Stage::Search)?;
            let table = match mode {
                SearchMode::Full => {
                    let outcome = search_prepared(&prepared, &grid).at(Stage::Search)?;
                    println!(
                        "best alpha={} beta={} theta={} val={:.4}",
                        outcome.best.alpha,
                        outcome.best.beta,
                        outcome.best.theta,
                        outcome.best_accuracy
                    );
                    grid_table_csv(&outcome.table)
                }
                SearchMode::Coordinate => {
                    let rows = coordinate_sweep(&prepared, &grid, &config.fusion).at(Stage::Search)?;
                    sweep_table_csv(&rows)
                }
            };
            match csv {
                Some(path) => write_text(&path, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Train { config, checkpoint } => {
            let mut config = load_config(&config)?;
            config.mode = Mode::Tidea;
            let train = config.train.get_or_insert_with(Default::default).clone();
            let output = run_experiment_full(&config)?;
            let report = &output.report;
            if let Some(path) = &config.output {
                report.write(path).at(Stage::Report)?;
            }
            let summary = report.training.as_ref().expect("tidea runs train");
            if let (Some(dir), Some(state)) = (checkpoint, &output.state) {
                let meta = CheckpointMeta {
                    fusion: report.fusion,
                    train,
                    epoch: summary.best_epoch,
                    val_accuracy: summary.best_val_accuracy,
                    enable_proj: config.components.proj,
                    enable_bias: config.components.bias,
                    dim: state.dim(),
                    cache_rows: state.cache_rows(),
                };
                save_checkpoint(&dir, state, &meta).at(Stage::Report)?;
            }
            for rec in &summary.history {
                println!(
                    "epoch {} loss={:.6} val={:.4}",
                    rec.epoch, rec.train_loss, rec.val_accuracy
                );
            }
            println!(
                "best_epoch={} test top1={:.4}",
                summary.best_epoch.map_or("-".into(), |e| e.to_string()),
                report.accuracy.top1_accuracy
            );
        }
        Command::Ablate { config, components, csv } => {
            let config = load_config(&config)?;
            let mut listed = Components::NONE;
            for name in &components {
                match name.trim() {
                    "proj" => listed.proj = true,
                    "bias" => listed.bias = true,
                    other => return Err(anyhow!("[config] unknown component {other:?}")),
                }
            }
            let rows = run_ablation(&config, listed)?;
            let mut table = String::from("proj,bias,top1_accuracy\n");
            for r in &rows {
                table.push_str(&format!("{},{},{}\n", r.proj, r.bias, r.top1_accuracy));
            }
            match csv {
                Some(path) => write_text(&path, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Shots { config, list, seeds, csv } => {
            let config = load_config(&config)?;
            let seeds = seeds.unwrap_or_else(|| vec![config.seed]);
            let points = run_shot_curve(&config, &list, &seeds)?;
            let table = shot_curve_csv(&points);
            match csv {
                Some(path) => write_text(&path, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Synth { out, seed, classes, dim, noise } => {
            let spec = SyntheticSpec {
                num_classes: classes,
                dim,
                image_noise: noise,
                seed,
                ..SyntheticSpec::default()
            };
            SyntheticBenchmark::generate(&spec)
                .and_then(|b| b.write_dataset(&out))
                .at(Stage::Report)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
