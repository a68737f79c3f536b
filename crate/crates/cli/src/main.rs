//! `remission`: run experiments, ablation grids and reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use remission_core::checkpoint::load_checkpoint;
use remission_core::evaluate::{render_table, TableRow};
use remission_core::experiment::{self, Backbone, ExperimentConfig, ExperimentError, GridCell};
use remission_core::resample::Strategy;
use remission_core::synth::SynthSummary;

#[derive(Parser)]
#[command(name = "remission", version, about = "Histologic remission classifier experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base preset: desk or smoke.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// TOML config layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to `$REMISSION_OUT`, then the config's).
    #[arg(long, global = true, env = "REMISSION_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        /// Print class and cohort counts.
        #[arg(long)]
        summary: bool,
    },
    /// Split the dataset and write `split.txt`.
    Split,
    /// Run the full pipeline: data, split, resample, train, evaluate.
    Train,
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test split only rather than validation + test.
        #[arg(long)]
        test_only: bool,
    },
    /// Run the ablation grid (the 13-row reproduction grid unless axes are given).
    Grid {
        /// Comma-separated backbones, e.g. `ResNet-101,Our`.
        #[arg(long, value_delimiter = ',')]
        backbones: Option<Vec<String>>,
        /// Comma-separated nominal image sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Comma-separated strategies: none, ruao, smote.
        #[arg(long, value_delimiter = ',')]
        resampling: Option<Vec<String>>,
        /// Run at the nominal sizes instead of the preset's size map.
        #[arg(long)]
        native_sizes: bool,
    },
    /// Merge completed run directories into one table and ROC export.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let base = ExperimentConfig::preset(&c.preset)?;
    let cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path, Some(base))?,
        None => base,
    };
    let mut cfg = cfg.with_overrides(&c.overrides)?;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn parse_strategy(s: &str) -> Result<Strategy, ExperimentError> {
    match s.to_ascii_lowercase().as_str() {
        "none" | "no" => Ok(Strategy::None),
        "ruao" => Ok(Strategy::Ruao),
        "smote" => Ok(Strategy::Smote),
        _ => Err(ExperimentError::Config(format!("unknown resampling strategy {s:?}"))),
    }
}

fn grid_cells(backbones: Option<Vec<String>>, sizes: Option<Vec<usize>>, resampling: Option<Vec<String>>) -> Result<Vec<GridCell>, ExperimentError> {
    if backbones.is_none() && sizes.is_none() && resampling.is_none() {
        return Ok(experiment::reproduction_grid());
    }
    let backbones = match backbones {
        Some(v) => v
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| Backbone::parse(s).ok_or_else(|| ExperimentError::Config(format!("unknown backbone {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![Backbone::Ours],
    };
    let strategies = match resampling {
        Some(v) => v.iter().filter(|s| !s.is_empty()).map(|s| parse_strategy(s)).collect::<Result<Vec<_>, _>>()?,
        None => vec![Strategy::Ruao],
    };
    experiment::axes_grid(&backbones, &sizes.unwrap_or_else(|| vec![224]), &strategies)
}

fn write(path: PathBuf, text: String) -> Result<(), ExperimentError> {
    std::fs::write(&path, text).map_err(|e| ExperimentError::Stage { stage: experiment::Stage::Output, message: format!("{}: {e}", path.display()) })
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { summary } => {
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| ExperimentError::Config(format!("{}: {e}", cfg.output_dir.display())))?;
            let data = experiment::load_data(&cfg)?;
            println!("{}", cfg.output_dir.join("data").join("manifest.jsonl").display());
            if summary {
                println!("{}", SynthSummary::of(&data.dataset));
            }
        }
        Command::Split => {
            cfg.validate()?;
            let data = experiment::load_data(&cfg)?;
            let split = experiment::split_data(&cfg, &data)?;
            write(cfg.output_dir.join("split.txt"), split.to_manifest())?;
            let [tr, va, te] = split.sizes();
            println!("train {tr} validation {va} test {te}");
        }
        Command::Train => {
            let out = experiment::run(&cfg)?;
            print!("{}", render_table(&[out.row()]));
        }
        Command::Eval { checkpoint, test_only } => {
            let ckpt = load_checkpoint(&checkpoint).map_err(|e| ExperimentError::Stage { stage: experiment::Stage::Evaluate, message: e.to_string() })?;
            let report = experiment::evaluate_checkpoint(&cfg, &ckpt, test_only || cfg.eval.test_only)?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| ExperimentError::Config(format!("{}: {e}", cfg.output_dir.display())))?;
            write(cfg.output_dir.join("eval_report.jsonl"), report.to_jsonl())?;
            let labels = cfg.labels();
            let row = TableRow {
                id: labels.id,
                backbone: labels.backbone,
                image_size: labels.image_size,
                resampling: cfg.resample.strategy.label().to_string(),
                accuracy: report.accuracy,
                sensitivity: report.sensitivity,
                specificity: report.specificity,
                auc: report.auc,
                config_digest: report.config_digest.clone(),
            };
            print!("{}", render_table(&[row]));
        }
        Command::Grid { backbones, sizes, resampling, native_sizes } => {
            let cells = grid_cells(backbones, sizes, resampling)?;
            let map = if native_sizes {
                Default::default()
            } else if cli.common.preset == "desk" {
                experiment::desk_size_map()
            } else {
                experiment::smoke_size_map()
            };
            let report = experiment::grid(&cfg, &cells, &map)?;
            print!("{}", report.render());
            if !report.failures.is_empty() {
                return Err(ExperimentError::Stage { stage: experiment::Stage::Train, message: format!("{} grid row(s) failed", report.failures.len()) });
            }
        }
        Command::Report { runs } => {
            let merged = experiment::report(&runs)?;
            for w in &merged.warnings {
                log::warn!("{w}");
            }
            if let Some(out) = &cli.common.out {
                std::fs::create_dir_all(out).map_err(|e| ExperimentError::Config(format!("{}: {e}", out.display())))?;
                write(out.join("table.md"), render_table(&merged.rows))?;
                write(out.join("roc.csv"), experiment::roc_csv(&merged.roc))?;
            }
            print!("{}", merged.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
