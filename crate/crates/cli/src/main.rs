//! `nhi`: tile, embed, train, predict, evaluate and render heatmaps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nhi_core::ensemble::Strategy;
use nhi_core::heatmap::HeatmapMode;
use nhi_core::par::Exec;
use nhi_core::preprocess::ProfileName;
use nhi_core::training::Split;
use nhi_core::TaskKind;

use crate::commands::{HeatmapArgs, PredictInput, TileArgs};
use crate::config::Config;

#[derive(Parser)]
#[command(
    name = "nhi",
    version,
    about = "Attention-MIL grading of ulcerative colitis slides on the Nancy index"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; any section may be omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and synthetic-data seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run per-slide and per-fold work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Tissue detection, tiling and tile QC.
    Tile {
        /// Slide manifest (TOML).
        #[arg(long)]
        slides: PathBuf,
        #[arg(long, default_value = "T1")]
        profile: ProfileName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode accepted tiles into an embedding store.
    Embed {
        /// Output directory of `nhi tile`.
        #[arg(long)]
        tiles: PathBuf,
        /// `synthetic:seed=<n>:d=<n>[:size=<px>]` or `file:<store.json>`.
        #[arg(long, default_value = "synthetic:seed=0:d=64")]
        provider: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic embedding store with planted signal tiles.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training of one task.
    Train {
        /// Embedding store manifest.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine the three task models into five-grade predictions.
    Predict {
        #[arg(long, required_unless_present = "fixtures")]
        store: Option<PathBuf>,
        /// Checkpoint file or `nhi train` output directory.
        #[arg(long, required_unless_present = "fixtures")]
        neutrophil: Option<PathBuf>,
        #[arg(long, required_unless_present = "fixtures")]
        nancy_low: Option<PathBuf>,
        #[arg(long, required_unless_present = "fixtures")]
        nancy_high: Option<PathBuf>,
        /// Saved case split (`splits.json` from `nhi train`) used with `--split`.
        #[arg(long, requires = "split")]
        splits: Option<PathBuf>,
        #[arg(long, requires = "splits", value_parser = parse_split)]
        split: Option<Split>,
        /// Table of raw task distributions to combine instead of running models.
        #[arg(long, conflicts_with_all = ["store", "neutrophil", "nancy_low", "nancy_high", "splits"])]
        fixtures: Option<PathBuf>,
        #[arg(long, default_value = "ensemble")]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics and confusion matrices against reference labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Table with `slide_id` and `label` columns.
        #[arg(long)]
        labels: PathBuf,
        /// Column of the label table holding the center tag.
        #[arg(long)]
        center_column: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention or instance-score overlay for one slide.
    Heatmap {
        #[arg(long)]
        store: PathBuf,
        /// Checkpoint file or `nhi train` output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long, default_value = "attention")]
        mode: HeatmapMode,
        /// Class to render in instance mode (default: the last class).
        #[arg(long)]
        class: Option<String>,
        /// Pixels of the tiling level per output pixel.
        #[arg(long, default_value_t = 16)]
        downsample: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "preliminary" => Ok(Split::Preliminary),
        "final" => Ok(Split::Final),
        _ => Err(format!("unknown split {s:?} (expected train, preliminary or final)")),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let config = Config::load(g.config.as_deref())?.with_seed(g.seed);
    let exec = if g.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Tile { slides, profile, out } => commands::tile(
            &TileArgs {
                slides: &slides,
                profile,
                out: &out,
            },
            &config,
            exec,
        ),
        Command::Embed { tiles, provider, out } => commands::embed(&tiles, &provider, &out, &config, exec),
        Command::Synth { out } => commands::synth(&out, &config),
        Command::Train { store, task, out } => commands::train(&store, task, &out, &config, exec),
        Command::Predict {
            store,
            neutrophil,
            nancy_low,
            nancy_high,
            splits,
            split,
            fixtures,
            strategy,
            out,
        } => {
            let input = match &fixtures {
                Some(f) => PredictInput::Fixtures(f),
                None => PredictInput::Models {
                    store: store.as_deref().expect("required by clap"),
                    checkpoints: [&neutrophil, &nancy_low, &nancy_high]
                        .map(|p| p.as_deref().expect("required by clap")),
                    split: splits.as_deref().zip(split),
                },
            };
            commands::predict(input, strategy, &out, &config, exec)
        }
        Command::Evaluate {
            predictions,
            labels,
            center_column,
            out,
        } => commands::evaluate(&predictions, &labels, center_column.as_deref(), &out, &config),
        Command::Heatmap {
            store,
            checkpoint,
            slide,
            mode,
            class,
            downsample,
            out,
        } => commands::heatmap(&HeatmapArgs {
            store: &store,
            checkpoint: &checkpoint,
            slide: &slide,
            mode,
            class: class.as_deref(),
            downsample,
            out: &out,
        }),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<nhi_core::Error>())
        .any(nhi_core::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
