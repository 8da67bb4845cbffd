use clap::{Parser, Subcommand};
use condensa::error::Result;
use condensa::experiment::{self, AblationGrid, ExperimentConfig};
use condensa::memory::{format_mb, memory_bytes};
use std::path::PathBuf;
use std::process::ExitCode;

/// Condensed-frame video class-incremental learning experiments.
#[derive(Parser)]
#[command(name = "condensa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config; writes stages.csv,
    /// summary.csv, memory.csv and accuracy_vs_budget.svg.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
    },
    /// Run an ablation grid from a JSON spec; writes ablation.csv.
    Ablate {
        /// Grid spec (JSON) with a base config and axes.
        grid: PathBuf,
    },
    /// Plot CSV columns as an SVG line chart.
    Plot {
        /// Input CSV file.
        csv: PathBuf,
        /// Column used for the x axis.
        #[arg(long)]
        x: String,
        /// Comma-separated y columns.
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-class memory budget for a frames × videos choice.
    Budget {
        /// Frames stored per video.
        #[arg(long)]
        frames: u64,
        /// Videos stored per class.
        #[arg(long)]
        videos: u64,
        #[arg(long, default_value_t = 224)]
        height: u64,
        #[arg(long, default_value_t = 224)]
        width: u64,
        #[arg(long, default_value_t = 3)]
        channels: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let runs = experiment::run_experiment(&cfg)?;
            let cnn: Vec<f64> = runs.iter().map(|r| r.avg_cnn()).collect();
            let (mean, std) = experiment::mean_std(&cnn);
            println!(
                "{} seeds x {} stages -> avg acc (cnn) {:.4} ± {:.4}; reports in {}",
                runs.len(),
                cfg.split.stages.len(),
                mean,
                std,
                cfg.output_dir.display()
            );
        }
        Command::Ablate { grid } => {
            let grid = AblationGrid::load(&grid)?;
            let rows = experiment::run_ablation_to_dir(&grid)?;
            println!(
                "{} cells -> {}",
                rows.len(),
                grid.base.output_dir.join("ablation.csv").display()
            );
        }
        Command::Plot { csv, x, y, out } => {
            experiment::emit_plot(&csv, &x, &y, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Budget { frames, videos, height, width, channels } => {
            let total_frames = frames * videos;
            let (bytes, _) = memory_bytes(total_frames, height, width, channels);
            println!(
                "{}F x {}V @ {}x{}x{}: {} frames, {} bytes, {} Mb",
                frames,
                videos,
                height,
                width,
                channels,
                total_frames,
                bytes,
                format_mb(bytes)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
