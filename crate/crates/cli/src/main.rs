use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use oxdgm::checkpoint;
use oxdgm::config::ExperimentConfig;
use oxdgm::dgm::Metrics;
use oxdgm::endurance::endurance_report;
use oxdgm::experiment::{self, Split};

#[derive(Parser)]
#[command(name = "oxdgm", version, about = "Hybrid CMOS-OxRAM deep generative model simulator")]
struct Cli {
    /// Override the seed of the experiment config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory of the experiment config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, epoch, metric and endurance files.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the test split of a config.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Reconstruct corrupted images with an SDA checkpoint and write a PGM mosaic.
    Denoise {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Salt-and-pepper density; defaults to the config's.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Mosaic path; defaults to `denoise.pgm` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the switching-activity report of a checkpoint as CSV.
    Endurance {
        checkpoint: PathBuf,
        /// Also write the CSV to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

struct Loaded {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<Loaded> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { cfg, dir })
}

fn out_dir(cli_dir: Option<PathBuf>, loaded: &Loaded) -> PathBuf {
    cli_dir
        .or_else(|| loaded.cfg.out_dir.as_ref().map(|d| loaded.dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("runs").join(&loaded.cfg.name))
}

fn print_metrics(m: &Metrics) {
    match m {
        Metrics::Dbn(a) => println!(
            "top1 {:.2}%  top3 {:.2}%  top5 {:.2}%",
            100.0 * a.top1,
            100.0 * a.top3,
            100.0 * a.top5
        ),
        Metrics::Sda { mse } => println!("mse {mse:.6}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let loaded = load_config(&config, cli.seed)?;
            let out = out_dir(cli.out_dir, &loaded);
            let gains: Vec<String> = loaded
                .cfg
                .network_spec()?
                .blocks
                .iter()
                .map(|b| format!("{:.4}", b.gain))
                .collect();
            eprintln!("training {} (seed {}, gains {})", loaded.cfg.name, loaded.cfg.seed, gains.join(", "));
            let outcome = experiment::run_train(&loaded.cfg, &loaded.dir, &out)?;
            print_metrics(&outcome.metrics);
            eprintln!("artifacts in {}", outcome.out_dir.display());
        }
        Command::Eval { checkpoint, config } => {
            let loaded = load_config(&config, cli.seed)?;
            let (model, metrics) = experiment::run_eval(&checkpoint, &loaded.cfg, &loaded.dir)?;
            print!("{}", experiment::metrics_csv(&loaded.cfg, &model, &metrics));
        }
        Command::Denoise {
            checkpoint,
            config,
            density,
            count,
            split,
            output,
        } => {
            let loaded = load_config(&config, cli.seed)?;
            let output = match output {
                Some(p) => p,
                None => {
                    let dir = out_dir(cli.out_dir, &loaded);
                    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    dir.join("denoise.pgm")
                }
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let density = density.unwrap_or(loaded.cfg.data.noise_density);
            let outcome =
                experiment::run_denoise(&checkpoint, &loaded.cfg, &loaded.dir, split, count, density, &output)?;
            println!(
                "images {}  density {density}  mse {:.6}  (corrupted input mse {:.6})",
                outcome.images, outcome.mse, outcome.noisy_mse
            );
            eprintln!("mosaic written to {}", output.display());
        }
        Command::Endurance { checkpoint, output } => {
            let model = checkpoint::load(&checkpoint)?;
            let csv = experiment::endurance_csv(&endurance_report(&model));
            print!("{csv}");
            if let Some(path) = output {
                std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
