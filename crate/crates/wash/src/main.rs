use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wash::commands;
use wash::{CliError, Manifest};
use wash_core::nn::SyntheticSpec;
use wash_core::toy2d::{ToyConfig, ToyShuffle, ToyStrategy, DEFAULT_NOISE_SIGMA};

#[derive(Parser)]
#[command(
    name = "wash",
    version,
    about = "Population training with parameter shuffling and averaging"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the population described by a manifest.
    Train {
        manifest: PathBuf,
        /// Output directory (default: run.output from the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for local steps.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run every combination of the manifest's sweep axes and write sweep.csv.
    Sweep {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs side by side.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// EMA period the communication ratios are relative to.
        #[arg(long, default_value_t = 10)]
        papa_period: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Continue a run from its checkpoint.bin.
    Resume {
        run: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Two points on the 2D landscape; writes a trajectory CSV.
    Toy2d {
        #[arg(long, value_enum, default_value_t = ToyKind::Wash)]
        strategy: ToyKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.99)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        papa_period: usize,
        #[arg(long, default_value_t = 0.01)]
        shuffle_p: f64,
        #[arg(long, value_enum, default_value_t = ToyMode::Permute)]
        mode: ToyMode,
        #[arg(long, default_value = "trajectory.csv")]
        out: PathBuf,
    },
    /// Write a synthetic Gaussian-mixture dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 1000)]
        n_per_class: usize,
        #[arg(long, default_value_t = 250)]
        n_test_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 6)]
        modes: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyKind {
    None,
    Papa,
    Wash,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyMode {
    Permute,
    Swap,
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train {
            manifest,
            out,
            workers,
        } => {
            let m = Manifest::load(&manifest)?;
            let base = manifest_dir(&manifest);
            let out = out.unwrap_or_else(|| m.output_dir(&base));
            let r = commands::train(&m, &base, &out, workers)?;
            if let Some(e) = &r.eval {
                println!(
                    "ensemble {:.4}  averaged {:.4}  best {:.4}  worst {:.4}",
                    e.ensemble_acc, e.averaged_acc, e.best_model_acc, e.worst_model_acc
                );
            }
            println!("artifacts in {}", out.display());
        }
        Cmd::Sweep { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let base = manifest_dir(&manifest);
            let out = out.unwrap_or_else(|| m.output_dir(&base));
            commands::sweep(&m, &base, &out)?;
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Cmd::Report {
            runs,
            papa_period,
            csv,
        } => {
            let rows = commands::report_rows(&runs, papa_period)?;
            print!("{}", commands::report_text(&rows));
            if let Some(path) = csv {
                wash::formats::write_text(&path, &commands::report_csv(&rows))?;
            }
        }
        Cmd::Resume { run, workers } => {
            commands::resume(&run, workers)?;
            println!("resumed run finished in {}", run.display());
        }
        Cmd::Toy2d {
            strategy,
            seed,
            sigma,
            steps,
            lr,
            alpha,
            papa_period,
            shuffle_p,
            mode,
            out,
        } => {
            let strategy = match strategy {
                ToyKind::None => ToyStrategy::None,
                ToyKind::Papa => ToyStrategy::Papa,
                ToyKind::Wash => ToyStrategy::Wash,
            };
            let cfg = ToyConfig {
                steps,
                lr,
                noise_sigma: sigma,
                alpha,
                papa_period,
                shuffle_p,
                shuffle_mode: match mode {
                    ToyMode::Permute => ToyShuffle::Permute,
                    ToyMode::Swap => ToyShuffle::Swap,
                },
                ..ToyConfig::with_strategy(strategy, seed)
            };
            let ends = commands::toy2d(&cfg, &out)?;
            println!("endpoints: {:?} {:?}", ends[0], ends[1]);
        }
        Cmd::GenData {
            out,
            seed,
            classes,
            dim,
            n_per_class,
            n_test_per_class,
            spread,
            modes,
        } => {
            let spec = SyntheticSpec {
                seed,
                classes,
                dim,
                n_per_class,
                n_test_per_class,
                spread,
                modes_per_class: modes,
            };
            commands::gen_data(&spec, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
