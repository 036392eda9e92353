use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hca::commands::{self, SynthArgs};
use hca::config::Resolved;
use hca_core::data::{DatasetKind, ImageGeometry};

#[derive(Parser)]
#[command(name = "hca", version, about = "Hybrid convolution-attention severity regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Proxy,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic proxy or target dataset.
    SynthData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty directory.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Label noise as a fraction of each score range (target only).
        #[arg(long, default_value_t = 0.0)]
        noise_sd: f64,
    },
    /// Pre-train on the proxy dataset.
    Pretrain(RunArgs),
    /// Patient-grouped cross-validation of every configured arm.
    Crossval {
        #[command(flatten)]
        run: RunArgs,
        /// Folds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every primitive and the configured models.
    GradCheck(RunArgs),
    /// Merge aggregate reports into a markdown table.
    Report {
        #[arg(long = "in", num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`, then `HCA_OUT`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> hca::Result<()> {
    match cli.command {
        Command::SynthData { kind, seed, n, out, force, channels, height, width, noise_sd } => {
            let kind = match kind {
                Kind::Proxy => DatasetKind::Proxy,
                Kind::Target => DatasetKind::Target,
            };
            let geometry = ImageGeometry { channels, height, width };
            commands::synth_data(&SynthArgs { kind, seed, n: n as usize, geometry, noise_sd, out, force })
        }
        Command::Pretrain(a) => {
            let r = Resolved::load(&a.config, a.out_dir)?;
            for dir in commands::pretrain(&r, a.seed)? {
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Crossval { run, jobs } => {
            let r = Resolved::load(&run.config, run.out_dir)?;
            for arm in commands::crossval(&r, run.seed, jobs)? {
                let s = &arm.aggregate;
                println!(
                    "{}: mse {:.4} ± {:.4}, r2 extent {:.3} ± {:.3}, r2 opacity {:.3} ± {:.3}",
                    arm.name,
                    s["mse"].mean,
                    s["mse"].std,
                    s["r2_geographic_extend"].mean,
                    s["r2_geographic_extend"].std,
                    s["r2_opacity"].mean,
                    s["r2_opacity"].std
                );
            }
            Ok(())
        }
        Command::GradCheck(a) => {
            let r = Resolved::load(&a.config, a.out_dir)?;
            let rep = commands::grad_check(&r, a.seed)?;
            for (name, err) in &rep.checks {
                let mark = if *err <= rep.tolerance { "ok" } else { "FAIL" };
                println!("{name:<16} {err:.3e} {mark}");
            }
            if rep.passed {
                Ok(())
            } else {
                Err(hca::Error::Core(hca_core::Error::Invariant(format!(
                    "gradient check exceeded {:e}",
                    rep.tolerance
                ))))
            }
        }
        Command::Report { inputs, out } => {
            print!("{}", commands::report(&inputs, &out)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hca: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
