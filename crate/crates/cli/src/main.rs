use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use umbra_cli::{evaluate, extract, render, synthesize, CliError, SynthesizeOptions, EXIT_RUNTIME};

#[derive(Debug, Parser)]
#[command(name = "umbra", version, about = "Synthesize 3D shadow-art geometry from binary target images")]
struct Cli {
    /// Worker threads; 1 gives a single-threaded run.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a field for a job config, extract its mesh and write a report.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write overlays against the unregistered inputs and the mesh silhouettes.
        #[arg(long)]
        debug_overlays: bool,
    },
    /// Render the thresholded shadow of a stored constraint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        constraint: usize,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the field's level set as an OBJ mesh.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// IoU and Dice between a shadow image and a target image.
    Evaluate {
        #[arg(long)]
        shadow: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synthesize {
            config,
            out,
            seed,
            epochs,
            debug_overlays,
        } => {
            let opts = SynthesizeOptions {
                out,
                seed,
                epochs,
                debug_overlays,
            };
            let outcome = synthesize(&config, &opts)?;
            println!("{}", outcome.out_dir.join("report.jsonl").display());
        }
        Command::Render {
            checkpoint,
            constraint,
            width,
            height,
            tau,
            out,
        } => {
            let dims = match (width, height) {
                (None, None) => None,
                (Some(w), Some(h)) => Some((w, h)),
                _ => return Err(CliError::Validation("--width and --height go together".into())),
            };
            render(&checkpoint, constraint, dims, tau, &out)?;
        }
        Command::Extract {
            checkpoint,
            resolution,
            tau,
            out,
        } => {
            let metrics = extract(&checkpoint, resolution, tau, &out)?;
            println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
        }
        Command::Evaluate {
            shadow,
            target,
            threshold,
        } => {
            let e = evaluate(&shadow, &target, threshold)?;
            println!("{}", serde_json::to_string(&e).expect("metrics serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(umbra_cli::EXIT_VALIDATION as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_RUNTIME as u8);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
