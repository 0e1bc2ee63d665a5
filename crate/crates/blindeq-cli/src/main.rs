use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blindeq::experiment::{recipe, run_experiment, write_outputs, ExperimentConfig, RECIPES};
use blindeq::Error;
use clap::{Args, Parser, Subcommand};

/// Blind equalization experiments: channel simulation, adaptive
/// equalizers and SER evaluation.
#[derive(Parser)]
#[command(name = "blindeq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run one of the built-in figure recipes.
    Recipe {
        name: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Print the names of the built-in recipes.
    ListRecipes,
}

#[derive(Args)]
struct RunOpts {
    /// Output directory (default: results/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frames per run.
    #[arg(long = "n-ind")]
    n_ind: Option<usize>,
    /// Worker threads.
    #[arg(long, env = "BLINDEQ_WORKERS")]
    workers: Option<usize>,
}

fn execute(mut cfg: ExperimentConfig, name: &str, opts: RunOpts) -> Result<(), Error> {
    if let Some(k) = opts.n_ind {
        cfg.run.n_ind = k;
    }
    cfg.validate()?;
    let workers = opts
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let out = opts.out.unwrap_or_else(|| Path::new("results").join(name));
    eprintln!(
        "{name}: {} points x {} equalizers x {} runs, {} workers",
        cfg.points().len(),
        cfg.variants().len(),
        cfg.run.n_run,
        workers
    );
    let result = run_experiment(&cfg, workers)?;
    write_outputs(&cfg, &result, &out)?;
    for row in &result.summary {
        println!(
            "point {:>2}  snr {:>5.1} dB  {:<24} ser {:.3e}  unsuccessful {}/{}",
            row.point,
            row.snr_db,
            row.equalizer,
            row.final_ser,
            row.unsuccessful,
            row.successful + row.unsuccessful
        );
    }
    eprintln!("wrote {} ({:.1} s)", out.display(), result.manifest.wall_time_s);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::ListRecipes => {
            for name in RECIPES {
                println!("{name}");
            }
            Ok(())
        }
        Command::Recipe { name, opts } => recipe(&name).and_then(|cfg| execute(cfg, &name, opts)),
        Command::Run { config, opts } => {
            let name = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            std::fs::read_to_string(&config)
                .map_err(Error::from)
                .and_then(|text| ExperimentConfig::parse(&text))
                .and_then(|cfg| execute(cfg, &name, opts))
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
