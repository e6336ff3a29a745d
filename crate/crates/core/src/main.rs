use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trivoxel::pipeline::{bench, dump_planes, run_and_write, PipelineConfig};
use trivoxel::{verify, Error};

#[derive(Parser)]
#[command(name = "trivoxel", version, about = "Semantic occupancy forward pipeline on synthetic voxel scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline and write prediction, ground truth and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-stage timings and operation counters as key = value lines.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the oracle and property suites.
    Verify,
    /// Write per-plane feature summaries of the full-scale fusion block.
    DumpPlanes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_config() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => PipelineConfig::load(&config).and_then(|mut cfg| {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let (run, files) = run_and_write(&cfg, &out)?;
            print!("{}", run.metrics.to_text());
            println!("prediction = {}", files.prediction.display());
            Ok(())
        }),
        Command::Bench { config } => PipelineConfig::load(&config).and_then(|cfg| {
            for (k, v) in bench(&cfg)? {
                println!("{k} = {v}");
            }
            Ok(())
        }),
        Command::Verify => {
            let results = verify::run_all();
            for r in &results {
                println!("{}", r.line());
            }
            if results.iter().all(|r| r.passed) {
                Ok(())
            } else {
                eprintln!("some checks failed");
                return ExitCode::from(2);
            }
        }
        Command::DumpPlanes { config, out } => PipelineConfig::load(&config).and_then(|cfg| {
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            for p in dump_planes(&cfg, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
