//! `tti`: run, calibrate or sweep trust-then-inspect experiments from a
//! TOML manifest.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tti_core::io::{self, Overrides, OUTPUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "tti", version, about = "Trust-then-inspect OTA-FL backdoor defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; writes metrics.csv and summary.json.
    Run(Common),
    /// Calibrate the trust weights by Bayesian optimization; writes calibration.json.
    Calibrate(Common),
    /// Run every point of the manifest's sweep grid; writes sweep_summary.csv.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Path to the TOML manifest.
    manifest: PathBuf,
    /// Output directory, overriding the manifest.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    /// Scenario seed, overriding the manifest.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            output_dir: self.output_dir.clone(),
            seed: self.seed,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => io::cmd_run(&c.manifest, &c.overrides()).map(|o| {
            println!(
                "final mta {:.4} asr {:.4} -> {}",
                o.final_mta,
                o.final_asr,
                o.dir.display()
            );
        }),
        Command::Calibrate(c) => io::cmd_calibrate(&c.manifest, &c.overrides()).map(|r| {
            let beta: Vec<String> = r.best.beta.iter().map(|b| format!("{b:.4}")).collect();
            println!("beta* [{}] objective {:.4}", beta.join(", "), r.best.objective);
        }),
        Command::Sweep(c) => io::cmd_sweep(&c.manifest, &c.overrides()).map(|rows| {
            for (p, o) in &rows {
                println!("{:<60} mta {:.4} asr {:.4}", p.dir_name(), o.final_mta, o.final_asr);
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(io::exit_code(&e) as u8)
        }
    }
}
