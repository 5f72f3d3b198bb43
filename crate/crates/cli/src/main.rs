mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Outputs;
use config::{RawConfig, RunConfig};

#[derive(Parser)]
#[command(name = "pdlnml", about = "Stochastic complexity along Lasso paths by level-set sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Toeplitz-design regression dataset.
    GenData(Common),
    /// Complexity, criteria and selections along a regularization path.
    NmlPath(Common),
    /// Time sampler steps over N and P sweeps.
    Bench(Common),
    /// Run the slope, tolerance and bias studies.
    Study(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `[data] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

const USAGE: u8 = 2;
const FAILURE: u8 = 1;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig, &mut Outputs) -> pdlnml::Result<()>) = match &cli.command {
        Command::GenData(c) => (c, commands::gen_data),
        Command::NmlPath(c) => (c, commands::nml_path),
        Command::Bench(c) => (c, commands::bench),
        Command::Study(c) => (c, commands::study),
    };
    let text = match fs::read_to_string(&common.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", common.config.display());
            return ExitCode::from(USAGE);
        }
    };
    let parsed = RawConfig::parse(&text).and_then(|mut raw| {
        if let Some(seed) = common.seed {
            raw.set("data", "seed", &seed.to_string());
        }
        RunConfig::from_raw(&raw).map(|cfg| (raw, cfg))
    });
    let (raw, cfg) = match parsed {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {}: {e}", common.config.display());
            return ExitCode::from(USAGE);
        }
    };
    let dir = common.out.clone().or_else(|| cfg.output.directory.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut out = match Outputs::create(&dir) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return ExitCode::from(FAILURE);
        }
    };
    if let Err(e) = out.write_text("config.txt", &raw.to_string()) {
        eprintln!("error: {e}");
        return ExitCode::from(FAILURE);
    }
    if let Err(e) = run(&cfg, &mut out) {
        eprintln!("error: {e}");
        let code = if matches!(e, pdlnml::Error::Input(_)) { USAGE } else { FAILURE };
        return ExitCode::from(code);
    }
    if let Err(e) = out.write_manifest() {
        eprintln!("error: manifest: {e}");
        return ExitCode::from(FAILURE);
    }
    ExitCode::SUCCESS
}
