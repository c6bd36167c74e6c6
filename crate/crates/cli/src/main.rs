//! `cashbench`: run the benchmarking analyses from a configuration file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cashbench::estimators::CeVariant;
use commands::{CliError, Context, COMMANDS};
use config::{RunConfig, REFERENCE_CONFIG};

#[derive(Parser, Debug)]
#[command(name = "cashbench", version, about = "Cost-equivalent benchmarking of cluster-randomized trials")]
struct Cli {
    /// validate, itt, ce, tce, bcr, spillover, modality, choice, hetero, forest,
    /// attrition, simulate, power or report
    command: String,
    /// Run configuration (TOML). Use `reference` for the bundled configuration.
    #[arg(long, env = "CASHBENCH_CONFIG")]
    config: Option<String>,
    /// Overrides the configured seed (data generation, Monte Carlo and forests).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured `out`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel estimation.
    #[arg(long)]
    threads: Option<usize>,
    /// Cost-equivalent interpolation variant (linear, quadratic, cubic, drop_lower, ...).
    #[arg(long)]
    variant: Option<String>,
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    if !COMMANDS.contains(&cli.command.as_str()) {
        return Err(CliError::Config(format!(
            "unknown command `{}`; expected one of {}",
            cli.command,
            COMMANDS.join(", ")
        )));
    }
    let mut cfg = match cli.config.as_deref() {
        None => {
            return Err(CliError::Config(
                "no configuration: pass --config PATH or set CASHBENCH_CONFIG".into(),
            ))
        }
        Some("reference") => RunConfig::parse(REFERENCE_CONFIG)?,
        Some(path) => RunConfig::load(path.as_ref())?,
    };
    let variant = cli
        .variant
        .as_deref()
        .map(CeVariant::parse)
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    if cli.seed.is_some() {
        cfg.forest.config.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Context { cfg, seed, out, variant })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = context(&cli).and_then(|ctx| commands::run(&cli.command, &ctx));
    match result {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "command": cli.command,
                "kind": e.kind(),
                "exit_code": e.exit_code(),
                "message": e.message(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
