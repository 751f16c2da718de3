use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use urbanprof::config::Config;
use urbanprof::pipeline::{self, Command};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    IngestPoi,
    Profiles,
    Cluster,
    Timelines,
    Hopkins,
    Cca,
    Classify,
    LanduseCompare,
    Synth,
    Report,
    /// Every command after `synth`, in order.
    All,
}

/// Area typing of city grid cells from POI activity profiles, validated
/// against mobile-phone activity timelines.
#[derive(Debug, Parser)]
#[command(name = "urbanprof", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only log errors.
    #[arg(long)]
    quiet: bool,
}

fn to_command(c: Cmd) -> Option<Command> {
    Some(match c {
        Cmd::IngestPoi => Command::IngestPoi,
        Cmd::Profiles => Command::Profiles,
        Cmd::Cluster => Command::Cluster,
        Cmd::Timelines => Command::Timelines,
        Cmd::Hopkins => Command::Hopkins,
        Cmd::Cca => Command::Cca,
        Cmd::Classify => Command::Classify,
        Cmd::LanduseCompare => Command::LanduseCompare,
        Cmd::Synth => Command::Synth,
        Cmd::Report => Command::Report,
        Cmd::All => return None,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Ok(v) = std::env::var("URBANPROF_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                urbanprof::par::init_threads(n);
            }
            _ => {
                log::error!("URBANPROF_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }

    let mut cfg = match &cli.config {
        Some(p) => match Config::load(p) {
            Ok(c) => c,
            Err(e) => {
                log::error!("{e}");
                return ExitCode::from(2);
            }
        },
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }

    let result = match to_command(cli.command) {
        Some(c) => pipeline::run(c, &cfg).map(|s| vec![s]),
        None => pipeline::run_chain(&cfg),
    };
    match result {
        Ok(runs) => {
            for r in runs {
                for a in r.artifacts {
                    log::info!("{}: {}", r.command, cfg.out_dir.join(a).display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
