use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use omnicond::eval::EvalMode;
use omnicond::{Error, Result};
use omnicond_cli::commands::{self, EvalArgs, GenerateArgs, TrainArgs, HELDOUT_DIR};
use omnicond_cli::{exit_code, RunConfig};

#[derive(Parser)]
#[command(
    name = "omnicond",
    version,
    about = "Multi-condition video diffusion at desk scale"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Worker threads; OMNI_THREADS also caps this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset and its manifest.
    Synth {
        /// Overrides `dataset.clips`.
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Run the staged training schedule.
    Train {
        /// Stop (and checkpoint) once the global step reaches this value.
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Generate a video from a checkpoint and a request file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        request: PathBuf,
    },
    /// Score a checkpoint on held-out clips.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<paths.data>/heldout`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "audio,pose,audio+pose")]
        modes: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the ablation grid and print the comparison table.
    Ablate,
}

fn jobs(flag: Option<usize>) -> Option<usize> {
    let env = std::env::var("OMNI_THREADS")
        .ok()
        .and_then(|v| v.parse().ok());
    match (flag, env) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

fn parse_mode(s: &str) -> Result<EvalMode> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown eval mode {s:?}")))
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    omnicond::exec::init_threads(jobs(g.jobs));
    match cli.cmd {
        Cmd::Synth { clips } => {
            if let Some(n) = clips {
                cfg.dataset.clips = n;
            }
            cfg.validate()?;
            let dir = g.out.unwrap_or_else(|| cfg.paths.data.clone());
            commands::cmd_synth(&cfg, &dir)?;
        }
        Cmd::Train { stop_at, quiet } => {
            let args = TrainArgs {
                out: g.out.unwrap_or_else(|| cfg.paths.out.clone()),
                resume: g.resume,
                stop_at,
                quiet,
            };
            commands::cmd_train(&cfg, &args)?;
        }
        Cmd::Generate {
            checkpoint,
            request,
        } => {
            let args = GenerateArgs {
                checkpoint,
                request,
                out: g.out.unwrap_or_else(|| cfg.paths.out.join("generate")),
                seed: g.seed,
                config: g.config.is_some().then_some(cfg),
            };
            commands::cmd_generate(&args)?;
        }
        Cmd::Eval {
            checkpoint,
            data,
            modes,
            limit,
        } => {
            let modes = modes
                .iter()
                .map(|m| parse_mode(m))
                .collect::<Result<Vec<_>>>()?;
            let args = EvalArgs {
                checkpoint,
                data: data.unwrap_or_else(|| cfg.paths.data.join(HELDOUT_DIR)),
                out: g.out.clone().unwrap_or_else(|| cfg.paths.out.join("eval")),
                modes,
                limit,
            };
            commands::cmd_eval(&cfg, &args)?;
        }
        Cmd::Ablate => {
            let out = g.out.unwrap_or_else(|| cfg.paths.out.join("ablation"));
            commands::cmd_ablate(&cfg, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "config" } else { "runtime" };
            eprintln!("error[{kind}]: {e}");
            ExitCode::from(code as u8)
        }
    }
}
