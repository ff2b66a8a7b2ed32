use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use safearm_cli::{run, AgentKind, Mode, RunSpec};

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Runs shielded-manipulator experiments.
#[derive(Debug, Parser)]
#[command(name = "safearm", version)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, value_enum, default_value = "random")]
    agent: AgentKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    /// Steps per episode; defaults to the scenario's (25 for fuzz-safety).
    #[arg(long)]
    max_steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario's shield setting.
    #[arg(long, value_enum)]
    shield: Option<Switch>,
    /// Training hyperparameters (TOML).
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Where an external agent connects (`host:port`).
    #[arg(long, default_value = "127.0.0.1:5555")]
    endpoint: String,
    /// Agent connect and reply timeout.
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    /// Continue a training run from its checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Worker threads for fuzz-safety.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let spec = RunSpec {
        scenario: a.scenario,
        mode: a.mode,
        agent: a.agent,
        seed: a.seed,
        out: a.out,
        epochs: a.epochs,
        episodes_per_epoch: a.episodes_per_epoch,
        max_steps: a.max_steps,
        shield: a.shield.map(|s| matches!(s, Switch::On)),
        train_config: a.train_config,
        endpoint: a.endpoint,
        timeout_ms: a.timeout_ms,
        resume: a.resume,
        threads: a.threads,
    };
    match run(&spec) {
        Ok(s) => {
            log::info!(
                "{} episodes, {} unsafe contacts, outputs in {}",
                s.episodes,
                s.unsafe_contacts,
                spec.out.display()
            );
            ExitCode::from(s.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
