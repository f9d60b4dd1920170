mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use doge_core::config::RunConfig;

use rundir::{CliError, CliResult, RunDir};

#[derive(Parser, Debug)]
#[command(name = "doge", version, about = "Domain-general structured pruning of transformer encoders")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.max_epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run name (config key `name`).
    #[arg(long, global = true)]
    name: Option<String>,
    /// Top-level seed (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories; beats DOGE_OUTPUT_ROOT.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TicketArgs {
    /// doge, winning or random (config key `pruning.strategy`).
    #[arg(long)]
    pub strategy: Option<String>,
    /// Variance coefficient (config key `scoring.lambda`).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sparsity level (config key `pruning.level`).
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic multi-domain corpus.
    GenerateData,
    /// Validate an external JSON-lines corpus and copy it into the run.
    Ingest {
        /// Corpus file (config key `data.path`).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "jsonl")]
        format: String,
    },
    /// Finetune from a seeded initialization; saves the best and rewind checkpoints.
    Finetune,
    /// Per-domain expressive scores, domain-general scores and quadrants.
    Score,
    /// Ticket selection at every level of the schedule.
    Select(TicketArgs),
    /// Rewind the surviving parameters and retrain the pruned model.
    Rewind(TicketArgs),
    /// Out-of-domain accuracy and macro-F1 per test domain.
    Evaluate {
        #[command(flatten)]
        ticket: TicketArgs,
        /// `ticket` or `finetuned`.
        #[arg(long, default_value = "ticket")]
        target: String,
        /// Comma-separated domains; every test domain when absent.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
    },
    /// Strategies by sparsity levels by seeds.
    SweepSparsity {
        /// Number of seeds (config key `analysis.seeds`).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Doge tickets across the λ grid at fixed levels.
    SweepLambda {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// FFN activation statistics per domain.
    Probe,
    /// Collect existing reports into one markdown summary.
    Report,
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string literal")
}

fn overrides(g: &GlobalArgs, command: &Command) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &g.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(n) = &g.name {
        out.push(("name".into(), quoted(n)));
    }
    if let Some(s) = g.seed {
        out.push(("seed".into(), s.to_string()));
    }
    let ticket = match command {
        Command::Select(t) | Command::Rewind(t) => Some(t),
        Command::Evaluate { ticket, .. } => Some(ticket),
        _ => None,
    };
    if let Some(t) = ticket {
        if let Some(s) = &t.strategy {
            out.push(("pruning.strategy".into(), quoted(s)));
        }
        if let Some(l) = t.lambda {
            out.push(("scoring.lambda".into(), format!("{l:?}")));
        }
        if let Some(l) = t.level {
            out.push(("pruning.level".into(), format!("{l:?}")));
        }
    }
    if let Command::SweepSparsity { seeds: Some(n) } | Command::SweepLambda { seeds: Some(n) } = command {
        out.push(("analysis.seeds".into(), n.to_string()));
    }
    if let Command::Ingest { input: Some(p), .. } = command {
        out.push(("data.source".into(), quoted("jsonl")));
        out.push(("data.path".into(), quoted(&p.to_string_lossy())));
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<()> {
    let sets = overrides(&cli.global, &cli.command)?;
    let config = match &cli.global.config {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::config(format!("config file {} not found", p.display())));
            }
            RunConfig::load(p, &sets)?
        }
        None => RunConfig::from_toml("", &sets)?,
    };
    let mut dir = RunDir::open(config, cli.global.output_root.clone())?;
    match cli.command {
        Command::GenerateData => commands::generate_data(&mut dir),
        Command::Ingest { format, .. } => commands::ingest(&mut dir, &format),
        Command::Finetune => commands::finetune(&mut dir),
        Command::Score => commands::score(&mut dir),
        Command::Select(_) => commands::select(&mut dir),
        Command::Rewind(_) => commands::rewind(&mut dir),
        Command::Evaluate { target, domains, .. } => commands::evaluate(&mut dir, &target, &domains),
        Command::SweepSparsity { .. } => commands::sweep_sparsity(&mut dir),
        Command::SweepLambda { .. } => commands::sweep_lambda(&mut dir),
        Command::Probe => commands::probe(&mut dir),
        Command::Report => commands::report(&mut dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
