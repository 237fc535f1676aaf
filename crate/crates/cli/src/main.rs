//! `specdraft` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
//! 4 data or format error, 5 numeric or contract violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specdraft::cli_io::{
    cmd_bench, cmd_diag_infonce, cmd_generate, cmd_train_draft, cmd_train_router, cmd_train_target, CliError,
    Overrides, RunConfig,
};
use specdraft::engine::DraftMode;
use specdraft::train::DraftMethod;

#[derive(Parser)]
#[command(name = "specdraft", version, about = "Train drafters and run speculative decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the target model.
    TrainTarget,
    /// Train a draft model against the saved target.
    TrainDraft,
    /// Train the grouped LM-head router on a frozen draft.
    TrainRouter,
    /// Generate a continuation of PROMPT and write the cycle trace.
    Generate { prompt: String },
    /// Compare vanilla and speculative decoding and write metrics.
    Bench {
        /// One prompt per line; held-out corpus windows when omitted.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Write the cross-step InfoNCE matrix of a drafter.
    DiagInfonce,
}

#[derive(Args)]
struct Flags {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// eagle, hass or csra.
    #[arg(long, global = true)]
    method: Option<DraftMethod>,
    /// Rollout steps for multi-step draft training.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Number of vocabulary groups behind the router.
    #[arg(long, global = true)]
    groups: Option<usize>,
    #[arg(long, global = true)]
    top_n: Option<usize>,
    /// chain or tree.
    #[arg(long, global = true)]
    mode: Option<DraftMode>,
    #[arg(long, global = true)]
    tree_depth: Option<usize>,
    #[arg(long, global = true)]
    tree_budget: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    use_router: bool,
    #[arg(long, global = true)]
    max_new_tokens: Option<usize>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            method: self.method,
            steps: self.steps,
            groups: self.groups,
            top_n: self.top_n,
            mode: self.mode,
            tree_depth: self.tree_depth,
            tree_budget: self.tree_budget,
            temperature: self.temperature,
            use_router: self.use_router,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.flags.overrides());
    match cli.command {
        Command::TrainTarget => println!("{}", json(&cmd_train_target(&cfg)?)),
        Command::TrainDraft => println!("{}", json(&cmd_train_draft(&cfg, cfg.draft_method)?)),
        Command::TrainRouter => println!("{}", json(&cmd_train_router(&cfg)?)),
        Command::Generate { prompt } => {
            let g = cmd_generate(&cfg, &prompt)?;
            println!("{}", g.text);
            eprintln!("{} cycles, tau {:.3}, trace {}", g.cycles, g.tau, g.trace.display());
        }
        Command::Bench { prompts } => println!("{}", json(&cmd_bench(&cfg, prompts.as_deref())?)),
        Command::DiagInfonce => print!("{}", cmd_diag_infonce(&cfg)?.to_csv()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
