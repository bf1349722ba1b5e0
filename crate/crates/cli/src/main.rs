//! `whatif`: grow a branching plot tree from a linear plot and export it as a
//! playable game.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use whatif_core::llm_gateway::Mode;

use config::Settings;

#[derive(Debug, Parser)]
#[command(name = "whatif", version, about = "Branching plot generation for interactive fiction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a tree, narrate it and export the game.
    Generate(GenerateArgs),
    /// Continue an interrupted generation from its checkpoint.
    Resume(ResumeArgs),
    /// Check a tree file and print any violations.
    Validate(ValidateArgs),
    /// Print the events along a choice vector such as "OAOA".
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Plot summary file.
    #[arg(conflicts_with = "plot")]
    plot_file: Option<PathBuf>,
    /// Plot summary text.
    #[arg(long)]
    plot: Option<String>,
    /// Main character's name.
    #[arg(long = "char")]
    char_name: Option<String>,
    #[arg(long)]
    title: Option<String>,
    /// Nodes per storyline; the model picks up to 6 when omitted.
    #[arg(long)]
    nodes: Option<u32>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct ResumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// live, record, replay or mock.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    cassette: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Cap on model calls during expansion.
    #[arg(long)]
    budget: Option<usize>,
    /// Seed of the mock backend.
    #[arg(long)]
    seed: Option<u64>,
    /// Branches and narrations generated concurrently.
    #[arg(long)]
    parallel: Option<usize>,
    /// JSON file with the same keys as these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Chat-completions URL for live and record modes.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Name of the environment variable that holds the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    retry_limit: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Stop after this many merged branches, leaving a checkpoint.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

impl RunArgs {
    fn settings(&self) -> Settings {
        Settings {
            mode: self.mode,
            cassette: self.cassette.clone(),
            out_dir: self.out_dir.clone(),
            budget: self.budget,
            seed: self.seed,
            parallel: self.parallel,
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            api_key_env: self.api_key_env.clone(),
            retry_limit: self.retry_limit,
            timeout_secs: self.timeout_secs,
            ..Settings::default()
        }
    }
}

#[derive(Debug, Args)]
struct ValidateArgs {
    tree: PathBuf,
    /// Also require a fully expanded tree.
    #[arg(long)]
    complete: bool,
    /// Fail on warnings too.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    tree: PathBuf,
    /// One letter per decision: O for original, A for alternate.
    #[arg(long)]
    path: String,
}

fn dispatch(cli: Cli) -> Result<(), error::CliError> {
    match cli.command {
        Command::Generate(args) => {
            let flags = Settings {
                plot: args.plot,
                plot_file: args.plot_file,
                char: args.char_name,
                title: args.title,
                nodes: args.nodes,
                ..args.run.settings()
            };
            let settings = Settings::resolve(flags, args.run.config.as_deref())?;
            commands::generate(settings, args.run.stop_after)
        }
        Command::Resume(args) => {
            let settings = Settings::resolve(args.run.settings(), args.run.config.as_deref())?;
            commands::resume(&args.checkpoint, settings, args.run.stop_after)
        }
        Command::Validate(args) => commands::validate(&args.tree, args.complete, args.strict),
        Command::Inspect(args) => commands::inspect(&args.tree, &args.path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::from(error::EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
