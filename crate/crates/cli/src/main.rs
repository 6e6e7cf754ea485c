use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sear_cli::commands::{self, default_out_dir};
use sear_cli::config::{self, RunConfig};
use sear_cli::CliError;

/// Agent/environment structured representations for visual RL.
#[derive(Parser)]
#[command(name = "sear", version)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `desk` or `paper`.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` or `table.key=value`; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: `$SEAR_OUTPUT_ROOT/<command>-...`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent.
    Train,
    /// Evaluate a checkpoint with the deterministic policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the linear-Gaussian toy comparison.
    Toy,
    /// Write a frame and its mask under every mask mode.
    Maskdemo {
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Dump last-conv activation maps blended over the frame.
    Activations {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Plot a metric across runs as mean ± one std.
    Plot {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "eval_success")]
        scalar: String,
        /// Record kind to read (`update`, `episode`, `eval`).
        #[arg(long)]
        kind: Option<String>,
        /// `.ppm` or `.png`.
        #[arg(long, default_value = "plot.ppm")]
        output: PathBuf,
    },
}

fn run_name(cfg: &RunConfig, command: &str) -> String {
    match command {
        "toy" => "toy".into(),
        _ => format!("{command}-{}-seed{}", cfg.train.agent.variant.name(), cfg.train.seed),
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Command::Plot {
        files,
        scalar,
        kind,
        output,
    } = &cli.command
    {
        return commands::plot_run(files, scalar, kind.as_deref(), output);
    }
    let cfg = config::resolve(cli.config.as_deref(), cli.preset.as_deref(), cli.seed, &cli.overrides)?;
    let out = |name: &str| {
        cli.out
            .clone()
            .unwrap_or_else(|| default_out_dir(&run_name(&cfg, name)))
    };
    match &cli.command {
        Command::Train => commands::train_run(&cfg, &out("train")),
        Command::Eval { checkpoint } => commands::eval_run(&cfg, checkpoint, &out("eval")),
        Command::Toy => commands::toy_run(&cfg, &out("toy")),
        Command::Maskdemo { steps } => commands::maskdemo_run(&cfg, *steps, &out("maskdemo")),
        Command::Activations { checkpoint, steps } => {
            commands::activations_run(&cfg, checkpoint.as_deref(), *steps, &out("activations"))
        }
        Command::Plot { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sear: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
