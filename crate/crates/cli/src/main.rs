use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::ExperimentConfig;

/// Federated few-shot simulator.
#[derive(Parser)]
#[command(name = "fes", version)]
struct Cli {
    /// Experiment config (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true, env = "FES_SEED")]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true, env = "FES_OUT_DIR")]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task and its client partition.
    GenData,
    /// Run the diversity selector over an embeddings file and audit each pick.
    Select {
        /// JSONL samples with `id` and `embedding` (e.g. gen-data's dataset.jsonl).
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Choose per-layer training modes on a proxy task.
    Plan {
        /// Evaluate every terraced plan for the frontier, not just the searched ones.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Simulate one federated run.
    Run,
    /// Compare trace CSVs by time to a target accuracy.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        target: f64,
        /// Index of the trace the speedup column is relative to.
        #[arg(long, default_value_t = 0)]
        baseline: usize,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn say(quiet: bool, text: impl AsRef<str>) {
    if !quiet {
        println!("{}", text.as_ref());
    }
}

fn real_main(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let q = cli.quiet;
    match &cli.command {
        Command::GenData => {
            for p in commands::gen_data(&cfg)? {
                say(q, format!("wrote {}", p.display()));
            }
        }
        Command::Select {
            embeddings,
            k,
            rho,
            budget,
        } => {
            let mut sel = commands::selector_from(&cfg);
            sel.k = k.unwrap_or(sel.k);
            sel.rho = rho.unwrap_or(sel.rho);
            sel.budget_fraction = budget.unwrap_or(sel.budget_fraction);
            let samples = commands::read_embeddings(embeddings)?;
            let path = commands::select(&samples, &sel, &cfg)?;
            say(q, format!("wrote {}", path.display()));
        }
        Command::Plan { exhaustive } => {
            let out = commands::plan(&cfg, *exhaustive)?;
            say(q, commands::describe_plan(&out));
            say(
                q,
                format!("wrote {}", cfg.output_dir.join("frontier.csv").display()),
            );
        }
        Command::Run => {
            let summary = commands::run(&cfg)?;
            say(q, commands::describe_run(&summary));
            say(
                q,
                format!(
                    "wrote trace.csv, summary.json, model.ckpt to {}",
                    cfg.output_dir.display()
                ),
            );
        }
        Command::Report {
            traces,
            target,
            baseline,
        } => {
            let rows = commands::report(traces, *target, *baseline)?;
            say(q, commands::format_report(&rows, *target));
            if cli.out.is_some() {
                std::fs::create_dir_all(&cfg.output_dir)?;
                commands::write_report_csv(&rows, &cfg.output_dir.join("report.csv"))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line: the context chain joined.
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
