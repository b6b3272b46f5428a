// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use headprobe::hub::{revision_name, HubClient};
use headprobe::oracle::{self, OracleSuite};
use headprobe::pipeline::{parse_only, run, RunConfig, RunOptions};
use headprobe::{demo, report, ProbeError};

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "headprobe",
    version,
    about = "Attention-head disambiguation probing over GPT-NeoX checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Download every hub checkpoint the config's schedule needs.
    Fetch {
        #[command(flatten)]
        config: ConfigArg,
        /// Restrict to `model` or `model:step`.
        #[arg(long)]
        only: Vec<String>,
    },
    /// Execute the configured analyses and write tables plus the manifest.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Restrict to `model` or `model:step`; repeatable.
        #[arg(long)]
        only: Vec<String>,
        /// Worker threads (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
        /// Reuse completed cells whose inputs are unchanged (default).
        #[arg(long, overrides_with = "no_resume")]
        resume: bool,
        /// Recompute every cell.
        #[arg(long = "no-resume", overrides_with = "resume")]
        no_resume: bool,
    },
    /// Draw SVG figures from the result tables.
    Report {
        /// Config whose `output_dir` holds the tables.
        #[arg(long, short, conflicts_with = "output")]
        config: Option<PathBuf>,
        /// Output directory holding the tables.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Run the small-instance oracle suites.
    Oracle {
        /// Random tiny models for engine parity.
        #[arg(long, default_value_t = 50)]
        models: usize,
        /// Random permutations for the BH invariants.
        #[arg(long, default_value_t = 1000)]
        permutations: usize,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        /// Also run the synthetic pipeline twice and compare tables.
        #[arg(long)]
        pipeline: bool,
    },
    /// Write an offline synthetic workspace (models, stimuli, config).
    Synth {
        /// Target directory.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("config error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn only_filters(only: &[String]) -> Result<Vec<(String, Option<u64>)>, ExitCode> {
    only.iter()
        .map(|s| parse_only(s))
        .collect::<Result<_, _>>()
        .map_err(|e| {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        })
}

fn fail(e: ProbeError) -> ExitCode {
    eprintln!("error: {e}");
    if matches!(e, ProbeError::Config(_)) {
        ExitCode::from(EXIT_CONFIG)
    } else {
        ExitCode::from(EXIT_PARTIAL)
    }
}

fn cmd_fetch(config: &Path, only: &[String]) -> Result<ExitCode, ExitCode> {
    let cfg = load_config(config)?;
    let only = only_filters(only)?;
    let hub = HubClient::new(cfg.hub_config()).map_err(fail)?;
    let mut failed = 0usize;
    for m in &cfg.models {
        let Some(repo) = &m.repo_id else {
            log::info!("{}: local model, nothing to fetch", m.id());
            continue;
        };
        if !only.is_empty() && !only.iter().any(|(id, _)| *id == m.id()) {
            continue;
        }
        let steps = hub.resolve_schedule(repo, &cfg.schedule).map_err(fail)?;
        for step in steps {
            if !only.is_empty() && !only.iter().any(|(id, s)| *id == m.id() && s.is_none_or(|s| s == step)) {
                continue;
            }
            match hub.fetch_checkpoint(repo, &revision_name(step)) {
                Ok(r) => println!("{repo}@{} -> {}", r.revision, r.local_dir.display()),
                Err(e) => {
                    failed += 1;
                    eprintln!("{repo}@{}: {e}", revision_name(step));
                }
            }
        }
    }
    println!("{} bytes transferred", hub.bytes_transferred());
    Ok(ExitCode::from(u8::from(failed > 0) * EXIT_PARTIAL))
}

fn cmd_run(config: &Path, only: &[String], workers: Option<usize>, no_resume: bool) -> Result<ExitCode, ExitCode> {
    let cfg = load_config(config)?;
    let opts = RunOptions {
        resume: !no_resume,
        only: only_filters(only)?,
        workers,
    };
    let summary = run(&cfg, &opts).map_err(fail)?;
    for c in summary.manifest.cells.iter().filter(|c| c.error.is_some()) {
        let step = c.step.map_or("sweep".to_string(), |s| format!("step{s}"));
        eprintln!(
            "{} {step} {}: {:?}: {}",
            c.model,
            c.analysis,
            c.status,
            c.error.as_deref().unwrap_or_default()
        );
    }
    println!(
        "{} cells computed, {} reused, {} not done; results in {}",
        summary.computed,
        summary.reused,
        summary.failed(),
        cfg.output_dir.display()
    );
    Ok(ExitCode::from(summary.exit_code() as u8))
}

fn cmd_report(config: Option<&Path>, output: Option<&Path>) -> Result<ExitCode, ExitCode> {
    let dir = match (config, output) {
        (Some(c), _) => load_config(c)?.output_dir,
        (None, Some(o)) => o.to_path_buf(),
        (None, None) => {
            eprintln!("config error: pass --config or --output");
            return Err(ExitCode::from(EXIT_CONFIG));
        }
    };
    let s = report::render_report(&dir).map_err(fail)?;
    for n in &s.notices {
        println!("notice: {n}");
    }
    for f in &s.figures {
        println!("{}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn print_suite(s: &OracleSuite) {
    let verdict = if s.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {} ({} checks, {:.2}s)",
        s.name,
        s.checks.len(),
        s.elapsed.as_secs_f64()
    );
    for c in s.failures() {
        println!("    {}: {}", c.name, c.detail);
    }
}

fn cmd_oracle(models: usize, permutations: usize, seed: u64, pipeline: bool) -> anyhow::Result<ExitCode> {
    let mut suites = vec![
        oracle::engine_suite(models, seed),
        oracle::stats_suite(permutations, seed),
        oracle::composite_suite(100, seed),
    ];
    if pipeline {
        let dir = tempfile::tempdir().context("creating a scratch directory")?;
        suites.push(oracle::pipeline_suite(dir.path(), seed));
    }
    for s in &suites {
        print_suite(s);
    }
    Ok(if suites.iter().all(OracleSuite::passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_PARTIAL)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fetch { config, only } => cmd_fetch(&config.config, only),
        Command::Run {
            config,
            only,
            workers,
            no_resume,
            ..
        } => cmd_run(&config.config, only, *workers, *no_resume),
        Command::Report { config, output } => cmd_report(config.as_deref(), output.as_deref()),
        Command::Oracle {
            models,
            permutations,
            seed,
            pipeline,
        } => cmd_oracle(*models, *permutations, *seed, *pipeline).map_err(|e| {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PARTIAL)
        }),
        Command::Synth { dir, seed } => demo::write_workspace(dir, *seed)
            .map(|p| {
                println!("wrote {}", p.display());
                println!("next: headprobe run --config {}", p.display());
                ExitCode::SUCCESS
            })
            .map_err(fail),
    };
    outcome.unwrap_or_else(|code| code)
}
