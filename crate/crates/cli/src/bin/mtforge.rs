use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtforge_cli::{finish, write_json, Result};
use mtforge_core::pipeline::{run_pipeline, PipelineConfig, RunOptions, Stage};

/// End-to-end recipe: prepare, filter, case, bpe, tag, base, augment, finetune, pool,
/// select, decode, report. Every stage writes a manifest entry; `--resume` reuses
/// stages whose configuration and inputs are unchanged.
#[derive(Parser)]
#[command(name = "mtforge", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the stages of --config in order, writing report.txt and report.json
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Stop after this stage.
        #[arg(long)]
        until: Option<Stage>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print the default configuration as JSON.
    DefaultConfig,
    /// List the stages in execution order.
    Stages,
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, resume, until, quiet } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = run_pipeline(&cfg, &RunOptions { resume, until, verbose: !quiet })?;
            let names = |s: &[Stage]| s.iter().map(|s| s.name()).collect::<Vec<_>>().join(" ");
            eprintln!("mtforge: ran [{}], reused [{}]", names(&out.ran), names(&out.skipped));
            if let Some(report) = &out.report {
                print!("{}", report.render_text());
            }
            eprintln!("mtforge: manifest digest {}", out.manifest.content_digest());
        }
        Cmd::DefaultConfig => write_json(None, &PipelineConfig::default())?,
        Cmd::Stages => {
            for s in Stage::ALL {
                println!("{}", s.name());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    finish("mtforge", run(Cli::parse()))
}
