use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtforge_cli::{finish, read_json, read_pairs, write_json, write_pairs, writer, CliError, Result};
use mtforge_core::filter::{run_filters, AlignCut, AlignRule, FilterRules, Model1Table};
use serde::Serialize;

/// Bitext filtering over tokenized TSV corpora.
#[derive(Parser)]
#[command(name = "filter", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Apply the rule cascade and write the surviving pairs.
    Run {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Rule configuration; defaults enable every rule.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// IBM Model 1 table. Read when it exists; otherwise the table trained on the
        /// rule survivors is written here.
        #[arg(long)]
        align_model: Option<PathBuf>,
        /// Drop this fraction of the worst-aligned pairs (overrides the rules file).
        #[arg(long)]
        drop_frac: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Report<'a> {
    input: String,
    rules: &'a FilterRules,
    align_model: Option<String>,
    #[serde(flatten)]
    counts: &'a mtforge_core::filter::FilterReport,
}

fn run(cli: Cli) -> Result<()> {
    let Cmd::Run { input, output, rules, align_model, drop_frac, report } = cli.cmd;
    let mut cfg: FilterRules = match &rules {
        Some(p) => read_json(p)?,
        None => FilterRules::default(),
    };
    if let Some(f) = drop_frac {
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::Usage(format!("--drop-frac {f} must lie in [0, 1)")));
        }
        let iterations = cfg.align.map_or(5, |a| a.iterations);
        cfg.align = Some(AlignRule { cut: AlignCut::DropFraction(f), iterations });
    }
    let supplied = match &align_model {
        Some(p) if p.exists() => Some(Model1Table::read(BufReader::new(std::fs::File::open(p)?))?),
        _ => None,
    };
    let corpus = read_pairs(&input)?;
    let outcome = run_filters(&corpus, &cfg, supplied.as_ref())?;
    write_pairs(output.as_deref(), &outcome.kept)?;
    if let (Some(path), None, Some(m)) = (&align_model, &supplied, &outcome.align_model) {
        let mut w = writer(Some(path))?;
        m.write(&mut w)?;
        w.flush()?;
    }
    eprintln!("filter: kept {} of {}", outcome.report.kept, outcome.report.total);
    if let Some(path) = &report {
        let r = Report {
            input: input.display().to_string(),
            rules: &cfg,
            align_model: align_model.map(|p| p.display().to_string()),
            counts: &outcome.report,
        };
        write_json(Some(path), &r)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    finish("filter", run(Cli::parse()))
}
