use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtforge_cli::{finish, read_json, read_sentences, write_json, CliError, Result};
use mtforge_core::evalsel::{corpus_bleu, objective, select_ensemble, SelfBleuMatrix, Smoothing};
use mtforge_core::text_norm::Lang;
use serde::Serialize;

/// BLEU scoring, Self-BLEU matrices and diversity-aware ensemble selection.
#[derive(Parser)]
#[command(name = "eval", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Corpus BLEU-4 of tokenized hypotheses against one reference per line.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Print the full breakdown as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Pairwise BLEU between the output files in a directory (one file per model).
    SelfBleu {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Greedy subset selection maximizing mean dev BLEU minus lambda times mean Self-BLEU.
    Select {
        /// Self-BLEU matrix JSON (`{"ids": [...], "matrix": [[...]]}`).
        #[arg(long)]
        matrix: PathBuf,
        /// Dev BLEU per candidate id (`{"id": score, ...}`).
        #[arg(long)]
        dev: PathBuf,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Selection {
    ids: Vec<String>,
    k: usize,
    lambda: f64,
    objective: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Bleu { hyp, reference, json } => {
            let h = read_sentences(Some(&hyp), Lang::En)?;
            let r = read_sentences(Some(&reference), Lang::En)?;
            let b = corpus_bleu(&h, &r, 4, Smoothing::AddOne)?;
            if json {
                write_json(None, &b)?;
            } else {
                println!("{:.2}", b.score);
            }
        }
        Cmd::SelfBleu { outputs, matrix } => {
            let mut files: Vec<PathBuf> = fs::read_dir(&outputs)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.is_file());
            files.sort();
            if files.len() < 2 {
                return Err(CliError::Usage(format!("{} holds fewer than two output files", outputs.display())));
            }
            let ids = files.iter().map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned()).collect();
            let outs = files.iter().map(|p| read_sentences(Some(p), Lang::En)).collect::<Result<Vec<_>>>()?;
            let m = SelfBleuMatrix::compute(ids, &outs)?;
            write_json(matrix.as_deref(), &m)?;
        }
        Cmd::Select { matrix, dev, k, lambda, output } => {
            let m: SelfBleuMatrix = read_json(&matrix)?;
            m.validate()?;
            let dev: BTreeMap<String, f64> = read_json(&dev)?;
            let scores = m
                .ids
                .iter()
                .map(|id| dev.get(id).copied().ok_or_else(|| CliError::Usage(format!("no dev BLEU for `{id}`"))))
                .collect::<Result<Vec<_>>>()?;
            let picked = select_ensemble(&scores, &m.matrix, k, lambda)?;
            let sel = Selection {
                ids: picked.iter().map(|&i| m.ids[i].clone()).collect(),
                k,
                lambda,
                objective: objective(&picked, &scores, &m.matrix, lambda),
            };
            write_json(output.as_deref(), &sel)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    finish("eval", run(Cli::parse()))
}
