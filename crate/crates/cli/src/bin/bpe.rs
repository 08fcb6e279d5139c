use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtforge_cli::{finish, read_sentences, read_text, reader, write_sentences, writer, Result};
use mtforge_core::subword::{bpe_apply, bpe_learn, bpe_undo, default_protected, merges_touch_protected, BpeModel};
use mtforge_core::text_norm::{Lang, TokenSentence};

/// Byte-pair encoding over whitespace-tokenized lines.
#[derive(Parser)]
#[command(name = "bpe", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Merge table (written by `learn`, read by `apply`).
    #[arg(long)]
    model: PathBuf,
    /// Extra tokens that are never split, one per line; tags and case markers are
    /// always protected.
    #[arg(long)]
    protected: Option<PathBuf>,
    #[arg(long, short)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Learn merge operations from a corpus and write them to --model
    Learn {
        #[command(flatten)]
        common: Common,
        /// Number of merge operations.
        #[arg(long, default_value_t = 1000)]
        ops: usize,
    },
    /// Split words into subword units with the merges in --model
    Apply {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Remove `@@ ` joins.
    Undo {
        #[arg(long, short)]
        input: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn protected(path: Option<&Path>) -> Result<BTreeSet<String>> {
    let mut set = default_protected();
    if let Some(p) = path {
        set.extend(read_text(Some(p))?.split_whitespace().map(str::to_string));
    }
    Ok(set)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Learn { common, ops } => {
            let corpus = read_sentences(common.input.as_deref(), Lang::En)?;
            let m = bpe_learn(&corpus, ops, &protected(common.protected.as_deref())?)?;
            debug_assert!(!merges_touch_protected(&m));
            let mut w = writer(Some(&common.model))?;
            m.write(&mut w)?;
            w.flush()?;
            eprintln!("bpe: learned {} merges", m.merges().len());
        }
        Cmd::Apply { common, output } => {
            let m = BpeModel::read(reader(Some(&common.model))?, protected(common.protected.as_deref())?)?;
            let out: Vec<TokenSentence> =
                read_sentences(common.input.as_deref(), Lang::En)?.iter().map(|s| bpe_apply(s, &m)).collect();
            write_sentences(output.as_deref(), &out)?;
        }
        Cmd::Undo { input, output } => {
            let out = read_sentences(input.as_deref(), Lang::En)?.iter().map(bpe_undo).collect::<std::result::Result<Vec<_>, _>>()?;
            write_sentences(output.as_deref(), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    finish("bpe", run(Cli::parse()))
}
