use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtforge_cli::{finish, read_text, writer, Result};
use mtforge_core::text_norm::{
    detokenize_en, mark_case, normalize_punct, segment_zh, tokenize_en, unmark_case, Lang, Lexicon, RawSentence,
    TokenSentence,
};

/// Line-oriented text normalization: one sentence per line in, one per line out.
#[derive(Parser)]
#[command(name = "textnorm", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[arg(long, global = true, default_value = "en")]
    lang: Lang,
    /// Word list for Chinese segmentation, one word per line.
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    #[arg(long, short, global = true)]
    input: Option<PathBuf>,
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Map full-width and typographic punctuation to ASCII forms.
    Normalize,
    /// Normalize, then split into tokens (English rules or lexicon segmentation).
    Tokenize,
    /// Lowercase tokens and insert case markers.
    MarkCase,
    /// Restore case from markers.
    UnmarkCase,
    /// Join tokens back into running text.
    Detok,
}

fn line(cmd: Cmd, lang: Lang, lex: &Lexicon, text: &str) -> Result<String> {
    let toks = || TokenSentence::from_whitespace(text, lang);
    Ok(match cmd {
        Cmd::Normalize => normalize_punct(&RawSentence::new(text, lang)).text,
        Cmd::Tokenize => {
            let raw = normalize_punct(&RawSentence::new(text, lang));
            match lang {
                Lang::En => tokenize_en(&raw),
                Lang::Zh => segment_zh(&raw, lex),
            }
            .joined()
        }
        Cmd::MarkCase => mark_case(&toks())?.joined(),
        Cmd::UnmarkCase => unmark_case(&toks())?.joined(),
        Cmd::Detok => match lang {
            Lang::En => detokenize_en(&toks()).text,
            Lang::Zh => toks().tokens.concat(),
        },
    })
}

fn run(cli: Cli) -> Result<()> {
    let lex = match &cli.lexicon {
        Some(p) => Lexicon::parse(&read_text(Some(p))?),
        None => Lexicon::default(),
    };
    let input = read_text(cli.input.as_deref())?;
    let mut out = writer(cli.output.as_deref())?;
    for text in input.lines() {
        writeln!(out, "{}", line(cli.cmd, cli.lang, &lex, text)?)?;
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    finish("textnorm", run(Cli::parse()))
}
