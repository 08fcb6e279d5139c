//! Sentence pairs, provenance labels and TSV corpus I/O.
//!
//! Corpus files hold one pair per line: `src TAB tgt`, optionally followed by
//! `TAB origin TAB domain`. Both text columns are whitespace-tokenized.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text_norm::{Lang, TokenSentence};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected 2 or 4 tab-separated columns, found {found}")]
    Columns { line: usize, found: usize },
    #[error("line {line}: empty side")]
    EmptySide { line: usize },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Origin {
    Real,
    Bt,
    Ft,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    Bio,
    News,
    Inhouse,
}

impl Origin {
    pub const ALL: [Origin; 4] = [Origin::Real, Origin::Bt, Origin::Ft, Origin::Noise];

    pub fn tag(self) -> &'static str {
        match self {
            Origin::Real => "<REAL>",
            Origin::Bt => "<BT>",
            Origin::Ft => "<FT>",
            Origin::Noise => "<NOISE>",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.tag() == tag)
    }
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Bio, Domain::News, Domain::Inhouse];

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Bio => "<BIO>",
            Domain::News => "<NEWS>",
            Domain::Inhouse => "<INHOUSE>",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.tag() == tag)
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tag();
        f.write_str(&t[1..t.len() - 1])
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tag();
        f.write_str(&t[1..t.len() - 1])
    }
}

impl FromStr for Origin {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| CorpusError::UnknownLabel(s.to_string()))
    }
}

impl FromStr for Domain {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| CorpusError::UnknownLabel(s.to_string()))
    }
}

/// True for any origin or domain tag token.
pub fn is_tag(tok: &str) -> bool {
    Origin::from_tag(tok).is_some() || Domain::from_tag(tok).is_some()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub src: TokenSentence,
    pub tgt: TokenSentence,
    pub origin: Origin,
    pub domain: Domain,
}

impl SentencePair {
    pub fn new(src: Vec<String>, tgt: Vec<String>, origin: Origin, domain: Domain) -> Self {
        Self {
            src: TokenSentence::new(src, Lang::Zh),
            tgt: TokenSentence::new(tgt, Lang::En),
            origin,
            domain,
        }
    }

    /// Convenience constructor from whitespace-separated strings.
    pub fn from_text(src: &str, tgt: &str) -> Self {
        Self {
            src: TokenSentence::from_whitespace(src, Lang::Zh),
            tgt: TokenSentence::from_whitespace(tgt, Lang::En),
            origin: Origin::Real,
            domain: Domain::Bio,
        }
    }
}

/// Reads a TSV corpus. Two-column lines take `origin` and `domain` from the defaults.
pub fn read_tsv<R: BufRead>(reader: R, origin: Origin, domain: Domain) -> Result<Vec<SentencePair>, CorpusError> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (o, d) = match cols.len() {
            2 => (origin, domain),
            4 => (cols[2].parse()?, cols[3].parse()?),
            found => return Err(CorpusError::Columns { line: idx + 1, found }),
        };
        let src = TokenSentence::from_whitespace(cols[0], Lang::Zh);
        let tgt = TokenSentence::from_whitespace(cols[1], Lang::En);
        if src.is_empty() || tgt.is_empty() {
            return Err(CorpusError::EmptySide { line: idx + 1 });
        }
        pairs.push(SentencePair { src, tgt, origin: o, domain: d });
    }
    Ok(pairs)
}

/// Writes a TSV corpus; `with_labels` adds the origin and domain columns.
pub fn write_tsv<W: Write>(mut w: W, pairs: &[SentencePair], with_labels: bool) -> io::Result<()> {
    for p in pairs {
        if with_labels {
            writeln!(w, "{}\t{}\t{}\t{}", p.src.joined(), p.tgt.joined(), p.origin, p.domain)?;
        } else {
            writeln!(w, "{}\t{}", p.src.joined(), p.tgt.joined())?;
        }
    }
    Ok(())
}

/// Reads one whitespace-tokenized sentence per line.
pub fn read_lines<R: BufRead>(reader: R, lang: Lang) -> io::Result<Vec<TokenSentence>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        out.push(TokenSentence::from_whitespace(&line, lang));
    }
    Ok(out)
}

pub fn write_lines<W: Write>(mut w: W, sents: &[TokenSentence]) -> io::Result<()> {
    for s in sents {
        writeln!(w, "{}", s.joined())?;
    }
    Ok(())
}
