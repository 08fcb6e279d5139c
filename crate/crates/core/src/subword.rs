//! Byte-pair encoding with protected tokens and `@@` continuation markers.
//!
//! Words are split into characters followed by a separate end-of-word symbol, so a
//! merge never has to know whether its right side closes a word. The most frequent
//! adjacent pair is merged at each step; ties go to the lexicographically smallest
//! `(left, right)` pair.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::text_norm::TokenSentence;

pub const CONTINUATION: &str = "@@";
pub const END_OF_WORD: &str = "</w>";
const FILE_MAGIC: &str = "#bpe";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot learn BPE from an empty corpus")]
    EmptyCorpus,
    #[error("n_ops must be at least 1")]
    ZeroOps,
    #[error("final token `{0}` carries a continuation marker")]
    DanglingContinuation(String),
    #[error("bad BPE model file: {0}")]
    BadModel(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    pub n_ops: usize,
    pub protected: BTreeSet<String>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>, n_ops: usize, protected: BTreeSet<String>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Self { merges, ranks, n_ops, protected }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Writes the model file: a header line with version and requested operations,
    /// then one `left right` merge per line.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{FILE_MAGIC} v{FILE_VERSION} n_ops={}", self.n_ops)?;
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, protected: BTreeSet<String>) -> Result<Self, BpeError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| BpeError::BadModel("missing header".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(FILE_MAGIC) || parts.next() != Some("v1") {
            return Err(BpeError::BadModel(format!("unexpected header `{header}`")));
        }
        let n_ops = parts
            .next()
            .and_then(|p| p.strip_prefix("n_ops="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| BpeError::BadModel("missing n_ops".into()))?;
        let mut merges = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| BpeError::BadModel(format!("bad merge line `{line}`")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(Self::from_merges(merges, n_ops, protected))
    }

    /// Number of distinct symbols reachable: base characters plus one per merge.
    pub fn symbol_inventory(&self) -> BTreeSet<String> {
        let mut syms = BTreeSet::new();
        for (l, r) in &self.merges {
            syms.insert(format!("{l}{r}"));
        }
        syms
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    syms.push(END_OF_WORD.to_string());
    syms
}

/// Learns up to `n_ops` merges from word frequencies. Protected tokens are not counted.
pub fn bpe_learn(corpus: &[TokenSentence], n_ops: usize, protected: &BTreeSet<String>) -> Result<BpeModel, BpeError> {
    if n_ops == 0 {
        return Err(BpeError::ZeroOps);
    }
    let mut freqs: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in corpus.iter().flat_map(|s| s.tokens.iter()) {
        if !protected.contains(tok) {
            *freqs.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    if freqs.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> = freqs.into_iter().map(|(w, f)| (word_symbols(w), f)).collect();

    let mut merges = Vec::new();
    while merges.len() < n_ops {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += f;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else { break };
        let joined = format!("{left}{right}");
        for (syms, _) in &mut words {
            merge_in_place(syms, &left, &right, &joined);
        }
        merges.push((left, right));
    }
    Ok(BpeModel::from_merges(merges, n_ops, protected.clone()))
}

fn merge_in_place(syms: &mut Vec<String>, left: &str, right: &str, joined: &str) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(joined.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

impl BpeModel {
    /// Segments one word into pieces, replaying merges by rank.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        if self.protected.contains(word) {
            return vec![word.to_string()];
        }
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let joined = format!("{l}{r}");
            merge_in_place(&mut syms, l, r, &joined);
        }
        let mut pieces: Vec<String> = Vec::with_capacity(syms.len());
        let last = syms.len() - 1;
        for (i, s) in syms.into_iter().enumerate() {
            if i == last {
                let core = s.strip_suffix(END_OF_WORD).unwrap_or(&s);
                if !core.is_empty() {
                    pieces.push(core.to_string());
                }
            } else {
                pieces.push(s);
            }
        }
        let n = pieces.len();
        for p in &mut pieces[..n - 1] {
            p.push_str(CONTINUATION);
        }
        pieces
    }
}

pub fn bpe_apply(t: &TokenSentence, m: &BpeModel) -> TokenSentence {
    let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
    let mut out = Vec::with_capacity(t.tokens.len() * 2);
    for tok in &t.tokens {
        let pieces = cache.entry(tok.as_str()).or_insert_with(|| m.segment_word(tok));
        out.extend(pieces.iter().cloned());
    }
    TokenSentence { tokens: out, lang: t.lang }
}

/// Rejoins `@@`-suffixed pieces with their successors.
pub fn bpe_undo(t: &TokenSentence) -> Result<TokenSentence, BpeError> {
    let mut out = Vec::with_capacity(t.tokens.len());
    let mut acc = String::new();
    for tok in &t.tokens {
        match tok.strip_suffix(CONTINUATION) {
            Some(stem) => acc.push_str(stem),
            None => {
                acc.push_str(tok);
                out.push(std::mem::take(&mut acc));
            }
        }
    }
    if let Some(last) = t.tokens.last() {
        if last.ends_with(CONTINUATION) {
            return Err(BpeError::DanglingContinuation(last.clone()));
        }
    }
    Ok(TokenSentence { tokens: out, lang: t.lang })
}

/// Like [`bpe_undo`] but tolerates a trailing continuation, as produced by truncated
/// model output.
pub fn bpe_undo_lenient(t: &TokenSentence) -> TokenSentence {
    let mut toks = t.tokens.clone();
    if let Some(last) = toks.last_mut() {
        if let Some(stem) = last.strip_suffix(CONTINUATION) {
            *last = stem.to_string();
        }
    }
    bpe_undo(&TokenSentence { tokens: toks, lang: t.lang }).expect("trailing marker removed")
}

pub fn protected_set<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> BTreeSet<String> {
    tokens.into_iter().map(Into::into).collect()
}

/// Reserved tokens that every model protects: tags, case markers and `<unk>`.
pub fn default_protected() -> BTreeSet<String> {
    let mut set: BTreeSet<String> = crate::corpus::Origin::ALL.iter().map(|o| o.tag().to_string()).collect();
    set.extend(crate::corpus::Domain::ALL.iter().map(|d| d.tag().to_string()));
    set.insert(crate::text_norm::TITLE_MARKER.to_string());
    set.insert(crate::text_norm::UPPER_MARKER.to_string());
    set.insert(crate::augment::UNK.to_string());
    set
}

/// True if any merge rule mentions a protected token.
pub fn merges_touch_protected(m: &BpeModel) -> bool {
    let prot: HashSet<&str> = m.protected.iter().map(String::as_str).collect();
    m.merges.iter().any(|(l, r)| {
        prot.contains(l.as_str()) || prot.contains(r.as_str()) || prot.contains(format!("{l}{r}").as_str())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_norm::Lang;

    fn sent(words: &[&str]) -> TokenSentence {
        TokenSentence::new(words.iter().map(|s| s.to_string()).collect(), Lang::En)
    }

    fn low_lower() -> Vec<TokenSentence> {
        let mut c = vec![sent(&["low"]); 5];
        c.extend(vec![sent(&["lower"]); 2]);
        c
    }

    fn merges(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(l, r)| (l.to_string(), r.to_string())).collect()
    }

    #[test]
    fn learn_low_lower() {
        let m = bpe_learn(&low_lower(), 2, &BTreeSet::new()).unwrap();
        assert_eq!(m.merges(), merges(&[("l", "o"), ("lo", "w")]).as_slice());
    }

    #[test]
    fn learn_stops_when_pairs_run_out() {
        let m = bpe_learn(&low_lower(), 1000, &BTreeSet::new()).unwrap();
        assert!(m.merges().len() < 1000);
        let single = bpe_learn(&[sent(&["a", "b", "c"])], 10, &BTreeSet::new()).unwrap();
        // only (char, </w>) pairs exist, and they do get merged
        assert!(single.merges().iter().all(|(_, r)| r == END_OF_WORD));
    }

    #[test]
    fn learn_errors() {
        assert!(matches!(bpe_learn(&[], 3, &BTreeSet::new()), Err(BpeError::EmptyCorpus)));
        assert!(matches!(bpe_learn(&low_lower(), 0, &BTreeSet::new()), Err(BpeError::ZeroOps)));
    }

    #[test]
    fn apply_lower() {
        let m = BpeModel::from_merges(merges(&[("l", "o"), ("lo", "w")]), 2, BTreeSet::new());
        assert_eq!(bpe_apply(&sent(&["lower"]), &m).tokens, vec!["low@@", "e@@", "r"]);
        assert_eq!(bpe_apply(&sent(&["low"]), &m).tokens, vec!["low"]);
    }

    #[test]
    fn apply_protected_passthrough() {
        let m = bpe_learn(&[sent(&["_UU_", "now", "_UU_"])], 10, &default_protected()).unwrap();
        assert_eq!(bpe_apply(&sent(&["_UU_"]), &m).tokens, vec!["_UU_"]);
        assert!(!merges_touch_protected(&m));
    }

    #[test]
    fn undo_examples() {
        assert_eq!(bpe_undo(&sent(&["low@@", "e@@", "r"])).unwrap().tokens, vec!["lower"]);
        assert_eq!(bpe_undo(&sent(&["hello"])).unwrap().tokens, vec!["hello"]);
        assert!(matches!(bpe_undo(&sent(&["lo@@"])), Err(BpeError::DanglingContinuation(_))));
        assert_eq!(bpe_undo_lenient(&sent(&["a", "lo@@"])).tokens, vec!["a", "lo"]);
    }

    #[test]
    fn model_file_round_trip() {
        let m = bpe_learn(&low_lower(), 3, &BTreeSet::new()).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("#bpe v1 n_ops=3\n"));
        let back = BpeModel::read(buf.as_slice(), BTreeSet::new()).unwrap();
        assert_eq!(back, m);
    }
}
