//! Punctuation normalization, tokenization, case marking and their inverses.
//!
//! The punctuation table lives in `data/punct_map.v1.tsv` and is compiled into the
//! binary. Case marking uses two reserved tokens, [`TITLE_MARKER`] and
//! [`UPPER_MARKER`], which the tokenizer can never emit for ordinary text because
//! underscores at word edges are always split off.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TITLE_MARKER: &str = "_U_";
pub const UPPER_MARKER: &str = "_UU_";

const PUNCT_TABLE: &str = include_str!("../data/punct_map.v1.tsv");
pub const PUNCT_TABLE_VERSION: u32 = 1;

/// Abbreviations whose trailing period stays attached during tokenization.
const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "etc.", "vs.", "dr.", "mr.", "mrs.", "ms.", "prof.", "fig.", "no.", "approx.",
    "al.", "inc.", "st.",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextNormError {
    #[error("input contains reserved case marker `{0}`")]
    InputContainsMarker(String),
    #[error("case marker at position {0} is not followed by a word")]
    DanglingMarker(usize),
    #[error("unknown language `{0}` (expected zh or en)")]
    UnknownLang(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Zh,
    En,
}

impl FromStr for Lang {
    type Err = TextNormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zh" => Ok(Lang::Zh),
            "en" => Ok(Lang::En),
            other => Err(TextNormError::UnknownLang(other.to_string())),
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::Zh => "zh",
            Lang::En => "en",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSentence {
    pub text: String,
    pub lang: Lang,
}

impl RawSentence {
    pub fn new(text: impl Into<String>, lang: Lang) -> Self {
        Self { text: text.into(), lang }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSentence {
    pub tokens: Vec<String>,
    pub lang: Lang,
}

impl TokenSentence {
    pub fn new(tokens: Vec<String>, lang: Lang) -> Self {
        Self { tokens, lang }
    }

    /// Splits on whitespace; used for already tokenized text.
    pub fn from_whitespace(text: &str, lang: Lang) -> Self {
        Self { tokens: text.split_whitespace().map(str::to_string).collect(), lang }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

fn punct_map() -> &'static HashMap<char, &'static str> {
    static MAP: OnceLock<HashMap<char, &'static str>> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut map = HashMap::new();
        for line in PUNCT_TABLE.lines() {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let (code, repl) = line.split_once('\t').expect("punct table line without tab");
            let cp = u32::from_str_radix(code, 16).expect("bad codepoint in punct table");
            let ch = char::from_u32(cp).expect("invalid codepoint in punct table");
            map.insert(ch, repl);
        }
        map
    })
}

/// Applies the punctuation table, collapses whitespace runs and trims.
pub fn normalize_punct(s: &RawSentence) -> RawSentence {
    let map = punct_map();
    let mut mapped = String::with_capacity(s.text.len());
    for ch in s.text.chars() {
        match map.get(&ch) {
            Some(repl) => mapped.push_str(repl),
            None if ch == '\n' || ch == '\r' => mapped.push(' '),
            None => mapped.push(ch),
        }
    }
    let mut out = String::with_capacity(mapped.len());
    for word in mapped.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    RawSentence { text: out, lang: s.lang }
}

/// Punctuation in the sense used by tokenization and language-id ratios.
pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || ('\u{2000}'..='\u{206F}').contains(&c)
        || ('\u{3000}'..='\u{303F}').contains(&c)
        || ('\u{FF01}'..='\u{FF0F}').contains(&c)
        || ('\u{FF1A}'..='\u{FF20}').contains(&c)
        || ('\u{FF3B}'..='\u{FF40}').contains(&c)
        || ('\u{FF5B}'..='\u{FF65}').contains(&c)
        || c == '\u{00AB}'
        || c == '\u{00BB}'
}

/// CJK Unified Ideographs, including extensions and compatibility ideographs.
pub fn is_han(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2EBEF
        | 0x30000..=0x3134F
        | 0xF900..=0xFAFF)
}

fn is_abbreviation(chunk: &str) -> bool {
    let lower = chunk.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Moses-like English tokenization: whitespace split, then leading and trailing
/// punctuation detached. Runs of `.` stay together as one token.
pub fn tokenize_en(s: &RawSentence) -> TokenSentence {
    let mut tokens = Vec::new();
    for chunk in s.text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        while start < chars.len() && is_punct(chars[start]) {
            start += 1;
        }
        let mut closer = chars.len();
        while closer > start && is_punct(chars[closer - 1]) && chars[closer - 1] != '.' {
            closer -= 1;
        }
        let core: String = chars[start..closer].iter().collect();
        if is_abbreviation(&core) {
            push_punct_run(&chars[..start], &mut tokens);
            tokens.push(core);
            push_punct_run(&chars[closer..], &mut tokens);
            continue;
        }
        let mut end = chars.len();
        while end > start && is_punct(chars[end - 1]) {
            end -= 1;
        }
        push_punct_run(&chars[..start], &mut tokens);
        if end > start {
            tokens.push(chars[start..end].iter().collect());
        }
        push_punct_run(&chars[end..], &mut tokens);
    }
    TokenSentence { tokens, lang: Lang::En }
}

fn push_punct_run(run: &[char], tokens: &mut Vec<String>) {
    let mut i = 0;
    while i < run.len() {
        if run[i] == '.' {
            let mut j = i;
            while j < run.len() && run[j] == '.' {
                j += 1;
            }
            tokens.push(run[i..j].iter().collect());
            i = j;
        } else {
            tokens.push(run[i].to_string());
            i += 1;
        }
    }
}

/// Greedy longest-match segmentation over a word lexicon. Characters covered by no
/// lexicon word become single-character tokens.
pub fn segment_zh(s: &RawSentence, lexicon: &Lexicon) -> TokenSentence {
    let chars: Vec<char> = s.text.chars().filter(|c| !c.is_whitespace()).collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let max = lexicon.max_chars.min(chars.len() - i);
        let mut taken = 1;
        for len in (2..=max).rev() {
            let cand: String = chars[i..i + len].iter().collect();
            if lexicon.words.contains(&cand) {
                taken = len;
                break;
            }
        }
        tokens.push(chars[i..i + taken].iter().collect());
        i += taken;
    }
    TokenSentence { tokens, lang: Lang::Zh }
}

/// A plain word list, one word per line in its file form.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    words: HashSet<String>,
    max_chars: usize,
}

impl Lexicon {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut lex = Lexicon::default();
        for w in words {
            lex.insert(w.into());
        }
        lex
    }

    pub fn insert(&mut self, word: String) {
        let word = word.trim().to_string();
        if word.is_empty() {
            return;
        }
        self.max_chars = self.max_chars.max(word.chars().count());
        self.words.insert(word);
    }

    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn is_case_marker(tok: &str) -> bool {
    tok == TITLE_MARKER || tok == UPPER_MARKER
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CaseClass {
    Lower,
    Title,
    Upper,
    Mixed,
}

fn classify(tok: &str) -> CaseClass {
    let cased: Vec<char> = tok.chars().filter(|c| c.is_uppercase() || c.is_lowercase()).collect();
    if cased.is_empty() || cased.iter().all(|c| c.is_lowercase()) {
        return CaseClass::Lower;
    }
    let first_char_upper = tok.chars().next().is_some_and(char::is_uppercase);
    let class = if cased.len() >= 2 && cased.iter().all(|c| c.is_uppercase()) {
        CaseClass::Upper
    } else if first_char_upper && cased[1..].iter().all(|c| c.is_lowercase()) {
        CaseClass::Title
    } else {
        CaseClass::Mixed
    };
    // Tokens whose case mapping is not exactly invertible stay untouched.
    let lowered = tok.to_lowercase();
    let restored = match class {
        CaseClass::Upper => lowered.to_uppercase(),
        CaseClass::Title => capitalize_first(&lowered),
        _ => return class,
    };
    if restored == tok {
        class
    } else {
        CaseClass::Mixed
    }
}

fn capitalize_first(tok: &str) -> String {
    let mut chars = tok.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Lowercases title-case and all-caps words, prefixing them with a case marker.
pub fn mark_case(t: &TokenSentence) -> Result<TokenSentence, TextNormError> {
    let mut out = Vec::with_capacity(t.tokens.len() + 4);
    for tok in &t.tokens {
        if is_case_marker(tok) {
            return Err(TextNormError::InputContainsMarker(tok.clone()));
        }
        match classify(tok) {
            CaseClass::Lower | CaseClass::Mixed => out.push(tok.clone()),
            CaseClass::Title => {
                out.push(TITLE_MARKER.to_string());
                out.push(tok.to_lowercase());
            }
            CaseClass::Upper => {
                out.push(UPPER_MARKER.to_string());
                out.push(tok.to_lowercase());
            }
        }
    }
    Ok(TokenSentence { tokens: out, lang: t.lang })
}

/// Inverse of [`mark_case`].
pub fn unmark_case(t: &TokenSentence) -> Result<TokenSentence, TextNormError> {
    let mut out = Vec::with_capacity(t.tokens.len());
    let mut iter = t.tokens.iter().enumerate();
    while let Some((i, tok)) = iter.next() {
        if !is_case_marker(tok) {
            out.push(tok.clone());
            continue;
        }
        let word = match iter.next() {
            Some((_, w)) if !is_case_marker(w) => w,
            _ => return Err(TextNormError::DanglingMarker(i)),
        };
        if tok == UPPER_MARKER {
            out.push(word.to_uppercase());
        } else {
            out.push(capitalize_first(word));
        }
    }
    Ok(TokenSentence { tokens: out, lang: t.lang })
}

/// Removes case markers and restores casing where possible, dropping dangling markers.
/// Used on model output, which is not guaranteed to be well formed.
pub fn unmark_case_lenient(t: &TokenSentence) -> TokenSentence {
    let mut out = Vec::with_capacity(t.tokens.len());
    let mut pending: Option<&str> = None;
    for tok in &t.tokens {
        if is_case_marker(tok) {
            pending = Some(tok);
            continue;
        }
        match pending.take() {
            Some(UPPER_MARKER) => out.push(tok.to_uppercase()),
            Some(_) => out.push(capitalize_first(tok)),
            None => out.push(tok.clone()),
        }
    }
    TokenSentence { tokens: out, lang: t.lang }
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | ";" | ":" | "?" | "!" | "%" | ")" | "]" | "}")
        || (!tok.is_empty() && tok.chars().all(|c| c == '.'))
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{" | "$" | "#")
}

/// Joins tokens with spaces, then removes the space before closing punctuation and
/// after opening punctuation. Straight quotes alternate between opening and closing.
pub fn detokenize_en(t: &TokenSentence) -> RawSentence {
    let mut out = String::new();
    let mut glue_next = false;
    let mut open_double = false;
    let mut open_single = false;
    for tok in &t.tokens {
        let (left, right) = match tok.as_str() {
            "\"" => {
                open_double = !open_double;
                (!open_double, open_double)
            }
            "'" => {
                open_single = !open_single;
                (!open_single, open_single)
            }
            s => (attaches_left(s), attaches_right(s)),
        };
        if !out.is_empty() && !glue_next && !left {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = right;
    }
    RawSentence { text: out, lang: Lang::En }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn en(s: &str) -> RawSentence {
        RawSentence::new(s, Lang::En)
    }

    fn toks(v: &[&str]) -> TokenSentence {
        TokenSentence::new(v.iter().map(|s| s.to_string()).collect(), Lang::En)
    }

    #[test]
    fn normalize_maps_quotes_and_fullwidth_comma() {
        let out = normalize_punct(&en("\u{201C}Hello\u{FF0C}world\u{201D}"));
        assert_eq!(out.text, "\"Hello,world\"");
        assert_eq!(normalize_punct(&en("abc")).text, "abc");
    }

    #[test]
    fn normalize_collapses_spaces_and_ellipsis() {
        let out = normalize_punct(&en("wait\u{2026}  and\u{3000}see "));
        assert_eq!(out.text, "wait... and see");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_en(&en("We are together NOW.")), toks(&["We", "are", "together", "NOW", "."]));
        assert_eq!(tokenize_en(&en("a")), toks(&["a"]));
        assert_eq!(tokenize_en(&en("3.5mg/kg, twice.")), toks(&["3.5mg/kg", ",", "twice", "."]));
        assert_eq!(tokenize_en(&en("anti-inflammatory (e.g. aspirin)")),
            toks(&["anti-inflammatory", "(", "e.g.", "aspirin", ")"]));
    }

    #[test]
    fn tokenizer_never_emits_markers() {
        let t = tokenize_en(&en("_U_ and _UU_"));
        assert!(t.tokens.iter().all(|t| !is_case_marker(t)));
    }

    #[test]
    fn segment_examples() {
        let lex = Lexicon::new(["今天", "天气"]);
        let out = segment_zh(&RawSentence::new("今天天气", Lang::Zh), &lex);
        assert_eq!(out.tokens, vec!["今天", "天气"]);
        let out = segment_zh(&RawSentence::new("天", Lang::Zh), &Lexicon::default());
        assert_eq!(out.tokens, vec!["天"]);
    }

    #[test]
    fn segment_prefers_longest_match() {
        let lex = Lexicon::new(["中国", "中国人", "人民"]);
        let out = segment_zh(&RawSentence::new("中国人民 好", Lang::Zh), &lex);
        assert_eq!(out.tokens, vec!["中国人", "民", "好"]);
    }

    #[test]
    fn mark_case_examples() {
        let out = mark_case(&toks(&["We", "are", "together", "NOW", "."])).unwrap();
        assert_eq!(out, toks(&["_U_", "we", "are", "together", "_UU_", "now", "."]));
        assert_eq!(mark_case(&toks(&["we", "are"])).unwrap(), toks(&["we", "are"]));
        assert_eq!(mark_case(&toks(&["iPhone"])).unwrap(), toks(&["iPhone"]));
        assert_eq!(mark_case(&toks(&["I"])).unwrap(), toks(&["_U_", "i"]));
        assert_eq!(mark_case(&toks(&["mRNA"])).unwrap(), toks(&["mRNA"]));
    }

    #[test]
    fn mark_case_rejects_markers() {
        assert_eq!(
            mark_case(&toks(&["a", "_UU_"])),
            Err(TextNormError::InputContainsMarker("_UU_".into()))
        );
    }

    #[test]
    fn unmark_examples_and_errors() {
        assert_eq!(unmark_case(&toks(&["_U_", "we", "_UU_", "now"])).unwrap(), toks(&["We", "NOW"]));
        assert_eq!(unmark_case(&toks(&["we"])).unwrap(), toks(&["we"]));
        assert_eq!(unmark_case(&toks(&["a", "_U_"])), Err(TextNormError::DanglingMarker(1)));
        assert_eq!(unmark_case(&toks(&["_U_", "_UU_", "a"])), Err(TextNormError::DanglingMarker(0)));
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(detokenize_en(&toks(&["We", "are", "here", "."])).text, "We are here.");
        assert_eq!(detokenize_en(&toks(&["hello"])).text, "hello");
        assert_eq!(
            detokenize_en(&toks(&["He", "said", "\"", "yes", "\"", "(", "twice", ")", "."])).text,
            "He said \"yes\" (twice)."
        );
    }

    #[test]
    fn detok_tok_round_trip_corpus() {
        let corpus = [
            "We are here.",
            "Dose: 3.5mg/kg, twice daily!",
            "He said \"yes\" (twice).",
            "Is it 50% or 60%?",
            "The anti-inflammatory drug (e.g. aspirin) works.",
            "Wait... what?",
            "Costs rose; see [1] and [2].",
            "She paid $5 for it.",
            "COVID-19 patients, aged 40-60, were enrolled.",
            "It is 'short' here.",
        ];
        for s in corpus {
            let back = detokenize_en(&tokenize_en(&en(s)));
            assert_eq!(back.text, s);
        }
    }
}
