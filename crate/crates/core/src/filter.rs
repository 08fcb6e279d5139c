//! Bilingual corpus filtering: rule predicates, an IBM Model 1 alignment scorer and a
//! length-based sentence aligner.
//!
//! Rules run in a fixed order and each rejected pair is attributed to the first rule
//! that rejects it:
//!
//! 1. `identical`  source equals target
//! 2. `langid`     character-class language check
//! 3. `len_ratio`  token length ratio (symmetric)
//! 4. `length`     sentence length / word length limits
//! 5. `zh_in_en`   Han characters on the English side
//! 6. `align`      low Model 1 alignment score

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::corpus::SentencePair;
use crate::text_norm::{is_han, is_punct, RawSentence, TokenSentence};

pub const NULL_TOKEN: &str = "<NULL>";
const UNSEEN_PROB: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("cannot train an alignment model on an empty corpus")]
    EmptyCorpus,
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("drop fraction {0} outside [0, 1)")]
    BadFraction(f64),
    #[error("malformed alignment model line {0}")]
    BadModelLine(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop,
}

impl Verdict {
    fn drop_if(cond: bool) -> Self {
        if cond {
            Verdict::Drop
        } else {
            Verdict::Keep
        }
    }
}

pub fn filter_identical(p: &SentencePair) -> Verdict {
    Verdict::drop_if(p.src.tokens == p.tgt.tokens)
}

fn ratio_of<F: Fn(char) -> bool>(tokens: &[String], hit: F) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for c in tokens.iter().flat_map(|t| t.chars()) {
        if c.is_whitespace() || is_punct(c) {
            continue;
        }
        total += 1;
        if hit(c) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of non-punctuation source characters that are Han.
pub fn han_ratio(s: &TokenSentence) -> f64 {
    ratio_of(&s.tokens, is_han)
}

/// Fraction of non-punctuation target characters that are ASCII letters.
pub fn latin_ratio(s: &TokenSentence) -> f64 {
    ratio_of(&s.tokens, |c| c.is_ascii_alphabetic())
}

pub fn filter_langid(p: &SentencePair, min_ratio: f64) -> Verdict {
    Verdict::drop_if(han_ratio(&p.src) < min_ratio || latin_ratio(&p.tgt) < min_ratio)
}

/// Symmetric token length ratio check; an empty side is always dropped.
pub fn filter_len_ratio(p: &SentencePair, max_ratio: f64) -> Verdict {
    let (a, b) = (p.src.len(), p.tgt.len());
    if a == 0 || b == 0 {
        return Verdict::Drop;
    }
    let ratio = a.max(b) as f64 / a.min(b) as f64;
    Verdict::drop_if(ratio > max_ratio)
}

pub fn filter_length(p: &SentencePair, max_tokens: usize, max_word_chars: usize) -> Verdict {
    let too_long = |s: &TokenSentence| {
        s.len() > max_tokens || s.tokens.iter().any(|t| t.chars().count() > max_word_chars)
    };
    Verdict::drop_if(too_long(&p.src) || too_long(&p.tgt))
}

pub fn filter_zh_in_en(p: &SentencePair) -> Verdict {
    Verdict::drop_if(p.tgt.tokens.iter().flat_map(|t| t.chars()).any(is_han))
}

/// IBM Model 1 translation table `t(tgt | src)`, with a NULL source word at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Model1Table {
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
    src_index: HashMap<String, u32>,
    tgt_index: HashMap<String, u32>,
    t: HashMap<(u32, u32), f64>,
}

impl Model1Table {
    fn empty() -> Self {
        let mut m = Model1Table {
            src_vocab: Vec::new(),
            tgt_vocab: Vec::new(),
            src_index: HashMap::new(),
            tgt_index: HashMap::new(),
            t: HashMap::new(),
        };
        m.src_id_or_insert(NULL_TOKEN);
        m
    }

    fn src_id_or_insert(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.src_index.get(w) {
            return id;
        }
        let id = self.src_vocab.len() as u32;
        self.src_vocab.push(w.to_string());
        self.src_index.insert(w.to_string(), id);
        id
    }

    fn tgt_id_or_insert(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.tgt_index.get(w) {
            return id;
        }
        let id = self.tgt_vocab.len() as u32;
        self.tgt_vocab.push(w.to_string());
        self.tgt_index.insert(w.to_string(), id);
        id
    }

    /// `t(tgt | src)`; `None` for the NULL word is written as [`NULL_TOKEN`].
    pub fn prob(&self, src: &str, tgt: &str) -> f64 {
        match (self.src_index.get(src), self.tgt_index.get(tgt)) {
            (Some(&s), Some(&t)) => self.t.get(&(s, t)).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn src_vocab(&self) -> &[String] {
        &self.src_vocab
    }

    pub fn tgt_vocab(&self) -> &[String] {
        &self.tgt_vocab
    }

    /// Sum of `t(. | src)` for each source word, indexed like [`Self::src_vocab`].
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.src_vocab.len()];
        let mut keys: Vec<_> = self.t.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            sums[k.0 as usize] += self.t[&k];
        }
        sums
    }

    fn lookup(&self, s: Option<u32>, t: Option<u32>) -> f64 {
        match (s, t) {
            (Some(s), Some(t)) => self.t.get(&(s, t)).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# model1 v1")?;
        let mut keys: Vec<_> = self.t.keys().copied().collect();
        keys.sort_unstable();
        for (s, t) in keys {
            writeln!(
                w,
                "{}\t{}\t{:e}",
                self.src_vocab[s as usize], self.tgt_vocab[t as usize], self.t[&(s, t)]
            )?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, FilterError> {
        let mut m = Model1Table::empty();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(FilterError::BadModelLine(i + 1));
            }
            let p: f64 = cols[2].parse().map_err(|_| FilterError::BadModelLine(i + 1))?;
            let s = m.src_id_or_insert(cols[0]);
            let t = m.tgt_id_or_insert(cols[1]);
            m.t.insert((s, t), p);
        }
        Ok(m)
    }
}

/// Result of EM training: the table plus the corpus log-likelihood observed in each
/// iteration's E-step, followed by the likelihood of the final table.
#[derive(Debug, Clone)]
pub struct Model1Training {
    pub table: Model1Table,
    pub log_likelihoods: Vec<f64>,
}

fn corpus_ids(m: &mut Model1Table, corpus: &[SentencePair]) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus
        .iter()
        .map(|p| {
            let mut src = vec![0u32];
            src.extend(p.src.tokens.iter().map(|w| m.src_id_or_insert(w)));
            let tgt = p.tgt.tokens.iter().map(|w| m.tgt_id_or_insert(w)).collect();
            (src, tgt)
        })
        .collect()
}

fn log_likelihood(m: &Model1Table, ids: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    let mut ll = 0.0;
    for (src, tgt) in ids {
        let norm = src.len() as f64;
        for &f in tgt {
            let s: f64 = src.iter().map(|&e| m.t.get(&(e, f)).copied().unwrap_or(0.0)).sum();
            ll += (s / norm).ln();
        }
    }
    ll
}

/// IBM Model 1 EM with uniform initialization and a NULL source word.
pub fn train_model1(corpus: &[SentencePair], iterations: usize) -> Result<Model1Training, FilterError> {
    if corpus.is_empty() {
        return Err(FilterError::EmptyCorpus);
    }
    if iterations == 0 {
        return Err(FilterError::ZeroIterations);
    }
    let mut m = Model1Table::empty();
    let ids = corpus_ids(&mut m, corpus);
    let uniform = 1.0 / m.tgt_vocab.len() as f64;
    for (src, tgt) in &ids {
        for &e in src {
            for &f in tgt {
                m.t.insert((e, f), uniform);
            }
        }
    }

    let mut history = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        // Counts accumulate in corpus order so the result does not depend on hashing.
        let mut counts: HashMap<(u32, u32), f64> = HashMap::with_capacity(m.t.len());
        let mut totals = vec![0.0; m.src_vocab.len()];
        let mut ll = 0.0;
        for (src, tgt) in &ids {
            let norm = src.len() as f64;
            for &f in tgt {
                let z: f64 = src.iter().map(|&e| m.t[&(e, f)]).sum();
                ll += (z / norm).ln();
                for &e in src {
                    let c = m.t[&(e, f)] / z;
                    *counts.entry((e, f)).or_insert(0.0) += c;
                    totals[e as usize] += c;
                }
            }
        }
        if let Some(&prev) = history.last() {
            debug_assert!(ll >= prev - 1e-9, "Model 1 likelihood decreased: {prev} -> {ll}");
        }
        history.push(ll);
        for (k, c) in counts {
            m.t.insert(k, c / totals[k.0 as usize]);
        }
    }
    history.push(log_likelihood(&m, &ids));
    Ok(Model1Training { table: m, log_likelihoods: history })
}

/// Length-normalized `log P(tgt | src)` under Model 1: the mean over target tokens of
/// the log of the mean translation probability over source words plus NULL.
pub fn align_score(p: &SentencePair, m: &Model1Table) -> f64 {
    if p.tgt.is_empty() {
        return 0.0;
    }
    let mut src: Vec<Option<u32>> = vec![Some(0)];
    src.extend(p.src.tokens.iter().map(|w| m.src_index.get(w).copied()));
    let norm = src.len() as f64;
    let mut total = 0.0;
    for w in &p.tgt.tokens {
        let f = m.tgt_index.get(w).copied();
        let s: f64 = src.iter().map(|&e| m.lookup(e, f)).sum();
        total += (s / norm).max(UNSEEN_PROB).ln();
    }
    total / p.tgt.len() as f64
}

/// Indices of the `floor(n * fraction)` lowest-scoring items. Among equal scores the
/// later items are dropped first.
pub fn lowest_fraction(scores: &[f64], fraction: f64) -> Result<Vec<usize>, FilterError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(FilterError::BadFraction(fraction));
    }
    let n_drop = (scores.len() as f64 * fraction).floor() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut dropped: Vec<usize> = order.into_iter().take(n_drop).collect();
    dropped.sort_unstable();
    Ok(dropped)
}

/// Drops the lowest-scoring `drop_fraction` of pairs; returns `(kept, dropped)` in input order.
pub fn filter_by_align(
    corpus: &[SentencePair],
    m: &Model1Table,
    drop_fraction: f64,
) -> Result<(Vec<SentencePair>, Vec<SentencePair>), FilterError> {
    let scores: Vec<f64> = corpus.iter().map(|p| align_score(p, m)).collect();
    let dropped = lowest_fraction(&scores, drop_fraction)?;
    let mut flags = vec![false; corpus.len()];
    for i in dropped {
        flags[i] = true;
    }
    let (mut kept, mut gone) = (Vec::new(), Vec::new());
    for (p, drop) in corpus.iter().zip(flags) {
        if drop {
            gone.push(p.clone());
        } else {
            kept.push(p.clone());
        }
    }
    Ok((kept, gone))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignCut {
    /// Drop this fraction of the lowest-scoring pairs.
    DropFraction(f64),
    /// Drop pairs scoring strictly below this value.
    MinScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignRule {
    pub cut: AlignCut,
    #[serde(default = "default_em_iterations")]
    pub iterations: usize,
}

fn default_em_iterations() -> usize {
    5
}

/// Rule configuration; `None` disables a rule. Serialized as the `--rules` JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub identical: bool,
    pub langid_min_ratio: Option<f64>,
    pub max_len_ratio: Option<f64>,
    pub max_tokens: Option<usize>,
    pub max_word_chars: Option<usize>,
    pub zh_in_en: bool,
    pub align: Option<AlignRule>,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            identical: true,
            langid_min_ratio: Some(0.3),
            max_len_ratio: Some(3.0),
            max_tokens: Some(150),
            max_word_chars: Some(40),
            zh_in_en: true,
            align: Some(AlignRule { cut: AlignCut::DropFraction(0.05), iterations: 5 }),
        }
    }
}

impl FilterRules {
    pub fn without_align(mut self) -> Self {
        self.align = None;
        self
    }
}

pub const RULE_NAMES: [&str; 6] = ["identical", "langid", "len_ratio", "length", "zh_in_en", "align"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub drops: BTreeMap<String, usize>,
    pub kept: usize,
    pub total: usize,
}

impl FilterReport {
    fn new(total: usize) -> Self {
        let drops = RULE_NAMES.iter().map(|r| (r.to_string(), 0)).collect();
        Self { drops, kept: 0, total }
    }

    pub fn dropped(&self) -> usize {
        self.drops.values().sum()
    }
}

/// Name of the first predicate rule that rejects `p`, if any.
pub fn first_failing_rule(p: &SentencePair, rules: &FilterRules) -> Option<&'static str> {
    if rules.identical && filter_identical(p) == Verdict::Drop {
        return Some("identical");
    }
    if let Some(r) = rules.langid_min_ratio {
        if filter_langid(p, r) == Verdict::Drop {
            return Some("langid");
        }
    }
    if let Some(r) = rules.max_len_ratio {
        if filter_len_ratio(p, r) == Verdict::Drop {
            return Some("len_ratio");
        }
    }
    if rules.max_tokens.is_some() || rules.max_word_chars.is_some() {
        let mt = rules.max_tokens.unwrap_or(usize::MAX);
        let mw = rules.max_word_chars.unwrap_or(usize::MAX);
        if filter_length(p, mt, mw) == Verdict::Drop {
            return Some("length");
        }
    }
    if rules.zh_in_en && filter_zh_in_en(p) == Verdict::Drop {
        return Some("zh_in_en");
    }
    None
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<SentencePair>,
    pub report: FilterReport,
    /// The alignment model used by the `align` rule, trained on the rule survivors
    /// when none was supplied.
    pub align_model: Option<Model1Table>,
}

/// Applies every enabled rule in order. With the `align` rule enabled and no model
/// supplied, a Model 1 table is trained on the pairs that survive the predicate rules.
pub fn run_filters(
    corpus: &[SentencePair],
    rules: &FilterRules,
    align_model: Option<&Model1Table>,
) -> Result<FilterOutcome, FilterError> {
    let mut report = FilterReport::new(corpus.len());
    let mut survivors = Vec::with_capacity(corpus.len());
    for p in corpus {
        match first_failing_rule(p, rules) {
            Some(rule) => *report.drops.get_mut(rule).expect("known rule") += 1,
            None => survivors.push(p.clone()),
        }
    }

    let mut used_model = None;
    if let (Some(rule), false) = (rules.align, survivors.is_empty()) {
        let model = match align_model {
            Some(m) => m.clone(),
            None => train_model1(&survivors, rule.iterations)?.table,
        };
        let kept = match rule.cut {
            AlignCut::DropFraction(f) => filter_by_align(&survivors, &model, f)?.0,
            AlignCut::MinScore(min) => {
                survivors.iter().filter(|p| align_score(p, &model) >= min).cloned().collect()
            }
        };
        *report.drops.get_mut("align").expect("known rule") += survivors.len() - kept.len();
        survivors = kept;
        used_model = Some(model);
    }
    report.kept = survivors.len();
    Ok(FilterOutcome { kept: survivors, report, align_model: used_model })
}

/// Alignment bead shapes considered by the length-based aligner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeadKind {
    OneOne,
    OneZero,
    ZeroOne,
    TwoOne,
    OneTwo,
}

impl BeadKind {
    fn consumed(self) -> (usize, usize) {
        match self {
            BeadKind::OneOne => (1, 1),
            BeadKind::OneZero => (1, 0),
            BeadKind::ZeroOne => (0, 1),
            BeadKind::TwoOne => (2, 1),
            BeadKind::OneTwo => (1, 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bead {
    pub kind: BeadKind,
    pub src_start: usize,
    pub tgt_start: usize,
}

/// Gale-Church length model constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthModel {
    /// Expected target characters per source character.
    pub c: f64,
    /// Variance of the length difference per source character.
    pub s2: f64,
    pub p_one_one: f64,
    pub p_one_zero: f64,
    pub p_two_one: f64,
}

impl Default for LengthModel {
    fn default() -> Self {
        Self { c: 1.0, s2: 6.8, p_one_one: 0.89, p_one_zero: 0.0099 / 2.0, p_two_one: 0.089 / 2.0 }
    }
}

impl LengthModel {
    fn prior(&self, kind: BeadKind) -> f64 {
        match kind {
            BeadKind::OneOne => self.p_one_one,
            BeadKind::OneZero | BeadKind::ZeroOne => self.p_one_zero,
            BeadKind::TwoOne | BeadKind::OneTwo => self.p_two_one,
        }
    }

    /// `-ln P(match | delta)` with `P = 2 (1 - Phi(|delta|))`.
    pub fn match_cost(&self, src_len: usize, tgt_len: usize) -> f64 {
        if src_len == 0 && tgt_len == 0 {
            return 0.0;
        }
        let (l1, l2) = (src_len as f64, tgt_len as f64);
        let mean = (l1 + l2 / self.c) / 2.0;
        let delta = (l2 - l1 * self.c) / (mean * self.s2).sqrt();
        let p = erfc(delta.abs() / std::f64::consts::SQRT_2).max(1e-300);
        -p.ln()
    }

    pub fn bead_cost(&self, kind: BeadKind, src_len: usize, tgt_len: usize) -> f64 {
        -self.prior(kind).ln() + self.match_cost(src_len, tgt_len)
    }
}

fn char_len(s: &RawSentence) -> usize {
    s.text.chars().filter(|c| !c.is_whitespace()).count()
}

/// Minimum-cost bead sequence covering both documents.
pub fn align_beads(src_doc: &[RawSentence], tgt_doc: &[RawSentence], model: &LengthModel) -> Vec<Bead> {
    let (n, m) = (src_doc.len(), tgt_doc.len());
    let sl: Vec<usize> = src_doc.iter().map(char_len).collect();
    let tl: Vec<usize> = tgt_doc.iter().map(char_len).collect();
    let kinds = [BeadKind::OneOne, BeadKind::OneZero, BeadKind::ZeroOne, BeadKind::TwoOne, BeadKind::OneTwo];
    let mut cost = vec![vec![f64::INFINITY; m + 1]; n + 1];
    let mut back: Vec<Vec<Option<BeadKind>>> = vec![vec![None; m + 1]; n + 1];
    cost[0][0] = 0.0;
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            for kind in kinds {
                let (di, dj) = kind.consumed();
                if di > i || dj > j || !cost[i - di][j - dj].is_finite() {
                    continue;
                }
                let ls: usize = sl[i - di..i].iter().sum();
                let lt: usize = tl[j - dj..j].iter().sum();
                let c = cost[i - di][j - dj] + model.bead_cost(kind, ls, lt);
                if c < cost[i][j] {
                    cost[i][j] = c;
                    back[i][j] = Some(kind);
                }
            }
        }
    }
    let mut beads = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let kind = back[i][j].expect("every cell is reachable");
        let (di, dj) = kind.consumed();
        i -= di;
        j -= dj;
        beads.push(Bead { kind, src_start: i, tgt_start: j });
    }
    beads.reverse();
    beads
}

/// Aligns two documents and returns the 1-1 beads as whitespace-tokenized pairs.
pub fn sentence_align(src_doc: &[RawSentence], tgt_doc: &[RawSentence], model: &LengthModel) -> Vec<SentencePair> {
    align_beads(src_doc, tgt_doc, model)
        .into_iter()
        .filter(|b| b.kind == BeadKind::OneOne)
        .map(|b| {
            let s = &src_doc[b.src_start];
            let t = &tgt_doc[b.tgt_start];
            SentencePair {
                src: TokenSentence::from_whitespace(&s.text, s.lang),
                tgt: TokenSentence::from_whitespace(&t.text, t.lang),
                origin: crate::corpus::Origin::Real,
                domain: crate::corpus::Domain::Bio,
            }
        })
        .collect()
}
