//! Synthetic data: noise injection, origin/domain tags, back- and forward-translation,
//! distillation and iterated back-translation.
//!
//! Every generator is a pure function of its inputs and seed. Sentence `i` draws from
//! its own RNG seeded with `item_seed(seed, i)`, so the parallel paths produce exactly
//! the sequential output.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_tag, Domain, Origin, SentencePair};
use crate::digest::{item_seed, pairs_digest};
use crate::model::{Example, ModelError, Strategy, Translator, Vocab, UNK_ID};
use crate::text_norm::{is_case_marker, Lang, TokenSentence};

pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("sentence already starts with tag `{0}`")]
    AlreadyTagged(String),
    #[error("need {needed} monolingual sentences for the requested shards, have {available}")]
    InsufficientMono { needed: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Tokens that noise never touches: origin/domain tags and case markers.
pub fn is_protected(tok: &str) -> bool {
    is_tag(tok) || is_case_marker(tok)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub unk_rate: f64,
    pub delete_rate: f64,
    pub swap_rate: f64,
    pub swap_window: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { unk_rate: 0.1, delete_rate: 0.1, swap_rate: 0.1, swap_window: 3, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, r) in [("unk_rate", self.unk_rate), ("delete_rate", self.delete_rate), ("swap_rate", self.swap_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(AugmentError::InvalidSpec(format!("{name} = {r} is not a probability")));
            }
        }
        if self.swap_window == 0 {
            return Err(AugmentError::InvalidSpec("swap_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Replaces each unprotected token by `<unk>` with probability `rate`.
pub fn noise_unk<R: Rng + ?Sized>(t: &TokenSentence, rate: f64, rng: &mut R) -> TokenSentence {
    let tokens = t
        .tokens
        .iter()
        .map(|tok| if !is_protected(tok) && rng.gen::<f64>() < rate { UNK.to_string() } else { tok.clone() })
        .collect();
    TokenSentence::new(tokens, t.lang)
}

/// Drops each unprotected token with probability `rate`. If every unprotected token
/// would go, one of them, chosen uniformly, survives.
pub fn noise_delete<R: Rng + ?Sized>(t: &TokenSentence, rate: f64, rng: &mut R) -> TokenSentence {
    let keep: Vec<bool> = t.tokens.iter().map(|tok| is_protected(tok) || rng.gen::<f64>() >= rate).collect();
    let free: Vec<usize> = (0..t.len()).filter(|&i| !is_protected(&t.tokens[i])).collect();
    let mut keep = keep;
    if !free.is_empty() && free.iter().all(|&i| !keep[i]) {
        keep[free[rng.gen_range(0..free.len())]] = true;
    }
    let tokens = t.tokens.iter().zip(&keep).filter(|(_, &k)| k).map(|(tok, _)| tok.clone()).collect();
    TokenSentence::new(tokens, t.lang)
}

/// One left-to-right pass over the unprotected tokens: position `i` is swapped, with
/// probability `rate`, with a uniform position in `[i + 1, min(i + window, n - 1)]`.
/// Protected tokens keep their positions.
pub fn noise_swap<R: Rng + ?Sized>(t: &TokenSentence, rate: f64, window: usize, rng: &mut R) -> TokenSentence {
    let slots: Vec<usize> = (0..t.len()).filter(|&i| !is_protected(&t.tokens[i])).collect();
    let mut free: Vec<String> = slots.iter().map(|&i| t.tokens[i].clone()).collect();
    let n = free.len();
    for i in 0..n {
        let hi = (i + window).min(n.saturating_sub(1));
        if hi > i && rng.gen::<f64>() < rate {
            let j = rng.gen_range(i + 1..=hi);
            free.swap(i, j);
        }
    }
    let mut tokens = t.tokens.clone();
    for (slot, tok) in slots.into_iter().zip(free) {
        tokens[slot] = tok;
    }
    TokenSentence::new(tokens, t.lang)
}

/// Unk replacement, then deletion, then swapping, all driven by `spec.seed`.
pub fn apply_noise(t: &TokenSentence, spec: &NoiseSpec) -> TokenSentence {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = noise_unk(t, spec.unk_rate, &mut rng);
    let t = noise_delete(&t, spec.delete_rate, &mut rng);
    noise_swap(&t, spec.swap_rate, spec.swap_window, &mut rng)
}

/// Decoder-input corruption for target-side denoising: the teacher-forced target is
/// noised per example and padded back to its length with `<unk>` ids.
pub fn target_noise(tgt_vocab: Vocab, spec: NoiseSpec) -> impl Fn(&Example, u64) -> Vec<usize> + Sync {
    move |ex, seed| {
        let toks = TokenSentence::new(tgt_vocab.decode(&ex.dec_in), Lang::En);
        let mut ids = tgt_vocab.encode(&apply_noise(&toks, &spec.with_seed(seed)).tokens);
        ids.resize(ex.dec_in.len(), UNK_ID);
        ids
    }
}

/// Noised copies of a random `fraction` of `pairs` (source side noised, origin NOISE).
pub fn noised_copies(pairs: &[SentencePair], spec: &NoiseSpec, fraction: f64) -> Vec<SentencePair> {
    pairs
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let s = item_seed(spec.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            if rng.gen::<f64>() >= fraction {
                return None;
            }
            let src = apply_noise(&p.src, &spec.with_seed(rng.gen()));
            Some(SentencePair { src, tgt: p.tgt.clone(), origin: Origin::Noise, domain: p.domain })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TagSpec {
    pub origin: Origin,
    pub domain: Domain,
}

impl TagSpec {
    pub fn of(p: &SentencePair) -> Self {
        Self { origin: p.origin, domain: p.domain }
    }
}

/// Prefixes `[origin, domain]` tags.
pub fn tag_sentence(t: &TokenSentence, tags: TagSpec) -> Result<TokenSentence, AugmentError> {
    if let Some(first) = t.tokens.first().filter(|tok| is_tag(tok)) {
        return Err(AugmentError::AlreadyTagged(first.clone()));
    }
    let mut tokens = Vec::with_capacity(t.len() + 2);
    tokens.push(tags.origin.tag().to_string());
    tokens.push(tags.domain.tag().to_string());
    tokens.extend(t.tokens.iter().cloned());
    Ok(TokenSentence::new(tokens, t.lang))
}

/// Removes a leading `[origin, domain]` tag pair if present.
pub fn strip_tags(t: &TokenSentence) -> (Option<TagSpec>, TokenSentence) {
    if t.len() >= 2 {
        if let (Some(origin), Some(domain)) = (Origin::from_tag(&t.tokens[0]), Domain::from_tag(&t.tokens[1])) {
            return (Some(TagSpec { origin, domain }), TokenSentence::new(t.tokens[2..].to_vec(), t.lang));
        }
    }
    (None, t.clone())
}

/// Source side of a pair with its own labels as tags.
pub fn tagged_source(p: &SentencePair) -> Result<TokenSentence, AugmentError> {
    tag_sentence(&p.src, TagSpec::of(p))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    /// Pair indices whose source tags disagree with their labels or that carry tags
    /// anywhere but the first two positions.
    pub mismatches: Vec<usize>,
    pub untagged: usize,
    pub counts: BTreeMap<String, usize>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Checks tag/label consistency over a (possibly merged) corpus.
pub fn audit(pairs: &[SentencePair]) -> AuditReport {
    let mut rep = AuditReport { checked: pairs.len(), ..Default::default() };
    for (i, p) in pairs.iter().enumerate() {
        *rep.counts.entry(p.origin.tag().to_string()).or_insert(0) += 1;
        let (tags, rest) = strip_tags(&p.src);
        let stray = rest.tokens.iter().any(|t| is_tag(t)) || p.tgt.tokens.iter().any(|t| is_tag(t));
        match tags {
            None if stray => rep.mismatches.push(i),
            None => rep.untagged += 1,
            Some(t) if t != TagSpec::of(p) || stray => rep.mismatches.push(i),
            Some(_) => {}
        }
    }
    rep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SamplingMode {
    Beam,
    Topp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    pub mode: SamplingMode,
    pub beam_size: usize,
    pub p_low: f64,
    pub p_high: f64,
    pub seed: u64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { mode: SamplingMode::Beam, beam_size: 4, p_low: 0.9, p_high: 0.95, seed: 0 }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.beam_size == 0 {
            return Err(AugmentError::InvalidSpec("beam_size must be at least 1".into()));
        }
        if !(self.p_low > 0.0 && self.p_low <= self.p_high && self.p_high <= 1.0) {
            return Err(AugmentError::InvalidSpec(format!("need 0 < p_low <= p_high <= 1, got {} and {}", self.p_low, self.p_high)));
        }
        Ok(())
    }

    /// Strategy for one sentence; in top-p mode `p` is drawn uniformly from
    /// `[p_low, p_high]`.
    pub fn strategy<R: Rng + ?Sized>(&self, rng: &mut R) -> Strategy {
        match self.mode {
            SamplingMode::Beam => Strategy::beam(self.beam_size),
            SamplingMode::Topp if self.p_low == self.p_high => Strategy::TopP { p: self.p_low },
            SamplingMode::Topp => Strategy::TopP { p: rng.gen_range(self.p_low..=self.p_high) },
        }
    }
}

/// Translates every sentence with a per-sentence RNG. Empty outputs are `None`.
fn translate_all(
    model: &dyn Translator,
    inputs: &[TokenSentence],
    sampling: &SamplingSpec,
) -> Result<Vec<Option<Vec<String>>>, AugmentError> {
    sampling.validate()?;
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(sampling.seed, i as u64));
            let strategy = sampling.strategy(&mut rng);
            let out = model.translate(&s.tokens, strategy, &mut rng)?;
            Ok(if out.is_empty() { None } else { Some(out) })
        })
        .collect()
}

/// Synthesizes sources for target-side monolingual text with a reverse model. Sentences
/// whose translation comes out empty are skipped.
pub fn back_translate(
    mono_tgt: &[TokenSentence],
    model_rev: &dyn Translator,
    sampling: &SamplingSpec,
    domain: Domain,
) -> Result<Vec<SentencePair>, AugmentError> {
    let outs = translate_all(model_rev, mono_tgt, sampling)?;
    Ok(mono_tgt
        .iter()
        .zip(outs)
        .filter_map(|(t, s)| s.map(|src| SentencePair::new(src, t.tokens.clone(), Origin::Bt, domain)))
        .collect())
}

/// Synthesizes targets for source-side monolingual text with (usually) an ensemble.
pub fn forward_translate(
    mono_src: &[TokenSentence],
    model: &dyn Translator,
    sampling: &SamplingSpec,
    domain: Domain,
) -> Result<Vec<SentencePair>, AugmentError> {
    let outs = translate_all(model, mono_src, sampling)?;
    Ok(mono_src
        .iter()
        .zip(outs)
        .filter_map(|(s, t)| t.map(|tgt| SentencePair::new(s.tokens.clone(), tgt, Origin::Ft, domain)))
        .collect())
}

/// Replaces every target with the teacher's translation of the source. Labels are
/// kept; pairs the teacher leaves empty keep their original target.
pub fn distill(bitext: &[SentencePair], teacher: &dyn Translator, sampling: &SamplingSpec) -> Result<Vec<SentencePair>, AugmentError> {
    let srcs: Vec<TokenSentence> = bitext.iter().map(|p| p.src.clone()).collect();
    let outs = translate_all(teacher, &srcs, sampling)?;
    Ok(bitext
        .iter()
        .zip(outs)
        .map(|(p, t)| {
            let mut q = p.clone();
            if let Some(tgt) = t {
                q.tgt = TokenSentence::new(tgt, Lang::En);
            }
            q
        })
        .collect())
}

/// Record of one augmentation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub operation: String,
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub strategy: serde_json::Value,
    pub output_count: usize,
    pub output_digest: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl AugmentManifest {
    pub fn new<S: Serialize>(operation: &str, seed: u64, strategy: &S, output: &[SentencePair]) -> Self {
        Self {
            operation: operation.to_string(),
            inputs: BTreeMap::new(),
            seed,
            strategy: serde_json::to_value(strategy).unwrap_or(serde_json::Value::Null),
            output_count: output.len(),
            output_digest: pairs_digest(output),
            metadata: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: &str, digest: String) -> Self {
        self.inputs.insert(name.to_string(), digest);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiBtConfig {
    pub rounds: usize,
    /// Monolingual sentences consumed per round.
    pub shard_size: usize,
    pub beam_size: usize,
    pub p_low: f64,
    pub p_high: f64,
    pub seed: u64,
    pub domain: Domain,
}

impl Default for MultiBtConfig {
    fn default() -> Self {
        Self { rounds: 2, shard_size: 100, beam_size: 4, p_low: 0.9, p_high: 0.95, seed: 0, domain: Domain::Bio }
    }
}

impl MultiBtConfig {
    /// Beam search on even rounds, top-p sampling on odd ones.
    pub fn sampling(&self, round: usize) -> SamplingSpec {
        SamplingSpec {
            mode: if round % 2 == 0 { SamplingMode::Beam } else { SamplingMode::Topp },
            beam_size: self.beam_size,
            p_low: self.p_low,
            p_high: self.p_high,
            seed: item_seed(self.seed, round as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub round: usize,
    pub shard: (usize, usize),
    pub sampling: SamplingSpec,
    pub corpus_in_digest: String,
    pub bt_count: usize,
    pub ft_count: usize,
    pub output_digest: String,
}

/// Supplies freshly trained models for each round of iterated back-translation.
pub trait RoundTrainer {
    /// A target-to-source model trained on `corpus` (given in forward orientation).
    fn reverse(&mut self, corpus: &[SentencePair], round: usize) -> Result<Box<dyn Translator>, AugmentError>;
    /// A source-to-target model trained on `corpus`.
    fn forward(&mut self, corpus: &[SentencePair], round: usize) -> Result<Box<dyn Translator>, AugmentError>;
}

/// Iterated back-translation. Round `r` trains models on the corpus so far, translates
/// the `r`-th disjoint shard of the monolingual data and appends the pseudo pairs.
/// Source-side monolingual data, when given, is forward-translated the same way.
pub fn iterate_bt(
    bitext: &[SentencePair],
    mono_src: Option<&[TokenSentence]>,
    mono_tgt: &[TokenSentence],
    cfg: &MultiBtConfig,
    trainer: &mut dyn RoundTrainer,
) -> Result<(Vec<SentencePair>, Vec<RoundManifest>), AugmentError> {
    if cfg.rounds == 0 || cfg.shard_size == 0 {
        return Err(AugmentError::InvalidSpec("rounds and shard_size must be positive".into()));
    }
    let needed = cfg.rounds * cfg.shard_size;
    let available = mono_tgt.len().min(mono_src.map_or(usize::MAX, <[_]>::len));
    if needed > available {
        return Err(AugmentError::InsufficientMono { needed, available });
    }
    let mut corpus = bitext.to_vec();
    let mut manifests = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let shard = (round * cfg.shard_size, (round + 1) * cfg.shard_size);
        let sampling = cfg.sampling(round);
        let corpus_in_digest = pairs_digest(&corpus);
        let reverse = trainer.reverse(&corpus, round)?;
        let bt = back_translate(&mono_tgt[shard.0..shard.1], reverse.as_ref(), &sampling, cfg.domain)?;
        let ft = match mono_src {
            Some(src) => {
                let forward = trainer.forward(&corpus, round)?;
                forward_translate(&src[shard.0..shard.1], forward.as_ref(), &sampling, cfg.domain)?
            }
            None => Vec::new(),
        };
        let (bt_count, ft_count) = (bt.len(), ft.len());
        corpus.extend(bt);
        corpus.extend(ft);
        manifests.push(RoundManifest {
            round,
            shard,
            sampling,
            corpus_in_digest,
            bt_count,
            ft_count,
            output_digest: pairs_digest(&corpus),
        });
    }
    Ok((corpus, manifests))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(s: &str) -> TokenSentence {
        TokenSentence::from_whitespace(s, Lang::En)
    }

    #[test]
    fn unk_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(noise_unk(&sent("a b"), 0.0, &mut rng), sent("a b"));
        assert_eq!(noise_unk(&sent("a b"), 1.0, &mut rng), sent("<unk> <unk>"));
        assert_eq!(noise_unk(&sent("<BT> <BIO> _U_ a"), 1.0, &mut rng), sent("<BT> <BIO> _U_ <unk>"));
    }

    #[test]
    fn unk_rate_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = TokenSentence::new(vec!["x".to_string(); 10_000], Lang::En);
        let out = noise_unk(&t, 0.5, &mut rng);
        let frac = out.tokens.iter().filter(|t| *t == UNK).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn delete_keeps_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(noise_delete(&sent("a b c"), 1.0, &mut rng).len(), 1);
        assert_eq!(noise_delete(&sent("a b c"), 0.0, &mut rng), sent("a b c"));
        let out = noise_delete(&sent("<FT> <NEWS> a b c"), 1.0, &mut rng);
        assert_eq!(out.len(), 3);
        assert_eq!(&out.tokens[..2], &["<FT>", "<NEWS>"]);
    }

    #[test]
    fn forced_adjacent_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(noise_swap(&sent("a b"), 1.0, 1, &mut rng), sent("b a"));
        assert_eq!(noise_swap(&sent("<BT> <BIO> a b"), 1.0, 1, &mut rng), sent("<BT> <BIO> b a"));
        assert_eq!(noise_swap(&sent("a b c"), 0.0, 3, &mut rng), sent("a b c"));
    }

    #[test]
    fn apply_noise_is_deterministic() {
        let spec = NoiseSpec { seed: 11, unk_rate: 0.3, delete_rate: 0.3, swap_rate: 0.5, swap_window: 2 };
        let s = sent("one two three four five six seven");
        assert_eq!(apply_noise(&s, &spec), apply_noise(&s, &spec));
        let zero = NoiseSpec { unk_rate: 0.0, delete_rate: 0.0, swap_rate: 0.0, ..spec };
        assert_eq!(apply_noise(&s, &zero), s);
    }

    #[test]
    fn tagging() {
        let s = TokenSentence::from_whitespace("今天 天气", Lang::Zh);
        let tags = TagSpec { origin: Origin::Real, domain: Domain::Bio };
        let t = tag_sentence(&s, tags).unwrap();
        assert_eq!(t.tokens, ["<REAL>", "<BIO>", "今天", "天气"]);
        assert!(matches!(tag_sentence(&t, tags), Err(AugmentError::AlreadyTagged(_))));
        assert_eq!(strip_tags(&t), (Some(tags), s));
    }

    #[test]
    fn audit_flags_wrong_tags() {
        let mut good = SentencePair::from_text("<BT> <NEWS> 甲", "a");
        good.origin = Origin::Bt;
        good.domain = Domain::News;
        let bad = SentencePair::from_text("<BT> <NEWS> 乙", "b");
        let plain = SentencePair::from_text("丙", "c");
        let rep = audit(&[good, bad, plain]);
        assert_eq!(rep.mismatches, vec![1]);
        assert_eq!(rep.untagged, 1);
    }

    #[test]
    fn sampling_spec_validation() {
        assert!(SamplingSpec::default().validate().is_ok());
        let bad = SamplingSpec { p_low: 0.96, ..Default::default() };
        assert!(bad.validate().is_err());
        let cfg = MultiBtConfig::default();
        assert_eq!(cfg.sampling(0).mode, SamplingMode::Beam);
        assert_eq!(cfg.sampling(1).mode, SamplingMode::Topp);
    }
}
