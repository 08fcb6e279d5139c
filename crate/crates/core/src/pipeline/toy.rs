//! A synthetic Chinese-like/English-like language pair with a known translation.
//!
//! Source words are one or two Han characters written without spaces; target words
//! are made-up lowercase syllable strings. A sentence translates word by word through
//! a fixed substitution table, then every adjacent pair of words is swapped, the first
//! word is capitalized and a full stop is appended. A handful of source words have a
//! different translation in the biomedical domain.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Domain;

const SINGLE_WORDS: usize = 40;
const DOUBLE_WORDS: usize = 16;
/// Source words whose biomedical translation differs from the general one.
const POLYSEMOUS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub news_pairs: usize,
    pub bio_pairs: usize,
    pub mono_tgt: usize,
    pub mono_src: usize,
    pub dev: usize,
    pub test: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Fraction of bitext lines replaced by junk the filters should catch.
    pub junk_fraction: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            news_pairs: 300,
            bio_pairs: 100,
            mono_tgt: 1500,
            mono_src: 300,
            dev: 100,
            test: 200,
            min_words: 4,
            max_words: 8,
            junk_fraction: 0.04,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyLanguage {
    pub src_words: Vec<String>,
    pub tgt_general: Vec<String>,
    /// Biomedical translations of the first `POLYSEMOUS` source words.
    pub tgt_bio: Vec<String>,
}

fn han(offset: u32) -> char {
    char::from_u32(0x4E00 + offset).expect("inside the CJK block")
}

impl ToyLanguage {
    pub fn new() -> Self {
        // Single-character words, first characters and second characters of two-character
        // words come from disjoint ranges, so greedy longest-match segmentation is exact.
        let mut src_words: Vec<String> = (0..SINGLE_WORDS as u32).map(|i| han(0x100 + i * 7).to_string()).collect();
        src_words.extend((0..DOUBLE_WORDS as u32).map(|i| format!("{}{}", han(0x800 + i * 5), han(0xA00 + i * 3))));
        let onsets = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
        let vowels = ["a", "e", "i", "o", "u"];
        let mut rng = ChaCha8Rng::seed_from_u64(0x70F);
        let mut pool: Vec<String> = Vec::new();
        for a in onsets {
            for b in vowels {
                for c in onsets {
                    for d in vowels {
                        pool.push(format!("{a}{b}{c}{d}"));
                    }
                }
            }
        }
        pool.shuffle(&mut rng);
        let total = src_words.len() + POLYSEMOUS;
        let tgt: Vec<String> = pool.into_iter().take(total).collect();
        let tgt_general = tgt[..src_words.len()].to_vec();
        let tgt_bio = tgt[src_words.len()..].to_vec();
        Self { src_words, tgt_general, tgt_bio }
    }

    pub fn lexicon(&self) -> Vec<String> {
        self.src_words.iter().filter(|w| w.chars().count() > 1).cloned().collect()
    }

    pub fn word(&self, id: usize, domain: Domain) -> &str {
        if domain == Domain::Bio && id < POLYSEMOUS {
            &self.tgt_bio[id]
        } else {
            &self.tgt_general[id]
        }
    }

    /// Target word sequence for source word ids, before capitalization.
    pub fn translate_ids(&self, ids: &[usize], domain: Domain) -> Vec<String> {
        let mut words: Vec<String> = ids.iter().map(|&i| self.word(i, domain).to_string()).collect();
        for pair in words.chunks_mut(2) {
            pair.reverse();
        }
        words
    }

    pub fn src_text(&self, ids: &[usize]) -> String {
        let mut s: String = ids.iter().map(|&i| self.src_words[i].as_str()).collect();
        s.push('。');
        s
    }

    pub fn tgt_text(&self, ids: &[usize], domain: Domain) -> String {
        let words = self.translate_ids(ids, domain);
        let mut s = String::new();
        for (i, w) in words.iter().enumerate() {
            if i == 0 {
                let mut c = w.chars();
                let first = c.next().expect("non-empty word");
                s.extend(first.to_uppercase());
                s.push_str(c.as_str());
            } else {
                s.push(' ');
                s.push_str(w);
            }
        }
        s.push('.');
        s
    }
}

impl Default for ToyLanguage {
    fn default() -> Self {
        Self::new()
    }
}

/// Raw toy data, one entry per line of the corresponding file.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    /// `(src, tgt, domain)`
    pub bitext: Vec<(String, String, Domain)>,
    pub mono_tgt: Vec<String>,
    pub mono_src: Vec<String>,
    pub dev: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub lexicon: Vec<String>,
}

struct Sampler {
    general: WeightedIndex<f64>,
    bio: WeightedIndex<f64>,
}

impl Sampler {
    fn new(n: usize) -> Self {
        // Zipf-like frequencies with the polysemous words boosted in biomedical text.
        let general: Vec<f64> = (0..n).map(|r| 1.0 / (r as f64 + 3.0)).collect();
        let bio: Vec<f64> = general.iter().enumerate().map(|(i, w)| if i < POLYSEMOUS { w * 3.0 } else { *w }).collect();
        Self { general: WeightedIndex::new(general).expect("positive"), bio: WeightedIndex::new(bio).expect("positive") }
    }

    fn sentence<R: Rng>(&self, rng: &mut R, spec: &ToySpec, domain: Domain) -> Vec<usize> {
        let len = rng.gen_range(spec.min_words..=spec.max_words);
        let dist = if domain == Domain::Bio { &self.bio } else { &self.general };
        (0..len).map(|_| dist.sample(rng)).collect()
    }
}

pub fn generate(spec: &ToySpec, seed: u64) -> ToyData {
    let lang = ToyLanguage::new();
    let n = lang.src_words.len();
    let sampler = Sampler::new(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bitext = Vec::with_capacity(spec.news_pairs + spec.bio_pairs);
    for (count, domain) in [(spec.news_pairs, Domain::News), (spec.bio_pairs, Domain::Bio)] {
        for _ in 0..count {
            let ids = sampler.sentence(&mut rng, spec, domain);
            bitext.push((lang.src_text(&ids), lang.tgt_text(&ids, domain), domain));
        }
    }
    let junk = (bitext.len() as f64 * spec.junk_fraction).round() as usize;
    for k in 0..junk {
        let i = rng.gen_range(0..bitext.len());
        let (src, tgt, domain) = bitext[i].clone();
        bitext[i] = match k % 4 {
            0 => (tgt.clone(), tgt, domain),
            1 => (src, format!("{tgt} {tgt} {tgt} {tgt}"), domain),
            2 => (src.clone(), format!("{src} {tgt}"), domain),
            _ => {
                let ids = sampler.sentence(&mut rng, spec, domain);
                (src, lang.tgt_text(&ids, domain), domain)
            }
        };
    }
    let mono_tgt = (0..spec.mono_tgt)
        .map(|_| lang.tgt_text(&sampler.sentence(&mut rng, spec, Domain::Bio), Domain::Bio))
        .collect();
    let mono_src = (0..spec.mono_src).map(|_| lang.src_text(&sampler.sentence(&mut rng, spec, Domain::Bio))).collect();
    let mut held_out = |count: usize| -> Vec<(String, String)> {
        (0..count)
            .map(|_| {
                let ids = sampler.sentence(&mut rng, spec, Domain::Bio);
                (lang.src_text(&ids), lang.tgt_text(&ids, Domain::Bio))
            })
            .collect()
    };
    let dev = held_out(spec.dev);
    let test = held_out(spec.test);
    ToyData { bitext, mono_tgt, mono_src, dev, test, lexicon: lang.lexicon() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_norm::{normalize_punct, segment_zh, tokenize_en, Lang, Lexicon, RawSentence};

    #[test]
    fn sixty_four_target_words() {
        let l = ToyLanguage::new();
        let mut all: Vec<&String> = l.tgt_general.iter().chain(&l.tgt_bio).collect();
        assert_eq!(all.len(), 64);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 64);
    }

    #[test]
    fn cipher_and_reorder() {
        let l = ToyLanguage::new();
        let ids = [10, 11, 12];
        let w = |i: usize| l.tgt_general[i].clone();
        assert_eq!(l.translate_ids(&ids, Domain::News), vec![w(11), w(10), w(12)]);
        assert_ne!(l.word(0, Domain::Bio), l.word(0, Domain::News));
        assert_eq!(l.word(20, Domain::Bio), l.word(20, Domain::News));
        assert!(l.tgt_text(&ids, Domain::News).ends_with('.'));
    }

    #[test]
    fn segmentation_recovers_words() {
        let l = ToyLanguage::new();
        let lex = Lexicon::new(l.lexicon());
        let ids = [3, 45, 44, 0, 55, 50];
        let raw = normalize_punct(&RawSentence::new(l.src_text(&ids), Lang::Zh));
        let toks = segment_zh(&raw, &lex);
        let mut want: Vec<String> = ids.iter().map(|&i| l.src_words[i].clone()).collect();
        want.push(".".into());
        assert_eq!(toks.tokens, want);
        let en = tokenize_en(&RawSentence::new(l.tgt_text(&ids, Domain::Bio), Lang::En));
        assert_eq!(en.len(), ids.len() + 1);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = ToySpec { news_pairs: 20, bio_pairs: 5, mono_tgt: 10, mono_src: 5, dev: 3, test: 3, ..Default::default() };
        assert_eq!(generate(&spec, 4), generate(&spec, 4));
        assert_ne!(generate(&spec, 4).bitext, generate(&spec, 5).bitext);
    }
}
