//! Corpus BLEU, Self-BLEU matrices and diversity-aware ensemble selection.
//!
//! BLEU here is tokenized corpus BLEU-4 over the tokens as given (case-sensitive).
//! With [`Smoothing::AddOne`], if any n-gram order has zero matches, every order
//! `n >= 2` uses `(m + 1) / (t + 1)`; a zero unigram precision still yields 0.

use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{beam_search, Ensemble, Hypothesis, ModelError};
use crate::text_norm::TokenSentence;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    Empty,
    #[error("matrix is not square or does not match {0} candidates")]
    BadMatrix(usize),
    #[error("cannot select {k} of {n} candidates")]
    BadK { k: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    #[default]
    AddOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped match counts and totals per order, summed over the corpus.
pub fn corpus_stats(hyps: &[TokenSentence], refs: &[TokenSentence], max_n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let hc = ngram_counts(&h.tokens, n);
            let rc = ngram_counts(&r.tokens, n);
            for (g, c) in hc {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    (matches, totals)
}

pub fn corpus_bleu(
    hyps: &[TokenSentence],
    refs: &[TokenSentence],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuScore, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    let (matches, totals) = corpus_stats(hyps, refs, max_n);
    let hyp_len: usize = hyps.iter().map(TokenSentence::len).sum();
    let ref_len: usize = refs.iter().map(TokenSentence::len).sum();
    let smooth = smoothing == Smoothing::AddOne && matches.iter().any(|&m| m == 0);
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = (matches[i] as f64, totals[i] as f64);
            if smooth && i >= 1 {
                (m + 1.0) / (t + 1.0)
            } else if t == 0.0 {
                0.0
            } else {
                m / t
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        (100.0 * brevity_penalty * mean_log.exp()).min(100.0)
    };
    Ok(BleuScore { score, precisions, brevity_penalty, hyp_len, ref_len })
}

/// BLEU-4 with the default smoothing.
pub fn bleu(hyps: &[TokenSentence], refs: &[TokenSentence]) -> Result<f64, EvalError> {
    Ok(corpus_bleu(hyps, refs, 4, Smoothing::AddOne)?.score)
}

/// BLEU of `outputs_i` scored against `outputs_j` as references.
pub fn self_bleu(outputs_i: &[TokenSentence], outputs_j: &[TokenSentence]) -> Result<f64, EvalError> {
    bleu(outputs_i, outputs_j)
}

/// Row = hypothesis model, column = reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBleuMatrix {
    pub ids: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl SelfBleuMatrix {
    pub fn compute(ids: Vec<String>, outputs: &[Vec<TokenSentence>]) -> Result<Self, EvalError> {
        let n = outputs.len();
        if ids.len() != n {
            return Err(EvalError::BadMatrix(ids.len()));
        }
        let cells: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|c| {
                let (i, j) = (c / n, c % n);
                if i == j {
                    Ok(100.0)
                } else {
                    self_bleu(&outputs[i], &outputs[j])
                }
            })
            .collect::<Result<_, _>>()?;
        let matrix = cells.chunks(n.max(1)).map(<[f64]>::to_vec).collect();
        Ok(Self { ids, matrix })
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let n = self.ids.len();
        if self.matrix.len() != n || self.matrix.iter().any(|r| r.len() != n) {
            return Err(EvalError::BadMatrix(n));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub id: String,
    pub checkpoint: Option<PathBuf>,
    pub dev_outputs: Vec<TokenSentence>,
    pub dev_bleu: BleuScore,
}

/// `J(S) = mean dev_bleu(S) - lambda * mean over ordered pairs (i != j) of S[i][j]`.
pub fn objective(subset: &[usize], dev_bleu: &[f64], matrix: &[Vec<f64>], lambda: f64) -> f64 {
    if subset.is_empty() {
        return f64::NEG_INFINITY;
    }
    let quality = subset.iter().map(|&i| dev_bleu[i]).sum::<f64>() / subset.len() as f64;
    let mut sim = 0.0;
    let mut pairs = 0;
    for &i in subset {
        for &j in subset {
            if i != j {
                sim += matrix[i][j];
                pairs += 1;
            }
        }
    }
    let diversity_cost = if pairs == 0 { 0.0 } else { sim / pairs as f64 };
    quality - lambda * diversity_cost
}

/// Greedy subset selection: start with the best single candidate, then repeatedly add
/// the candidate that maximizes `J`. Ties go to the lower index. The result keeps the
/// order of selection.
pub fn select_ensemble(dev_bleu: &[f64], matrix: &[Vec<f64>], k: usize, lambda: f64) -> Result<Vec<usize>, EvalError> {
    let n = dev_bleu.len();
    if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
        return Err(EvalError::BadMatrix(n));
    }
    if k == 0 || k > n {
        return Err(EvalError::BadK { k, n });
    }
    let mut first = 0;
    for i in 1..n {
        if dev_bleu[i] > dev_bleu[first] {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|c| !chosen.contains(c)) {
            let mut s = chosen.clone();
            s.push(c);
            let j = objective(&s, dev_bleu, matrix, lambda);
            if best.map_or(true, |(_, bj)| j > bj) {
                best = Some((c, j));
            }
        }
        chosen.push(best.expect("k <= n leaves a candidate").0);
    }
    Ok(chosen)
}

/// Selection over candidate records; returns candidate ids.
pub fn select_candidates(
    candidates: &[CandidateModel],
    matrix: &SelfBleuMatrix,
    k: usize,
    lambda: f64,
) -> Result<Vec<String>, EvalError> {
    let scores: Vec<f64> = candidates.iter().map(|c| c.dev_bleu.score).collect();
    let picked = select_ensemble(&scores, &matrix.matrix, k, lambda)?;
    Ok(picked.into_iter().map(|i| candidates[i].id.clone()).collect())
}

/// Beam search over the averaged member distributions.
pub fn ensemble_decode(models: &Ensemble, src: &[usize], beam: usize, alpha: f64, max_len: usize) -> Result<Hypothesis, EvalError> {
    Ok(beam_search(&models.nets(), src, beam, alpha, max_len)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_norm::Lang;

    fn s(x: &str) -> TokenSentence {
        TokenSentence::from_whitespace(x, Lang::En)
    }

    #[test]
    fn identity_is_100() {
        let x = vec![s("the cat sat on the mat"), s("a b c d e")];
        let b = corpus_bleu(&x, &x, 4, Smoothing::AddOne).unwrap();
        assert_eq!(b.score, 100.0);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn short_hypothesis() {
        let b = corpus_bleu(&[s("the cat")], &[s("the cat sat")], 4, Smoothing::AddOne).unwrap();
        assert!((b.brevity_penalty - (1.0f64 - 1.5).exp()).abs() < 1e-12);
        // 1-grams 2/2, 2-grams 1/1; no 3- or 4-grams so both smooth to 1/1.
        assert_eq!(b.precisions, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn no_overlap_is_zero_not_nan() {
        let b = corpus_bleu(&[s("x y z")], &[s("a b c")], 4, Smoothing::AddOne).unwrap();
        assert_eq!(b.score, 0.0);
        let e = corpus_bleu(&[s("")], &[s("a b c")], 4, Smoothing::AddOne).unwrap();
        assert_eq!(e.score, 0.0);
        assert!(matches!(bleu(&[s("a")], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn self_bleu_is_asymmetric() {
        let a = vec![s("a b c d e f")];
        let b = vec![s("a b c")];
        assert!(self_bleu(&a, &b).unwrap() != self_bleu(&b, &a).unwrap());
    }

    #[test]
    fn lambda_zero_is_top_k() {
        let dev = [10.0, 30.0, 20.0, 25.0];
        let m = vec![vec![100.0; 4]; 4];
        let mut got = select_ensemble(&dev, &m, 3, 0.0).unwrap();
        got.sort();
        assert_eq!(got, vec![1, 2, 3]);
        assert_eq!(select_ensemble(&dev, &m, 4, 5.0).unwrap().len(), 4);
    }

    #[test]
    fn diversity_changes_choice() {
        let dev = [30.0, 29.0, 28.0];
        let m = vec![vec![100.0, 95.0, 40.0], vec![95.0, 100.0, 40.0], vec![40.0, 40.0, 100.0]];
        assert_eq!(select_ensemble(&dev, &m, 2, 0.1).unwrap(), vec![0, 2]);
        assert_eq!(select_ensemble(&dev, &m, 2, 0.0).unwrap(), vec![0, 1]);
    }
}
