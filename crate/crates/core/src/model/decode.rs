//! Incremental decoding, search and sampling.
//!
//! [`Transformer::step`] recomputes nothing: self-attention layers cache their key and
//! value rows, average-attention layers keep only a running sum and a count, and
//! cross-attention keys and values are projected once per source sentence.

use std::sync::Arc;

use rand::Rng;

use super::net::Transformer;
use super::params::{AttnIdx, FfnIdx, LnIdx, MixIdx};
use super::tensor::{self, axpy, dot, layer_norm_row, positional_encoding, vec_linear, Tensor};
use super::vocab::EOS_ID;
use super::ModelError;

/// Source-side values shared by every decoding step.
#[derive(Debug)]
pub struct EncodedSource {
    pub memory: Tensor,
    cross: Vec<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
enum LayerState {
    SelfAttn { keys: Vec<f64>, values: Vec<f64> },
    Aan { sum: Vec<f64>, count: usize },
}

/// Decoder state after consuming a prefix.
#[derive(Debug, Clone)]
pub struct DecodeState {
    source: Arc<EncodedSource>,
    layers: Vec<LayerState>,
    pos: usize,
}

impl DecodeState {
    /// Number of tokens fed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Scalars held per layer, excluding the shared source projections.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::SelfAttn { keys, values } => keys.len() + values.len(),
                LayerState::Aan { sum, .. } => sum.len() + 1,
            })
            .collect()
    }
}

fn ln(x: &[f64], p: &[Tensor], idx: LnIdx) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, &p[idx.g].data, &p[idx.b].data, &mut out);
    out
}

fn ffn(x: &[f64], p: &[Tensor], idx: FfnIdx) -> Vec<f64> {
    let mut h = vec_linear(x, &p[idx.w1], &p[idx.b1]);
    h.iter_mut().for_each(|v| *v = tensor::gelu(*v));
    vec_linear(&h, &p[idx.w2], &p[idx.b2])
}

/// One query against `n` flat key/value rows of width `q.len()`.
fn attend(q: &[f64], keys: &[f64], values: &[f64], heads: usize) -> Vec<f64> {
    let d = q.len();
    let n = keys.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let lo = h * dh;
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(&q[lo..lo + dh], &keys[j * d + lo..j * d + lo + dh]) * scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, s) in scores.iter().enumerate() {
            axpy(s / sum, &values[j * d + lo..j * d + lo + dh], &mut out[lo..lo + dh]);
        }
    }
    out
}

fn project(x: &[f64], p: &[Tensor], idx: AttnIdx) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        vec_linear(x, &p[idx.wq], &p[idx.bq]),
        vec_linear(x, &p[idx.wk], &p[idx.bk]),
        vec_linear(x, &p[idx.wv], &p[idx.bv]),
    )
}

impl Transformer {
    pub fn encode_source(&self, src: &[usize]) -> Result<EncodedSource, ModelError> {
        let memory = self.encode_memory(src)?;
        let p = &self.params.tensors;
        let cross = self
            .layout
            .dec
            .iter()
            .map(|l| {
                let c = l.cross;
                (tensor::linear(&memory, &p[c.wk], Some(&p[c.bk])), tensor::linear(&memory, &p[c.wv], Some(&p[c.bv])))
            })
            .collect();
        Ok(EncodedSource { memory, cross })
    }

    pub fn start(&self, src: &[usize]) -> Result<DecodeState, ModelError> {
        let d = self.config.hidden;
        let layers = self
            .layout
            .dec
            .iter()
            .map(|l| match l.mix {
                MixIdx::SelfAttn { .. } => LayerState::SelfAttn { keys: Vec::new(), values: Vec::new() },
                MixIdx::Aan { .. } => LayerState::Aan { sum: vec![0.0; d], count: 0 },
            })
            .collect();
        Ok(DecodeState { source: Arc::new(self.encode_source(src)?), layers, pos: 0 })
    }

    /// Feeds `token` at the next position and returns log-probabilities for the token
    /// after it. The first call should feed [`EOS_ID`].
    pub fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>, ModelError> {
        if token >= self.config.tgt_vocab {
            return Err(ModelError::VocabOutOfRange { id: token, size: self.config.tgt_vocab });
        }
        if state.pos >= self.config.max_len {
            return Err(ModelError::TooLong { len: state.pos + 1, max: self.config.max_len });
        }
        let d = self.config.hidden;
        let heads = self.config.heads;
        let p = &self.params.tensors;
        let mut x = positional_encoding(state.pos, d);
        axpy((d as f64).sqrt(), p[self.layout.tgt_embed].row(token), &mut x);
        for (li, layer) in self.layout.dec.iter().enumerate() {
            match (&mut state.layers[li], layer.mix) {
                (LayerState::SelfAttn { keys, values }, MixIdx::SelfAttn { ln: n, attn }) => {
                    let h = ln(&x, p, n);
                    let (q, k, v) = project(&h, p, attn);
                    keys.extend_from_slice(&k);
                    values.extend_from_slice(&v);
                    let a = attend(&q, keys, values, heads);
                    let o = vec_linear(&a, &p[attn.wo], &p[attn.bo]);
                    axpy(1.0, &o, &mut x);
                }
                (LayerState::Aan { sum, count }, MixIdx::Aan { ffn: f, gate_w, gate_b, ln: n }) => {
                    axpy(1.0, &x, sum);
                    *count += 1;
                    let inv = 1.0 / *count as f64;
                    let avg: Vec<f64> = sum.iter().map(|s| s * inv).collect();
                    let g = ffn(&avg, p, f);
                    let mut cat = x.clone();
                    cat.extend_from_slice(&g);
                    let gates: Vec<f64> = vec_linear(&cat, &p[gate_w], &p[gate_b]).into_iter().map(tensor::sigmoid).collect();
                    let mixed: Vec<f64> = (0..d).map(|j| x[j] + gates[j] * x[j] + gates[d + j] * g[j]).collect();
                    x = ln(&mixed, p, n);
                }
                _ => return Err(ModelError::StateMismatch),
            }
            let h = ln(&x, p, layer.ln_cross);
            let q = vec_linear(&h, &p[layer.cross.wq], &p[layer.cross.bq]);
            let (k, v) = &state.source.cross[li];
            let a = attend(&q, &k.data, &v.data, heads);
            let o = vec_linear(&a, &p[layer.cross.wo], &p[layer.cross.bo]);
            axpy(1.0, &o, &mut x);
            let h = ln(&x, p, layer.ln_ffn);
            let f = ffn(&h, p, layer.ffn);
            axpy(1.0, &f, &mut x);
        }
        let h = ln(&x, p, self.layout.dec_ln);
        let mut logits = vec_linear(&h, &p[self.layout.out_w], &p[self.layout.out_b]);
        tensor::log_softmax_row(&mut logits);
        state.pos += 1;
        Ok(logits)
    }
}

/// Anything that yields next-token log-probabilities one step at a time.
pub trait StepModel {
    type State: Clone;

    fn tgt_vocab_size(&self) -> usize;

    fn begin(&self, src: &[usize]) -> Result<Self::State, ModelError>;

    /// Feeds `token` and returns log-probabilities for the following position.
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, ModelError>;
}

impl StepModel for Transformer {
    type State = DecodeState;

    fn tgt_vocab_size(&self) -> usize {
        self.config.tgt_vocab
    }

    fn begin(&self, src: &[usize]) -> Result<DecodeState, ModelError> {
        self.start(src)
    }

    fn advance(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>, ModelError> {
        self.step(state, token)
    }
}

/// Arithmetic mean of member distributions, returned in log space.
pub fn mean_log_probs(members: &[Vec<f64>]) -> Vec<f64> {
    let k = members.len() as f64;
    let v = members[0].len();
    (0..v)
        .map(|i| {
            let m = members.iter().map(|lp| lp[i]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            let s: f64 = members.iter().map(|lp| (lp[i] - m).exp()).sum();
            m + (s.ln() - k.ln())
        })
        .collect()
}

/// Token ids sorted by descending score, ties broken by id.
fn ranked(logp: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logp.len()).collect();
    ids.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    ids
}

fn argmax(logp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logp.iter().enumerate() {
        if v > logp[best] {
            best = i;
        }
    }
    best
}

/// A finished hypothesis without the closing EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities including the closing EOS.
    pub score: f64,
}

impl Hypothesis {
    pub fn normalized(&self, alpha: f64) -> f64 {
        length_normalized(self.score, self.tokens.len() + 1, alpha)
    }
}

pub fn length_normalized(score: f64, len: usize, alpha: f64) -> f64 {
    score / (len as f64).powf(alpha)
}

/// Argmax decoding, ties to the lowest id; stops at EOS or after `max_len` tokens.
pub fn greedy<M: StepModel>(model: &M, src: &[usize], max_len: usize) -> Result<Vec<usize>, ModelError> {
    let mut state = model.begin(src)?;
    let mut logp = model.advance(&mut state, EOS_ID)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let tok = argmax(&logp);
        if tok == EOS_ID {
            break;
        }
        out.push(tok);
        if out.len() == max_len {
            break;
        }
        logp = model.advance(&mut state, tok)?;
    }
    Ok(out)
}

struct Alive<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    next: Vec<f64>,
}

/// Length-normalized beam search (`score / len^alpha`, length counting the EOS).
///
/// Every alive hypothesis proposes its `beam` best tokens; EOS proposals finish, the
/// `beam` best remaining proposals stay alive. Hypotheses reaching `max_len` tokens are
/// closed with the EOS score at that position. Search stops once `beam` hypotheses are
/// finished and no alive one can still overtake the best of them.
pub fn beam_search<M: StepModel>(
    model: &M,
    src: &[usize],
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    assert!(beam >= 1, "beam size must be positive");
    let mut state = model.begin(src)?;
    let next = model.advance(&mut state, EOS_ID)?;
    if max_len == 0 {
        return Ok(Hypothesis { tokens: Vec::new(), score: next[EOS_ID] });
    }
    let mut alive = vec![Alive { tokens: Vec::new(), score: 0.0, state, next }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() {
        let mut proposals: Vec<(usize, usize, f64)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            for tok in ranked(&h.next).into_iter().take(beam) {
                let score = h.score + h.next[tok];
                if tok == EOS_ID {
                    finished.push(Hypothesis { tokens: h.tokens.clone(), score });
                } else {
                    proposals.push((hi, tok, score));
                }
            }
        }
        proposals.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let at_limit = alive[0].tokens.len() + 1 >= max_len;
        let mut next_alive = Vec::new();
        let keep = if at_limit { proposals.len() } else { beam };
        for (hi, tok, score) in proposals.into_iter().take(keep) {
            let parent = &alive[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut st = parent.state.clone();
            let next = model.advance(&mut st, tok)?;
            if at_limit {
                finished.push(Hypothesis { tokens, score: score + next[EOS_ID] });
            } else {
                next_alive.push(Alive { tokens, score, state: st, next });
            }
        }
        alive = next_alive;
        if finished.len() >= beam && !alive.is_empty() {
            let best = finished.iter().map(|h| h.normalized(alpha)).fold(f64::NEG_INFINITY, f64::max);
            let bound = alive
                .iter()
                .map(|h| length_normalized(h.score, max_len + 1, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best >= bound {
                break;
            }
        }
    }
    let mut best: Option<&Hypothesis> = None;
    for h in &finished {
        if best.map_or(true, |b| h.normalized(alpha) > b.normalized(alpha)) {
            best = Some(h);
        }
    }
    Ok(best.cloned().unwrap_or(Hypothesis { tokens: Vec::new(), score: f64::NEG_INFINITY }))
}

/// The nucleus of a distribution: the shortest prefix of ids sorted by descending
/// probability (ties by id) whose mass exceeds `p`, or every id if none does.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let order = ranked(probs);
    let mut mass = 0.0;
    for (n, &id) in order.iter().enumerate() {
        mass += probs[id];
        if mass > p {
            return order[..=n].to_vec();
        }
    }
    order
}

/// Draws one id from the renormalized nucleus of `logp`.
pub fn sample_nucleus<R: Rng + ?Sized>(logp: &[f64], p: f64, rng: &mut R) -> usize {
    let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let set = nucleus(&probs, p);
    let total: f64 = set.iter().map(|&i| probs[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in &set {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *set.last().expect("nucleus is never empty")
}

/// Ancestral sampling restricted to the nucleus at every step.
pub fn nucleus_decode<M: StepModel, R: Rng + ?Sized>(
    model: &M,
    src: &[usize],
    p: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<usize>, ModelError> {
    let mut state = model.begin(src)?;
    let mut logp = model.advance(&mut state, EOS_ID)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let tok = sample_nucleus(&logp, p, rng);
        if tok == EOS_ID {
            break;
        }
        out.push(tok);
        if out.len() == max_len {
            break;
        }
        logp = model.advance(&mut state, tok)?;
    }
    Ok(out)
}
