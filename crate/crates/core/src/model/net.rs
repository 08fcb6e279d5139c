//! Encoder-decoder forward pass on the tape.
//!
//! Pre-norm residual blocks throughout. A self-attention decoder layer is
//!
//! ```text
//! x = x + SelfAttn(LN(x));  x = x + CrossAttn(LN(x), enc);  x = x + FFN(LN(x))
//! ```
//!
//! and an average-attention layer replaces the first block with the gated cumulative
//! average (the only formulation used anywhere in this crate):
//!
//! ```text
//! a_j = mean(x_1..x_j);  g_j = FFN(a_j);  [i_j, f_j] = sigmoid(W [x_j; g_j] + b)
//! x_j = LN(x_j + i_j * x_j + f_j * g_j)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{AttnIdx, FfnIdx, Layout, LnIdx, MixIdx, Params};
use super::tape::{NodeId, Tape};
use super::tensor::{positional_encoding, Tensor};
use super::vocab::EOS_ID;
use super::ModelError;

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Params,
}

/// One training example in id space. The decoder input is `[EOS] ++ dec_in` and the
/// loss targets are `targets ++ [EOS]`; `dec_in` equals `targets` unless noised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub dec_in: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Example {
    pub fn new(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        Self { src, dec_in: tgt.clone(), targets: tgt }
    }

    pub fn target_tokens(&self) -> usize {
        self.targets.len() + 1
    }
}

/// Inverted dropout with masks drawn from a seeded stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn apply(&mut self, t: &mut Tape<'_>, x: NodeId) -> NodeId {
        if self.rate <= 0.0 {
            return x;
        }
        let v = t.value(x);
        let mut mask = Tensor::zeros(v.rows, v.cols);
        let keep = 1.0 / (1.0 - self.rate);
        for m in &mut mask.data {
            if self.rng.gen::<f64>() >= self.rate {
                *m = keep;
            }
        }
        let m = t.constant(mask);
        t.mul(x, m)
    }
}

fn drop(t: &mut Tape<'_>, d: &mut Option<Dropout>, x: NodeId) -> NodeId {
    match d {
        Some(d) => d.apply(t, x),
        None => x,
    }
}

pub(crate) fn positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for p in 0..len {
        t.row_mut(p).copy_from_slice(&positional_encoding(p, dim));
    }
    t
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Params::init(&config, seed);
        let layout = Layout::new(&config);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Params::init(&config, 0);
        let shapes_match = reference.tensors.len() == params.tensors.len()
            && reference.tensors.iter().zip(&params.tensors).all(|(a, b)| (a.rows, a.cols) == (b.rows, b.cols));
        if !shapes_match {
            return Err(ModelError::Config("parameter shapes do not match config".into()));
        }
        let layout = Layout::new(&config);
        Ok(Self { config, layout, params })
    }

    fn check_ids(&self, src: &[usize], tgt: &[usize]) -> Result<(), ModelError> {
        if let Some(&bad) = src.iter().find(|&&i| i >= self.config.src_vocab) {
            return Err(ModelError::VocabOutOfRange { id: bad, size: self.config.src_vocab });
        }
        if let Some(&bad) = tgt.iter().find(|&&i| i >= self.config.tgt_vocab) {
            return Err(ModelError::VocabOutOfRange { id: bad, size: self.config.tgt_vocab });
        }
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        if tgt.len() + 1 > self.config.max_len || src.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: tgt.len().max(src.len()), max: self.config.max_len });
        }
        Ok(())
    }

    fn ln(t: &mut Tape<'_>, x: NodeId, idx: LnIdx) -> NodeId {
        let g = t.param(idx.g);
        let b = t.param(idx.b);
        t.layer_norm(x, g, b)
    }

    fn lin(t: &mut Tape<'_>, x: NodeId, w: usize, b: usize) -> NodeId {
        let w = t.param(w);
        let b = t.param(b);
        t.linear(x, w, b)
    }

    fn ffn(t: &mut Tape<'_>, x: NodeId, idx: FfnIdx) -> NodeId {
        let h = Self::lin(t, x, idx.w1, idx.b1);
        let h = t.gelu(h);
        Self::lin(t, h, idx.w2, idx.b2)
    }

    fn attn(&self, t: &mut Tape<'_>, query: NodeId, memory: NodeId, idx: AttnIdx, causal: bool) -> NodeId {
        let q = Self::lin(t, query, idx.wq, idx.bq);
        let k = Self::lin(t, memory, idx.wk, idx.bk);
        let v = Self::lin(t, memory, idx.wv, idx.bv);
        let a = t.attention(q, k, v, self.config.heads, causal);
        Self::lin(t, a, idx.wo, idx.bo)
    }

    fn encode(&self, t: &mut Tape<'_>, src: &[usize], dr: &mut Option<Dropout>) -> NodeId {
        let d = self.config.hidden;
        let table = t.param(self.layout.src_embed);
        let x = t.embed(table, src, (d as f64).sqrt(), &positions(src.len(), d));
        let mut x = drop(t, dr, x);
        for layer in &self.layout.enc {
            let h = Self::ln(t, x, layer.ln_attn);
            let a = self.attn(t, h, h, layer.attn, false);
            let a = drop(t, dr, a);
            x = t.add(x, a);
            let h = Self::ln(t, x, layer.ln_ffn);
            let f = Self::ffn(t, h, layer.ffn);
            let f = drop(t, dr, f);
            x = t.add(x, f);
        }
        Self::ln(t, x, self.layout.enc_ln)
    }

    #[allow(clippy::too_many_arguments)]
    fn aan(
        t: &mut Tape<'_>,
        x: NodeId,
        ffn: FfnIdx,
        gate_w: usize,
        gate_b: usize,
        ln: LnIdx,
        d: usize,
        dr: &mut Option<Dropout>,
    ) -> NodeId {
        let avg = t.cum_avg(x);
        let g = Self::ffn(t, avg, ffn);
        let g = drop(t, dr, g);
        let cat = t.concat_cols(x, g);
        let gates = Self::lin(t, cat, gate_w, gate_b);
        let gates = t.sigmoid(gates);
        let input_gate = t.slice_cols(gates, 0, d);
        let forget_gate = t.slice_cols(gates, d, d);
        let ix = t.mul(input_gate, x);
        let fg = t.mul(forget_gate, g);
        let h = t.add(x, ix);
        let h = t.add(h, fg);
        Self::ln(t, h, ln)
    }

    /// Builds the graph and returns the node of per-position log-probabilities.
    fn build(&self, t: &mut Tape<'_>, src: &[usize], dec_tokens: &[usize], dr: &mut Option<Dropout>) -> NodeId {
        let d = self.config.hidden;
        let enc = self.encode(t, src, dr);
        let table = t.param(self.layout.tgt_embed);
        let x = t.embed(table, dec_tokens, (d as f64).sqrt(), &positions(dec_tokens.len(), d));
        let mut x = drop(t, dr, x);
        for layer in &self.layout.dec {
            match layer.mix {
                MixIdx::SelfAttn { ln, attn } => {
                    let h = Self::ln(t, x, ln);
                    let a = self.attn(t, h, h, attn, true);
                    let a = drop(t, dr, a);
                    x = t.add(x, a);
                }
                MixIdx::Aan { ffn, gate_w, gate_b, ln } => {
                    x = Self::aan(t, x, ffn, gate_w, gate_b, ln, d, dr);
                }
            }
            let h = Self::ln(t, x, layer.ln_cross);
            let c = self.attn(t, h, enc, layer.cross, false);
            let c = drop(t, dr, c);
            x = t.add(x, c);
            let h = Self::ln(t, x, layer.ln_ffn);
            let f = Self::ffn(t, h, layer.ffn);
            let f = drop(t, dr, f);
            x = t.add(x, f);
        }
        let x = Self::ln(t, x, self.layout.dec_ln);
        let logits = Self::lin(t, x, self.layout.out_w, self.layout.out_b);
        t.log_softmax(logits)
    }

    /// Log-probabilities for every position of the decoder input `[EOS] ++ prefix`.
    /// Row `j` is the distribution of the token following `prefix[..j]`.
    pub fn forward(&self, src: &[usize], prefix: &[usize]) -> Result<Tensor, ModelError> {
        self.check_ids(src, prefix)?;
        let mut dec = Vec::with_capacity(prefix.len() + 1);
        dec.push(EOS_ID);
        dec.extend_from_slice(prefix);
        let mut t = Tape::new(&self.params.tensors);
        let out = self.build(&mut t, src, &dec, &mut None);
        Ok(t.value(out).clone())
    }

    /// Final encoder states for `src`, one row per source token.
    pub fn encode_memory(&self, src: &[usize]) -> Result<Tensor, ModelError> {
        self.check_ids(src, &[])?;
        let mut t = Tape::new(&self.params.tensors);
        let out = self.encode(&mut t, src, &mut None);
        Ok(t.value(out).clone())
    }

    /// Runs [`Self::forward`] for several sentences.
    pub fn forward_batch(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<Tensor>, ModelError> {
        batch.iter().map(|(s, p)| self.forward(s, p)).collect()
    }

    /// Summed label-smoothed loss of one example, and its gradient scaled by `grad_scale`
    /// added into `grads`.
    pub fn accumulate_grad(
        &self,
        ex: &Example,
        label_smoothing: f64,
        grad_scale: f64,
        grads: &mut [Tensor],
    ) -> Result<f64, ModelError> {
        self.accumulate_grad_with(ex, label_smoothing, grad_scale, grads, None)
    }

    /// [`Self::accumulate_grad`] with dropout active.
    pub fn accumulate_grad_with(
        &self,
        ex: &Example,
        label_smoothing: f64,
        grad_scale: f64,
        grads: &mut [Tensor],
        dropout: Option<Dropout>,
    ) -> Result<f64, ModelError> {
        let (loss, tape, root) = self.example_loss_tape(ex, label_smoothing, dropout)?;
        tape.backward(root, grad_scale, grads);
        Ok(loss)
    }

    /// Summed label-smoothed loss of one example without gradients.
    pub fn example_loss(&self, ex: &Example, label_smoothing: f64) -> Result<f64, ModelError> {
        Ok(self.example_loss_tape(ex, label_smoothing, None)?.0)
    }

    fn example_loss_tape(&self, ex: &Example, eps: f64, mut dropout: Option<Dropout>) -> Result<(f64, Tape<'_>, NodeId), ModelError> {
        if ex.dec_in.len() != ex.targets.len() {
            return Err(ModelError::Config("decoder input and targets differ in length".into()));
        }
        self.check_ids(&ex.src, &ex.dec_in)?;
        self.check_ids(&ex.src, &ex.targets)?;
        let mut dec = Vec::with_capacity(ex.dec_in.len() + 1);
        dec.push(EOS_ID);
        dec.extend_from_slice(&ex.dec_in);
        let mut targets = ex.targets.clone();
        targets.push(EOS_ID);
        let mut t = Tape::new(&self.params.tensors);
        let logp = self.build(&mut t, &ex.src, &dec, &mut dropout);
        let root = t.smoothed_nll(logp, &targets, eps);
        let loss = t.value(root).data[0];
        Ok((loss, t, root))
    }
}
