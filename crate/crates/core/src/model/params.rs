//! Parameter layout, initialization and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"MTFGCKPT" | u32 version | u32 header_len | header JSON | tensors as f32, in header order
//! ```
//!
//! The JSON header carries the model config, the vocabularies and `[name, rows, cols]`
//! for every tensor.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LayerKind, ModelConfig};
use super::tensor::Tensor;
use super::vocab::Vocab;
use super::ModelError;

const CKPT_MAGIC: &[u8; 8] = b"MTFGCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
pub struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerIdx {
    pub ln_attn: LnIdx,
    pub attn: AttnIdx,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub enum MixIdx {
    SelfAttn { ln: LnIdx, attn: AttnIdx },
    /// Cumulative average, its feed-forward net, the input/forget gate and the output norm.
    Aan { ffn: FfnIdx, gate_w: usize, gate_b: usize, ln: LnIdx },
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerIdx {
    pub mix: MixIdx,
    pub ln_cross: LnIdx,
    pub cross: AttnIdx,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

/// Indices of every tensor in [`Params`], derived from the config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Embedding,
    Zero,
    One,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx { g: self.add(format!("{prefix}.g"), 1, d, Init::One), b: self.add(format!("{prefix}.b"), 1, d, Init::Zero) }
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, din: usize, dout: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.{w}"), din, dout, Init::Xavier),
            self.add(format!("{prefix}.{b}"), 1, dout, Init::Zero),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(prefix, "wq", "bq", d, d);
        let (wk, bk) = self.linear(prefix, "wk", "bk", d, d);
        let (wv, bv) = self.linear(prefix, "wv", "bv", d, d);
        let (wo, bo) = self.linear(prefix, "wo", "bo", d, d);
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        let (w1, b1) = self.linear(prefix, "w1", "b1", d, f);
        let (w2, b2) = self.linear(prefix, "w2", "b2", f, d);
        FfnIdx { w1, b1, w2, b2 }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let d = cfg.hidden;
    let mut b = Builder { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
    let src_embed = b.add("src_embed".into(), cfg.src_vocab, d, Init::Embedding);
    let tgt_embed = b.add("tgt_embed".into(), cfg.tgt_vocab, d, Init::Embedding);
    let enc = (0..cfg.enc_layers)
        .map(|l| EncLayerIdx {
            ln_attn: b.ln(&format!("enc.{l}.ln_attn"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln_ffn: b.ln(&format!("enc.{l}.ln_ffn"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn),
        })
        .collect();
    let enc_ln = b.ln("enc.ln", d);
    let dec = cfg
        .dec_plan
        .iter()
        .enumerate()
        .map(|(l, kind)| {
            let mix = match kind {
                LayerKind::SelfAttn => MixIdx::SelfAttn {
                    ln: b.ln(&format!("dec.{l}.ln_self"), d),
                    attn: b.attn(&format!("dec.{l}.self"), d),
                },
                LayerKind::Aan => {
                    let ffn = b.ffn(&format!("dec.{l}.aan.ffn"), d, cfg.ffn);
                    let (gate_w, gate_b) = b.linear(&format!("dec.{l}.aan.gate"), "w", "b", 2 * d, 2 * d);
                    let ln = b.ln(&format!("dec.{l}.aan.ln"), d);
                    MixIdx::Aan { ffn, gate_w, gate_b, ln }
                }
            };
            DecLayerIdx {
                mix,
                ln_cross: b.ln(&format!("dec.{l}.ln_cross"), d),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln_ffn: b.ln(&format!("dec.{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn),
            }
        })
        .collect();
    let dec_ln = b.ln("dec.ln", d);
    let (out_w, out_b) = b.linear("out", "w", "b", d, cfg.tgt_vocab);
    (Layout { src_embed, tgt_embed, enc, enc_ln, dec, dec_ln, out_w, out_b }, b)
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        build_layout(cfg).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    /// Xavier-uniform matrices, N(0, 1/d) embeddings, unit gains and zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let (_, b) = build_layout(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(&(r, c), init)| match init {
                Init::Zero => Tensor::zeros(r, c),
                Init::One => Tensor::filled(r, c, 1.0),
                Init::Xavier => {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-limit..limit)).collect())
                }
                Init::Embedding => {
                    // uniform with variance 1/d
                    let limit = (3.0 / c as f64).sqrt();
                    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-limit..limit)).collect())
                }
            })
            .collect();
        Self { names: b.names, tensors }
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Flat index -> (tensor, offset).
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (i, flat);
            }
            flat -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
    tensors: Vec<(String, usize, usize)>,
}

/// Writes config, vocabularies and parameters (as little-endian `f32`).
pub fn write_checkpoint<W: Write>(
    mut w: W,
    config: &ModelConfig,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    params: &Params,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        config: config.clone(),
        src_vocab: src_vocab.tokens().to_vec(),
        tgt_vocab: tgt_vocab.tokens().to_vec(),
        tensors: params.names.iter().zip(&params.tensors).map(|(n, t)| (n.clone(), t.rows, t.cols)).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.scalar_count() * 4);
    for t in &params.tensors {
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub params: Params,
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    let expected = Params::init(&header.config, 0);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut names = Vec::with_capacity(header.tensors.len());
    for ((name, rows, cols), want) in header.tensors.into_iter().zip(&expected.tensors) {
        if (rows, cols) != (want.rows, want.cols) {
            return Err(ModelError::Checkpoint(format!("tensor {name} has shape {rows}x{cols}")));
        }
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        tensors.push(Tensor::from_vec(rows, cols, data));
        names.push(name);
    }
    if tensors.len() != expected.tensors.len() {
        return Err(ModelError::Checkpoint("tensor count does not match config".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        src_vocab: Vocab::from_tokens(header.src_vocab),
        tgt_vocab: Vocab::from_tokens(header.tgt_vocab),
        params: Params { names, tensors },
    })
}
