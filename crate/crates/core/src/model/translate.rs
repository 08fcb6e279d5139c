use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::decode::{beam_search, greedy, mean_log_probs, nucleus_decode, DecodeState, StepModel};
use super::net::Transformer;
use super::params::{read_checkpoint, write_checkpoint};
use super::vocab::Vocab;
use super::ModelError;

/// How a translator picks output tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { size: usize, alpha: f64 },
    TopP { p: f64 },
}

impl Strategy {
    pub fn beam(size: usize) -> Self {
        Strategy::Beam { size, alpha: 0.6 }
    }
}

/// Output length cap used when translating free text.
pub fn default_max_len(src_len: usize, model_max: usize) -> usize {
    (2 * src_len + 10).min(model_max.saturating_sub(1))
}

/// A transformer together with the vocabularies it was trained on.
#[derive(Debug, Clone)]
pub struct TranslationModel {
    pub net: Transformer,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl TranslationModel {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let w = BufWriter::new(File::create(path)?);
        write_checkpoint(w, &self.net.config, &self.src_vocab, &self.tgt_vocab, &self.net.params)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = read_checkpoint(BufReader::new(File::open(path)?))?;
        let net = Transformer::from_params(ck.config, ck.params)?;
        Ok(Self { net, src_vocab: ck.src_vocab, tgt_vocab: ck.tgt_vocab })
    }
}

/// Translation over token strings.
pub trait Translator: Sync {
    fn src_vocab(&self) -> &Vocab;
    fn tgt_vocab(&self) -> &Vocab;
    fn max_len(&self) -> usize;
    fn translate_ids(&self, src: &[usize], strategy: Strategy, rng: &mut dyn RngCore) -> Result<Vec<usize>, ModelError>;

    fn translate(&self, src: &[String], strategy: Strategy, rng: &mut dyn RngCore) -> Result<Vec<String>, ModelError> {
        let mut ids = self.src_vocab().encode(src);
        ids.truncate(self.max_len());
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.translate_ids(&ids, strategy, rng)?;
        Ok(self.tgt_vocab().decode(&out))
    }
}

fn run<M: StepModel>(
    m: &M,
    src: &[usize],
    strategy: Strategy,
    max_len: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<usize>, ModelError> {
    match strategy {
        Strategy::Greedy => greedy(m, src, max_len),
        Strategy::Beam { size, alpha } => Ok(beam_search(m, src, size, alpha, max_len)?.tokens),
        Strategy::TopP { p } => nucleus_decode(m, src, p, max_len, rng),
    }
}

impl Translator for TranslationModel {
    fn src_vocab(&self) -> &Vocab {
        &self.src_vocab
    }

    fn tgt_vocab(&self) -> &Vocab {
        &self.tgt_vocab
    }

    fn max_len(&self) -> usize {
        self.net.config.max_len
    }

    fn translate_ids(&self, src: &[usize], strategy: Strategy, rng: &mut dyn RngCore) -> Result<Vec<usize>, ModelError> {
        run(&self.net, src, strategy, default_max_len(src.len(), self.net.config.max_len), rng)
    }
}

/// Several models decoded jointly; each step uses the arithmetic mean of the member
/// distributions.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<TranslationModel>,
}

impl Ensemble {
    pub fn new(members: Vec<TranslationModel>) -> Result<Self, ModelError> {
        let first = members.first().ok_or(ModelError::EmptyEnsemble)?;
        for m in &members[1..] {
            if m.src_vocab != first.src_vocab || m.tgt_vocab != first.tgt_vocab {
                return Err(ModelError::VocabMismatch);
            }
        }
        Ok(Self { members })
    }

    pub fn nets(&self) -> NetEnsemble<'_> {
        NetEnsemble(self.members.iter().map(|m| &m.net).collect())
    }
}

/// Step model over borrowed networks sharing one target vocabulary.
pub struct NetEnsemble<'a>(pub Vec<&'a Transformer>);

impl StepModel for NetEnsemble<'_> {
    type State = Vec<DecodeState>;

    fn tgt_vocab_size(&self) -> usize {
        self.0[0].config.tgt_vocab
    }

    fn begin(&self, src: &[usize]) -> Result<Self::State, ModelError> {
        self.0.iter().map(|m| m.start(src)).collect()
    }

    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, ModelError> {
        let parts = self.0.iter().zip(state.iter_mut()).map(|(m, s)| m.step(s, token)).collect::<Result<Vec<_>, _>>()?;
        Ok(mean_log_probs(&parts))
    }
}

impl Translator for Ensemble {
    fn src_vocab(&self) -> &Vocab {
        &self.members[0].src_vocab
    }

    fn tgt_vocab(&self) -> &Vocab {
        &self.members[0].tgt_vocab
    }

    fn max_len(&self) -> usize {
        self.members.iter().map(|m| m.net.config.max_len).min().unwrap_or(0)
    }

    fn translate_ids(&self, src: &[usize], strategy: Strategy, rng: &mut dyn RngCore) -> Result<Vec<usize>, ModelError> {
        run(&self.nets(), src, strategy, default_max_len(src.len(), self.max_len()), rng)
    }
}
