//! Shared plumbing for the command-line tools: file IO, error type and model-training
//! settings used by both `model` and `augment multi-bt`.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mtforge_core::augment::{tagged_source, AugmentError};
use mtforge_core::corpus::{read_tsv, write_tsv, CorpusError, Domain, Origin, SentencePair};
use mtforge_core::model::{Arch, Example, LrSchedule, ModelError, TrainHyper, TrainLog, Trainer, Transformer, TranslationModel, Vocab};
use mtforge_core::pipeline::ModelStage;
use mtforge_core::text_norm::{Lang, TokenSentence};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] mtforge_core::text_norm::TextNormError),
    #[error(transparent)]
    Filter(#[from] mtforge_core::filter::FilterError),
    #[error(transparent)]
    Bpe(#[from] mtforge_core::subword::BpeError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] mtforge_core::evalsel::EvalError),
    #[error(transparent)]
    Pipeline(#[from] mtforge_core::pipeline::PipelineError),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Runs a tool body and maps errors to exit code 1 with a message on stderr.
pub fn finish(tool: &str, r: Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{tool}: {e}");
            ExitCode::FAILURE
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

/// Opens `path`, or stdin when it is `None` or `-`.
pub fn reader(path: Option<&Path>) -> Result<Box<dyn BufRead>> {
    match path {
        Some(p) if p != Path::new("-") => Ok(Box::new(BufReader::new(open(p)?))),
        _ => Ok(Box::new(BufReader::new(io::stdin()))),
    }
}

/// Creates `path` (and its parent directory), or stdout when it is `None` or `-`.
pub fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) if p != Path::new("-") => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let f = File::create(p).map_err(|source| CliError::File { path: p.to_path_buf(), source })?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

pub fn read_text(path: Option<&Path>) -> Result<String> {
    let mut s = String::new();
    reader(path)?.read_to_string(&mut s)?;
    Ok(s)
}

pub fn read_sentences(path: Option<&Path>, lang: Lang) -> Result<Vec<TokenSentence>> {
    Ok(mtforge_core::corpus::read_lines(reader(path)?, lang)?)
}

pub fn write_sentences(path: Option<&Path>, sents: &[TokenSentence]) -> Result<()> {
    let mut w = writer(path)?;
    mtforge_core::corpus::write_lines(&mut w, sents)?;
    w.flush()?;
    Ok(())
}

/// Reads a TSV corpus; two-column lines are labelled REAL/BIO.
pub fn read_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    Ok(read_tsv(BufReader::new(open(path)?), Origin::Real, Domain::Bio)?)
}

pub fn write_pairs(path: Option<&Path>, pairs: &[SentencePair]) -> Result<()> {
    let mut w = writer(path)?;
    write_tsv(&mut w, pairs, true)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| CliError::Json {
        path: path.map(Path::to_path_buf).unwrap_or_else(|| "-".into()),
        source,
    })?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TranslationModel> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(TranslationModel::load(path)?)
}

/// Architecture, optimizer and budget for training a model from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub shape: ModelStage,
    pub hyper: TrainHyper,
    pub updates: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { shape: ModelStage::default(), hyper: TrainHyper::desk(), updates: 1000, seed: 1, parallel: false }
    }
}

impl ModelSpec {
    /// Trains a fresh model on `pairs`. With `tagged`, sources get their origin and
    /// domain tags (pairs already tagged are left alone).
    pub fn train(
        &self,
        pairs: &[SentencePair],
        vocabs: (Vocab, Vocab),
        tagged: bool,
        seed: u64,
    ) -> Result<(TranslationModel, TrainLog)> {
        let (sv, tv) = vocabs;
        let data = encode_pairs(pairs, &sv, &tv, self.shape.max_len, tagged)?;
        if data.is_empty() {
            return Err(CliError::Usage("no training pairs fit the model's max_len".into()));
        }
        let cfg = self.shape.config(self.shape.arch, sv.len(), tv.len());
        let net = Transformer::new(cfg, seed)?;
        let mut trainer = Trainer::new(net, self.hyper.clone());
        trainer.parallel = self.parallel;
        let log = trainer.train(&data, self.updates, LrSchedule::InverseSqrt, seed ^ 0x9e37_79b9, None)?;
        Ok((TranslationModel { net: trainer.into_model(), src_vocab: sv, tgt_vocab: tv }, log))
    }

    pub fn arch(&self) -> Arch {
        self.shape.arch
    }
}

/// Vocabularies over both sides of a corpus plus every tag token on the source side.
pub fn build_vocabs(pairs: &[SentencePair], reverse: bool) -> (Vocab, Vocab) {
    let tags: Vec<String> =
        Origin::ALL.iter().map(|o| o.tag().to_string()).chain(Domain::ALL.iter().map(|d| d.tag().to_string())).collect();
    let src = pairs.iter().flat_map(|p| &p.src.tokens);
    let tgt = pairs.iter().flat_map(|p| &p.tgt.tokens);
    if reverse {
        (Vocab::build(tgt), Vocab::build(src))
    } else {
        (Vocab::build(src.chain(&tags)), Vocab::build(tgt))
    }
}

/// Encodes pairs as training examples, dropping those longer than `max_len`.
pub fn encode_pairs(pairs: &[SentencePair], sv: &Vocab, tv: &Vocab, max_len: usize, tagged: bool) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let already = mtforge_core::augment::strip_tags(&p.src).0.is_some();
        let src = if tagged && !already { tagged_source(p)? } else { p.src.clone() };
        if src.is_empty() || src.len() > max_len || p.tgt.len() >= max_len {
            continue;
        }
        out.push(Example::new(sv.encode(&src.tokens), tv.encode(&p.tgt.tokens)));
    }
    Ok(out)
}

/// Swaps source and target of every pair.
pub fn reversed(pairs: &[SentencePair]) -> Vec<SentencePair> {
    pairs
        .iter()
        .map(|p| SentencePair {
            src: TokenSentence::new(p.tgt.tokens.clone(), p.tgt.lang),
            tgt: TokenSentence::new(p.src.tokens.clone(), p.src.lang),
            origin: p.origin,
            domain: p.domain,
        })
        .collect()
}
