//! Config-driven orchestration of the whole recipe.
//!
//! Stages run in a fixed order inside one work directory. After every stage the
//! manifest (`manifest.json`) records the stage seed, a digest of the config slice the
//! stage reads, digests of everything produced upstream and digests of the stage's own
//! outputs. With `resume`, a stage whose config slice and inputs are unchanged is
//! skipped if its outputs are intact and re-run if they are missing; re-created or
//! existing outputs that disagree with the recorded digests are a
//! [`PipelineError::DigestMismatch`].

mod report;
mod stages;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{MultiBtConfig, NoiseSpec, SamplingSpec};
use crate::corpus::Domain;
use crate::digest::{label_seed, sha256_hex, short};
use crate::filter::FilterRules;
use crate::model::{Arch, ModelConfig, TrainHyper};

pub use report::{reference_table, AblationReport, ReportRow};
pub use stages::{postprocess, SystemScore, Scores};
pub use toy::{generate as generate_toy, ToyData, ToyLanguage, ToySpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "pipeline.lock";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("stage {stage} failed: {message}")]
    StageFailure { stage: String, message: String },
    #[error("stage {stage}: {path} does not match the manifest digest")]
    DigestMismatch { stage: String, path: String },
    #[error("work directory is locked by {0}")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Prepare,
    Filter,
    Case,
    Bpe,
    Tag,
    Base,
    Augment,
    Finetune,
    Pool,
    Select,
    Decode,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Prepare,
        Stage::Filter,
        Stage::Case,
        Stage::Bpe,
        Stage::Tag,
        Stage::Base,
        Stage::Augment,
        Stage::Finetune,
        Stage::Pool,
        Stage::Select,
        Stage::Decode,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Filter => "filter",
            Stage::Case => "case",
            Stage::Bpe => "bpe",
            Stage::Tag => "tag",
            Stage::Base => "base",
            Stage::Augment => "augment",
            Stage::Finetune => "finetune",
            Stage::Pool => "pool",
            Stage::Select => "select",
            Stage::Decode => "decode",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitextFile {
    pub path: PathBuf,
    pub domain: Domain,
}

/// Raw inputs on disk: TSV bitext files (`src TAB tgt`), one sentence per line
/// otherwise, and an optional word list for Chinese segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFiles {
    pub bitext: Vec<BitextFile>,
    pub mono_tgt: PathBuf,
    #[serde(default)]
    pub mono_src: Option<PathBuf>,
    pub dev: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Toy(ToySpec),
    Files(DataFiles),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpeStage {
    pub src_ops: usize,
    pub tgt_ops: usize,
}

impl Default for BpeStage {
    fn default() -> Self {
        Self { src_ops: 100, tgt_ops: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelStage {
    pub arch: Arch,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for ModelStage {
    fn default() -> Self {
        Self { arch: Arch::Big, enc_layers: 2, dec_layers: 2, hidden: 32, ffn: 64, heads: 4, max_len: 64 }
    }
}

impl ModelStage {
    pub fn config(&self, arch: Arch, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            hidden: self.hidden,
            ffn: self.ffn,
            heads: self.heads,
            dec_plan: crate::model::layer_plan(arch, self.dec_layers),
            src_vocab,
            tgt_vocab,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainStage {
    pub hyper: TrainHyper,
    pub base_updates: usize,
    pub reverse_updates: usize,
    pub aug_updates: usize,
    /// Per-sentence gradients on worker threads; results are identical either way.
    pub parallel: bool,
}

impl Default for TrainStage {
    fn default() -> Self {
        Self { hyper: TrainHyper::desk(), base_updates: 1500, reverse_updates: 1500, aug_updates: 2000, parallel: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseStage {
    pub spec: NoiseSpec,
    /// Fraction of the real bitext that also gets a noised copy.
    pub real_fraction: f64,
}

impl Default for NoiseStage {
    fn default() -> Self {
        Self { spec: NoiseSpec::default(), real_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentStage {
    pub bt: Option<SamplingSpec>,
    /// Monolingual target sentences used by plain back-translation (all when unset);
    /// iterated back-translation draws its shards from the remainder.
    pub bt_sentences: Option<usize>,
    pub kd: bool,
    pub ft: bool,
    pub noise: Option<NoiseStage>,
    pub multi_bt: Option<MultiBtConfig>,
    pub domain: Domain,
    pub beam: usize,
}

impl Default for AugmentStage {
    fn default() -> Self {
        Self {
            bt: Some(SamplingSpec::default()),
            bt_sentences: None,
            kd: false,
            ft: false,
            noise: None,
            multi_bt: None,
            domain: Domain::Bio,
            beam: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneStage {
    pub updates: usize,
    pub lr: f64,
    pub domain: Domain,
    pub denoise: Option<NoiseSpec>,
}

impl Default for FinetuneStage {
    fn default() -> Self {
        Self { updates: 300, lr: 0.0005, domain: Domain::Bio, denoise: Some(NoiseSpec::default()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleStage {
    pub k: usize,
    pub lambda: f64,
    /// Additional architectures trained on the final corpus and fine-tuned to grow
    /// the candidate pool.
    pub extra_archs: Vec<Arch>,
    /// Extra target-denoising settings; each adds one fine-tuned candidate per
    /// architecture.
    pub pool_noise: Vec<NoiseSpec>,
}

impl Default for EnsembleStage {
    fn default() -> Self {
        let heavy = NoiseSpec { unk_rate: 0.2, delete_rate: 0.2, swap_rate: 0.2, swap_window: 3, seed: 1 };
        Self { k: 3, lambda: 0.1, extra_archs: vec![Arch::Aan], pool_noise: vec![heavy] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeStage {
    pub beam: usize,
    pub alpha: f64,
}

impl Default for DecodeStage {
    fn default() -> Self {
        Self { beam: 4, alpha: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub seed: u64,
    pub data: DataSource,
    pub filter: FilterRules,
    pub bpe: BpeStage,
    pub model: ModelStage,
    pub train: TrainStage,
    pub augment: AugmentStage,
    pub finetune: FinetuneStage,
    pub ensemble: EnsembleStage,
    pub decode: DecodeStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("mtforge-run"),
            seed: 1,
            data: DataSource::Toy(ToySpec::default()),
            filter: FilterRules::default(),
            bpe: BpeStage::default(),
            model: ModelStage::default(),
            train: TrainStage::default(),
            augment: AugmentStage::default(),
            finetune: FinetuneStage::default(),
            ensemble: EnsembleStage::default(),
            decode: DecodeStage::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.ensemble.k == 0 {
            return bad("ensemble.k must be positive");
        }
        if self.decode.beam == 0 || self.augment.beam == 0 {
            return bad("beam sizes must be positive");
        }
        if self.model.heads == 0 || self.model.hidden % self.model.heads != 0 {
            return bad("model.hidden must be divisible by model.heads");
        }
        if let Some(bt) = &self.augment.bt {
            bt.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let Some(n) = &self.finetune.denoise {
            n.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let Some(n) = &self.augment.noise {
            n.spec.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let DataSource::Files(f) = &self.data {
            let mut paths: Vec<&Path> = f.bitext.iter().map(|b| b.path.as_path()).collect();
            paths.extend([f.mono_tgt.as_path(), f.dev.as_path(), f.test.as_path()]);
            paths.extend(f.mono_src.iter().map(PathBuf::as_path));
            paths.extend(f.lexicon.iter().map(PathBuf::as_path));
            if f.bitext.is_empty() {
                return bad("data.bitext lists no files");
            }
            if let Some(missing) = paths.iter().find(|p| !p.exists()) {
                return Err(PipelineError::Config(format!("input {} does not exist", missing.display())));
            }
        }
        Ok(())
    }

    /// The part of the config a stage reads; its digest decides whether a finished stage
    /// can be reused.
    pub fn stage_slice(&self, stage: Stage) -> serde_json::Value {
        use serde_json::json;
        match stage {
            Stage::Prepare => json!({ "data": self.data }),
            Stage::Filter => json!({ "filter": self.filter }),
            Stage::Case | Stage::Tag | Stage::Report => json!({}),
            Stage::Bpe => json!({ "bpe": self.bpe }),
            Stage::Base => json!({ "model": self.model, "train": self.train }),
            Stage::Augment => json!({ "augment": self.augment, "model": self.model, "train": self.train }),
            Stage::Finetune => json!({ "finetune": self.finetune, "train": self.train }),
            Stage::Pool => json!({
                "extra_archs": self.ensemble.extra_archs,
                "pool_noise": self.ensemble.pool_noise,
                "decode": self.decode,
                "model": self.model,
                "train": self.train,
                "finetune": self.finetune,
            }),
            Stage::Select => json!({ "k": self.ensemble.k, "lambda": self.ensemble.lambda }),
            Stage::Decode => json!({ "decode": self.decode }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub sha256: String,
    pub short: String,
}

impl FileDigest {
    pub fn of_file(path: &Path) -> Result<Self, PipelineError> {
        let sha = sha256_hex(&fs::read(path)?);
        Ok(Self { short: short(&sha).to_string(), sha256: sha })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub wall_ms: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Output digests of every stage, keyed by path.
    pub fn output_digests(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|s| s.outputs.iter().map(|(p, d)| (p.clone(), d.sha256.clone()))).collect()
    }

    /// Digest over seeds, config digests and all input/output digests (wall times
    /// excluded).
    pub fn content_digest(&self) -> String {
        let stripped: Vec<_> = self
            .stages
            .iter()
            .map(|s| (&s.stage, s.seed, &s.config_digest, &s.inputs, &s.outputs))
            .collect();
        sha256_hex(serde_json::to_string(&stripped).expect("serializable").as_bytes())
    }
}

/// Exclusive ownership of a work directory for the lifetime of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    pub until: Option<Stage>,
    /// Progress lines go here when set.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub report: Option<AblationReport>,
}

fn digests(dir: &Path, paths: &[String]) -> Result<BTreeMap<String, FileDigest>, PipelineError> {
    paths.iter().map(|p| Ok((p.clone(), FileDigest::of_file(&dir.join(p))?))).collect()
}

/// Runs the configured stages in order.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let dir = cfg.work_dir.clone();
    let _lock = DirLock::acquire(&dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let previous = if opts.resume && manifest_path.exists() { Some(Manifest::load(&manifest_path)?) } else { None };
    let mut manifest = Manifest { tool_version: TOOL_VERSION.to_string(), seed: cfg.seed, stages: Vec::new() };
    let mut outcome = RunOutcome { manifest: Manifest::default(), ran: Vec::new(), skipped: Vec::new(), report: None };
    for stage in Stage::ALL {
        let inputs: BTreeMap<String, FileDigest> =
            manifest.stages.iter().flat_map(|s| s.outputs.iter().map(|(p, d)| (p.clone(), d.clone()))).collect();
        let config_digest = sha256_hex(cfg.stage_slice(stage).to_string().as_bytes());
        let seed = label_seed(cfg.seed, stage.name());
        let reusable = previous
            .as_ref()
            .and_then(|m| m.stage(stage.name()))
            .filter(|r| r.config_digest == config_digest && r.inputs == inputs && r.seed == seed)
            .cloned();
        if let Some(rec) = &reusable {
            if rec.outputs.keys().all(|p| dir.join(p).exists()) {
                for (p, d) in &rec.outputs {
                    if &FileDigest::of_file(&dir.join(p))? != d {
                        return Err(PipelineError::DigestMismatch { stage: stage.name().into(), path: p.clone() });
                    }
                }
                if opts.verbose {
                    eprintln!("[{stage}] up to date");
                }
                manifest.stages.push(rec.clone());
                manifest.save(&manifest_path)?;
                outcome.skipped.push(stage);
                if opts.until == Some(stage) {
                    break;
                }
                continue;
            }
        }
        if opts.verbose {
            eprintln!("[{stage}] running");
        }
        let start = Instant::now();
        let ctx = stages::Ctx { cfg, dir: &dir, seed, verbose: opts.verbose };
        let produced = stages::run_stage(stage, &ctx)
            .map_err(|e| PipelineError::StageFailure { stage: stage.name().into(), message: e.to_string() })?;
        let outputs = digests(&dir, &produced)?;
        if let Some(rec) = &reusable {
            if let Some((p, _)) = rec.outputs.iter().find(|(p, d)| outputs.get(*p) != Some(*d)) {
                return Err(PipelineError::DigestMismatch { stage: stage.name().into(), path: p.clone() });
            }
        }
        manifest.stages.push(StageRecord {
            stage: stage.name().into(),
            seed,
            config_digest,
            inputs,
            outputs,
            wall_ms: start.elapsed().as_millis() as u64,
            tool_version: TOOL_VERSION.to_string(),
        });
        manifest.save(&manifest_path)?;
        outcome.ran.push(stage);
        if opts.until == Some(stage) {
            break;
        }
    }
    let report_path = dir.join("report.json");
    if manifest.stage(Stage::Report.name()).is_some() && report_path.exists() {
        outcome.report = serde_json::from_str(&fs::read_to_string(report_path)?).ok();
    }
    outcome.manifest = manifest;
    Ok(outcome)
}

/// Writes `contents` to `dir/rel`, creating parent directories.
pub(crate) fn write_file(dir: &Path, rel: &str, contents: &[u8]) -> std::io::Result<String> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = File::create(path)?;
    f.write_all(contents)?;
    Ok(rel.to_string())
}
