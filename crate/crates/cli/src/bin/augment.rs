use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtforge_cli::{
    finish, load_model, read_json, read_pairs, read_sentences, reversed, write_json, write_pairs, CliError, ModelSpec, Result,
};
use mtforge_core::augment::{
    audit, back_translate, distill, forward_translate, iterate_bt, noised_copies, strip_tags, tag_sentence, tagged_source,
    AugmentError, AugmentManifest, MultiBtConfig, NoiseSpec, RoundManifest, RoundTrainer, SamplingSpec, TagSpec,
};
use mtforge_core::corpus::{Domain, Origin, SentencePair};
use mtforge_core::digest::{item_seed, pairs_digest, sentences_digest, sha256_hex};
use mtforge_core::model::{Ensemble, Translator, Vocab};
use mtforge_core::text_norm::Lang;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Synthetic training data. Each operation reads a JSON job spec, writes a labelled TSV
/// corpus and a JSON manifest (inputs, seed, strategy, output digest).
#[derive(Parser)]
#[command(name = "augment", version)]
struct Cli {
    #[command(subcommand)]
    op: Op,
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Overrides the seed of the job's sampling or noise settings.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Op {
    /// Noised copies of a fraction of a corpus (source side noised, origin NOISE).
    Noise,
    /// Prefix every source with its origin and domain tags.
    Tag,
    /// Back-translate target-side monolingual text.
    Bt,
    /// Forward-translate source-side monolingual text.
    Ft,
    /// Replace bitext targets with a teacher's translations.
    Kd,
    /// Iterated back-translation with freshly trained models each round.
    MultiBt,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Noise => "noise",
            Op::Tag => "tag",
            Op::Bt => "bt",
            Op::Ft => "ft",
            Op::Kd => "kd",
            Op::MultiBt => "multi-bt",
        }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn bio() -> Domain {
    Domain::Bio
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseJob {
    input: PathBuf,
    output: PathBuf,
    manifest: Option<PathBuf>,
    #[serde(default)]
    noise: NoiseSpec,
    #[serde(default = "one")]
    fraction: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TagJob {
    input: PathBuf,
    output: PathBuf,
    manifest: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TranslateJob {
    /// Monolingual text (bt, ft) or a TSV corpus (kd).
    input: PathBuf,
    /// One checkpoint, or several decoded as an ensemble.
    models: Vec<PathBuf>,
    output: PathBuf,
    manifest: Option<PathBuf>,
    #[serde(default)]
    sampling: SamplingSpec,
    #[serde(default = "bio")]
    domain: Domain,
    /// Tag model inputs the way the forward models were trained (ft, kd).
    #[serde(default = "yes")]
    tag_inputs: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MultiBtJob {
    bitext: PathBuf,
    mono_tgt: PathBuf,
    mono_src: Option<PathBuf>,
    output: PathBuf,
    manifest: Option<PathBuf>,
    #[serde(default)]
    rounds: Option<usize>,
    shard_size: usize,
    #[serde(default)]
    sampling: SamplingSpec,
    #[serde(default = "bio")]
    domain: Domain,
    #[serde(default)]
    model: ModelSpec,
}

#[derive(Serialize)]
struct MultiBtManifest {
    #[serde(flatten)]
    summary: AugmentManifest,
    rounds: Vec<RoundManifest>,
}

fn job<T: DeserializeOwned>(spec: Option<&Path>) -> Result<T> {
    read_json(spec.ok_or_else(|| CliError::Usage("--spec FILE.json is required".into()))?)
}

fn manifest_path(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| out.with_extension("manifest.json"))
}

fn file_digest(p: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(p).map_err(|source| CliError::File { path: p.to_path_buf(), source })?))
}

fn translator(paths: &[PathBuf]) -> Result<Box<dyn Translator>> {
    let mut models = paths.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    match models.len() {
        0 => Err(CliError::Usage("`models` lists no checkpoint".into())),
        1 => Ok(Box::new(models.remove(0))),
        _ => Ok(Box::new(Ensemble::new(models)?)),
    }
}

fn untag(pairs: Vec<SentencePair>) -> Vec<SentencePair> {
    pairs.into_iter().map(|p| SentencePair { src: strip_tags(&p.src).1, ..p }).collect()
}

fn with_models(mut m: AugmentManifest, paths: &[PathBuf]) -> Result<AugmentManifest> {
    for (i, p) in paths.iter().enumerate() {
        m = m.input(&format!("model{i}"), file_digest(p)?);
    }
    Ok(m)
}

struct Rounds<'a> {
    spec: &'a ModelSpec,
    seed: u64,
    sv: Vocab,
    /// Source vocabulary without tag tokens; the reverse model generates from it.
    sv_plain: Vocab,
    tv: Vocab,
}

impl Rounds<'_> {
    fn train(&self, pairs: &[SentencePair], reverse: bool, round: usize) -> std::result::Result<Box<dyn Translator>, AugmentError> {
        let seed = item_seed(self.seed, 2 * round as u64 + reverse as u64);
        let res = if reverse {
            self.spec.train(&reversed(pairs), (self.tv.clone(), self.sv_plain.clone()), false, seed)
        } else {
            self.spec.train(pairs, (self.sv.clone(), self.tv.clone()), true, seed)
        };
        eprintln!("augment: round {round} {} model trained", if reverse { "reverse" } else { "forward" });
        res.map(|(m, _)| Box::new(m) as Box<dyn Translator>).map_err(|e| AugmentError::InvalidSpec(e.to_string()))
    }
}

impl RoundTrainer for Rounds<'_> {
    fn reverse(&mut self, corpus: &[SentencePair], round: usize) -> std::result::Result<Box<dyn Translator>, AugmentError> {
        self.train(corpus, true, round)
    }

    fn forward(&mut self, corpus: &[SentencePair], round: usize) -> std::result::Result<Box<dyn Translator>, AugmentError> {
        self.train(corpus, false, round)
    }
}

fn run(cli: Cli) -> Result<()> {
    let spec = cli.spec.as_deref();
    let (output, manifest_file, manifest): (PathBuf, PathBuf, serde_json::Value) = match cli.op {
        Op::Noise => {
            let j: NoiseJob = job(spec)?;
            let noise = NoiseSpec { seed: cli.seed.unwrap_or(j.noise.seed), ..j.noise };
            noise.validate()?;
            let input = read_pairs(&j.input)?;
            let out = noised_copies(&input, &noise, j.fraction);
            write_pairs(Some(&j.output), &out)?;
            let mut m = AugmentManifest::new("noise", noise.seed, &noise, &out).input("input", pairs_digest(&input));
            m.metadata.insert("fraction".into(), j.fraction.to_string());
            (j.output.clone(), manifest_path(&j.output, j.manifest), serde_json::to_value(m).expect("manifest"))
        }
        Op::Tag => {
            let j: TagJob = job(spec)?;
            let input = untag(read_pairs(&j.input)?);
            let out = input
                .iter()
                .map(|p| Ok(SentencePair { src: tagged_source(p)?, ..p.clone() }))
                .collect::<std::result::Result<Vec<_>, AugmentError>>()?;
            let report = audit(&out);
            if !report.ok() {
                return Err(CliError::Usage(format!("tag audit failed at pairs {:?}", report.mismatches)));
            }
            write_pairs(Some(&j.output), &out)?;
            let mut m = AugmentManifest::new("tag", cli.seed.unwrap_or(0), &report.counts, &out).input("input", pairs_digest(&input));
            m.metadata.insert("audit".into(), "ok".into());
            (j.output.clone(), manifest_path(&j.output, j.manifest), serde_json::to_value(m).expect("manifest"))
        }
        Op::Bt | Op::Ft | Op::Kd => {
            let j: TranslateJob = job(spec)?;
            let sampling = SamplingSpec { seed: cli.seed.unwrap_or(j.sampling.seed), ..j.sampling.clone() };
            let model = translator(&j.models)?;
            let (out, m) = match cli.op {
                Op::Bt => {
                    let mono = read_sentences(Some(&j.input), Lang::En)?;
                    let out = back_translate(&mono, model.as_ref(), &sampling, j.domain)?;
                    let m = AugmentManifest::new("bt", sampling.seed, &sampling, &out).input("mono_tgt", sentences_digest(&mono));
                    (out, m)
                }
                Op::Ft => {
                    let mono = read_sentences(Some(&j.input), Lang::Zh)?;
                    let tags = TagSpec { origin: Origin::Real, domain: j.domain };
                    let fed = if j.tag_inputs {
                        mono.iter().map(|s| tag_sentence(s, tags)).collect::<std::result::Result<Vec<_>, _>>()?
                    } else {
                        mono.clone()
                    };
                    let out = untag(forward_translate(&fed, model.as_ref(), &sampling, j.domain)?);
                    let m = AugmentManifest::new("ft", sampling.seed, &sampling, &out).input("mono_src", sentences_digest(&mono));
                    (out, m)
                }
                _ => {
                    let bitext = untag(read_pairs(&j.input)?);
                    let fed = if j.tag_inputs {
                        bitext
                            .iter()
                            .map(|p| Ok(SentencePair { src: tagged_source(p)?, ..p.clone() }))
                            .collect::<std::result::Result<Vec<_>, AugmentError>>()?
                    } else {
                        bitext.clone()
                    };
                    let out = untag(distill(&fed, model.as_ref(), &sampling)?);
                    let mut m = AugmentManifest::new("kd", sampling.seed, &sampling, &out).input("bitext", pairs_digest(&bitext));
                    m.metadata.insert("distilled".into(), "true".into());
                    (out, m)
                }
            };
            write_pairs(Some(&j.output), &out)?;
            let m = with_models(m, &j.models)?;
            (j.output.clone(), manifest_path(&j.output, j.manifest), serde_json::to_value(m).expect("manifest"))
        }
        Op::MultiBt => {
            let j: MultiBtJob = job(spec)?;
            let seed = cli.seed.unwrap_or(j.sampling.seed);
            let bitext = untag(read_pairs(&j.bitext)?);
            let mono_tgt = read_sentences(Some(&j.mono_tgt), Lang::En)?;
            let mono_src = j.mono_src.as_deref().map(|p| read_sentences(Some(p), Lang::Zh)).transpose()?;
            let rounds = j.rounds.unwrap_or(2);
            let cfg = MultiBtConfig {
                rounds,
                shard_size: j.shard_size,
                beam_size: j.sampling.beam_size,
                p_low: j.sampling.p_low,
                p_high: j.sampling.p_high,
                seed,
                domain: j.domain,
            };
            let tags: Vec<String> =
                Origin::ALL.iter().map(|o| o.tag().to_string()).chain(Domain::ALL.iter().map(|d| d.tag().to_string())).collect();
            let src_tokens = || bitext.iter().flat_map(|p| &p.src.tokens).chain(mono_src.iter().flatten().flat_map(|s| &s.tokens));
            let sv = Vocab::build(src_tokens().chain(&tags));
            let sv_plain = Vocab::build(src_tokens());
            let tv = Vocab::build(bitext.iter().flat_map(|p| &p.tgt.tokens).chain(mono_tgt.iter().flat_map(|s| &s.tokens)));
            let mut trainer = Rounds { spec: &j.model, seed: item_seed(seed, 1 << 32), sv, sv_plain, tv };
            let (corpus, round_log) = iterate_bt(&bitext, mono_src.as_deref(), &mono_tgt, &cfg, &mut trainer)?;
            let pseudo = &corpus[bitext.len()..];
            write_pairs(Some(&j.output), pseudo)?;
            let mut summary = AugmentManifest::new("multi-bt", seed, &cfg, pseudo)
                .input("bitext", pairs_digest(&bitext))
                .input("mono_tgt", sentences_digest(&mono_tgt));
            if let Some(src) = &mono_src {
                summary = summary.input("mono_src", sentences_digest(src));
            }
            summary.metadata.insert("model".into(), serde_json::to_string(&j.model).expect("model spec"));
            let m = MultiBtManifest { summary, rounds: round_log };
            (j.output.clone(), manifest_path(&j.output, j.manifest), serde_json::to_value(m).expect("manifest"))
        }
    };
    write_json(Some(&manifest_file), &manifest)?;
    eprintln!("augment {}: wrote {} and {}", cli.op.name(), output.display(), manifest_file.display());
    Ok(())
}

fn main() -> ExitCode {
    finish("augment", run(Cli::parse()))
}
