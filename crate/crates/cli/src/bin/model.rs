use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtforge_cli::{
    build_vocabs, encode_pairs, finish, load_model, read_json, read_pairs, read_sentences, reversed, write_json,
    write_sentences, CliError, ModelSpec, Result,
};
use mtforge_core::augment::{tag_sentence, target_noise, NoiseSpec, TagSpec};
use mtforge_core::corpus::{Domain, Origin};
use mtforge_core::model::{
    grad_check, layer_plan, Ensemble, Example, LrSchedule, Strategy, Trainer, Transformer, TranslationModel, Translator,
};
use mtforge_core::pipeline::postprocess;
use mtforge_core::text_norm::{Lang, TokenSentence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Toy transformer training, fine-tuning, translation and gradient checking.
#[derive(Parser)]
#[command(name = "model", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch and write it to --ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Training log (losses per update) as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Continue training --init on in-domain data at a constant rate; writes --ckpt.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Translate one tokenized sentence per line. Several --ckpt form an ensemble.
    Translate {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, short)]
        input: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        /// Nucleus sampling with this p instead of beam search.
        #[arg(long, conflicts_with = "beam")]
        top_p: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prefix origin and domain tags, e.g. `REAL,BIO`.
        #[arg(long, value_parser = parse_tags)]
        tags: Option<TagSpec>,
        /// Undo subword joins and case markers on the output.
        #[arg(long)]
        postprocess: bool,
    },
    /// Compare backpropagated gradients with central differences.
    Gradcheck {
        /// Model shape; the network is randomly initialized with `seed`.
        #[arg(long, required_unless_present = "ckpt")]
        config: Option<PathBuf>,
        /// Check a trained checkpoint instead.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Exit with failure when the maximum relative error reaches this value.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn parse_tags(s: &str) -> std::result::Result<TagSpec, String> {
    let (o, d) = s.split_once(',').ok_or("expected ORIGIN,DOMAIN")?;
    Ok(TagSpec { origin: o.trim().parse::<Origin>().map_err(|e| e.to_string())?, domain: d.trim().parse::<Domain>().map_err(|e| e.to_string())? })
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    /// Labelled TSV corpus.
    train: PathBuf,
    /// Train target-to-source (a back-translation model); sources are never tagged.
    #[serde(default)]
    reverse: bool,
    #[serde(default = "yes")]
    tagged: bool,
    #[serde(default)]
    model: ModelSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FinetuneJob {
    train: PathBuf,
    #[serde(default = "default_updates")]
    updates: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default = "default_seed")]
    seed: u64,
    /// Only pairs with this domain and origin REAL.
    domain: Option<Domain>,
    /// Corrupt the decoder input (target-side denoising).
    denoise: Option<NoiseSpec>,
    #[serde(default = "yes")]
    tagged: bool,
}

fn default_updates() -> usize {
    300
}

fn default_lr() -> f64 {
    0.0005
}

fn default_seed() -> u64 {
    1
}

#[derive(Deserialize)]
#[serde(default)]
struct ShapeJob {
    #[serde(flatten)]
    model: ModelSpec,
    src_vocab: usize,
    tgt_vocab: usize,
}

impl Default for ShapeJob {
    fn default() -> Self {
        Self { model: ModelSpec::default(), src_vocab: 12, tgt_vocab: 12 }
    }
}

#[derive(Serialize)]
struct Log {
    examples: usize,
    updates: usize,
    losses: Vec<f64>,
}

fn save(m: &TranslationModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(m.save(path)?)
}

fn report(examples: usize, losses: Vec<f64>, log: Option<&Path>) -> Result<()> {
    let k = losses.len().min(20);
    if k > 0 {
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        eprintln!("model: {} updates, loss {:.3} -> {:.3}", losses.len(), mean(&losses[..k]), mean(&losses[losses.len() - k..]));
    }
    match log {
        Some(p) => write_json(Some(p), &Log { examples, updates: losses.len(), losses }),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, ckpt, log } => {
            let job: TrainJob = read_json(&config)?;
            let mut pairs = read_pairs(&job.train)?;
            if job.reverse {
                pairs = reversed(&pairs);
            }
            let vocabs = build_vocabs(&pairs, false);
            let tagged = job.tagged && !job.reverse;
            let (m, l) = job.model.train(&pairs, vocabs, tagged, job.model.seed)?;
            save(&m, &ckpt)?;
            report(pairs.len(), l.losses, log.as_deref())?;
        }
        Cmd::Finetune { config, init, ckpt, log } => {
            let job: FinetuneJob = read_json(&config)?;
            let start = load_model(&init)?;
            let pairs: Vec<_> = read_pairs(&job.train)?
                .into_iter()
                .filter(|p| job.domain.map_or(true, |d| p.domain == d && p.origin == Origin::Real))
                .collect();
            let data = encode_pairs(&pairs, &start.src_vocab, &start.tgt_vocab, start.net.config.max_len, job.tagged)?;
            if data.is_empty() {
                return Err(CliError::Usage("no fine-tuning pairs".into()));
            }
            let TranslationModel { net, src_vocab, tgt_vocab } = start;
            let mut trainer = Trainer::new(net, mtforge_core::model::TrainHyper::desk());
            let noise = job.denoise.map(|spec| target_noise(tgt_vocab.clone(), spec));
            let noise_ref = noise.as_ref().map(|f| f as &(dyn Fn(&Example, u64) -> Vec<usize> + Sync));
            let l = trainer.train(&data, job.updates, LrSchedule::Constant { lr: job.lr }, job.seed, noise_ref)?;
            save(&TranslationModel { net: trainer.into_model(), src_vocab, tgt_vocab }, &ckpt)?;
            report(data.len(), l.losses, log.as_deref())?;
        }
        Cmd::Translate { ckpt, input, output, beam, alpha, top_p, seed, tags, postprocess: post } => {
            let mut models = ckpt.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let model: Box<dyn Translator> =
                if models.len() == 1 { Box::new(models.remove(0)) } else { Box::new(Ensemble::new(models)?) };
            let strategy = match top_p {
                Some(p) if p > 0.0 && p <= 1.0 => Strategy::TopP { p },
                Some(p) => return Err(CliError::Usage(format!("--top-p {p} must lie in (0, 1]"))),
                None if beam == 0 => return Err(CliError::Usage("--beam must be at least 1".into())),
                None => Strategy::Beam { size: beam, alpha },
            };
            let mut out = Vec::new();
            for (i, s) in read_sentences(input.as_deref(), Lang::Zh)?.iter().enumerate() {
                let src = match tags {
                    Some(t) => tag_sentence(s, t)?,
                    None => s.clone(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(mtforge_core::digest::item_seed(seed, i as u64));
                let toks = model.translate(&src.tokens, strategy, &mut rng)?;
                out.push(if post { postprocess(&toks) } else { TokenSentence::new(toks, Lang::En) });
            }
            write_sentences(output.as_deref(), &out)?;
        }
        Cmd::Gradcheck { config, ckpt, n, eps, tol } => {
            let (net, seed) = match (&ckpt, &config) {
                (Some(p), _) => (load_model(p)?.net, 0),
                (None, Some(c)) => {
                    let job: ShapeJob = read_json(c)?;
                    let s = &job.model.shape;
                    let mut cfg = s.config(s.arch, job.src_vocab, job.tgt_vocab);
                    cfg.dec_plan = layer_plan(s.arch, s.dec_layers);
                    (Transformer::new(cfg, job.model.seed)?, job.model.seed)
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (sv, tv) = (net.config.src_vocab, net.config.tgt_vocab);
            let len = net.config.max_len.clamp(2, 7);
            let ex = Example::new(
                (0..len - 1).map(|_| rng.gen_range(1..sv.max(2))).collect(),
                (0..len - 1).map(|_| rng.gen_range(1..tv.max(2))).collect(),
            );
            let g = grad_check(&net, &ex, n, eps, seed)?;
            write_json(None, &g)?;
            if !(g.max_rel_err < tol) {
                return Err(CliError::Usage(format!("max relative error {:e} >= {tol:e}", g.max_rel_err)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    finish("model", run(Cli::parse()))
}
