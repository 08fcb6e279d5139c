use std::error::Error;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::report::{AblationReport, ReportRow};
use super::{toy, write_file, DataSource, PipelineConfig, Stage};
use crate::augment::{
    audit, back_translate, distill, forward_translate, iterate_bt, noised_copies, strip_tags,
    tag_sentence, tagged_source, target_noise, AugmentError, AugmentManifest, RoundTrainer, SamplingMode, SamplingSpec, TagSpec,
};
use crate::corpus::{is_tag, read_lines, read_tsv, write_lines, write_tsv, Domain, Origin, SentencePair};
use crate::digest::{label_seed, pairs_digest, sentences_digest};
use crate::evalsel::{bleu, corpus_bleu, objective, select_candidates, self_bleu, BleuScore, CandidateModel, SelfBleuMatrix, Smoothing};
use crate::filter::run_filters;
use crate::model::{
    Arch, Ensemble, Example, LrSchedule, ModelError, Strategy, Trainer, Transformer, TranslationModel, Translator, Vocab,
};
use crate::subword::{bpe_apply, bpe_learn, bpe_undo_lenient, default_protected, BpeModel};
use crate::text_norm::{
    detokenize_en, mark_case, normalize_punct, segment_zh, tokenize_en, unmark_case_lenient, Lang, Lexicon, RawSentence,
    TokenSentence,
};

type BoxError = Box<dyn Error + Send + Sync>;
type StageResult = Result<Vec<String>, BoxError>;

pub(crate) struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub dir: &'a Path,
    pub seed: u64,
    pub verbose: bool,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("  {msg}");
        }
    }

    fn sub_seed(&self, label: &str) -> u64 {
        label_seed(self.seed, label)
    }

    fn read_pairs(&self, rel: &str) -> Result<Vec<SentencePair>, BoxError> {
        Ok(read_tsv(BufReader::new(File::open(self.path(rel))?), Origin::Real, Domain::Bio)?)
    }

    fn write_pairs(&self, rel: &str, pairs: &[SentencePair], labels: bool) -> Result<String, BoxError> {
        let mut buf = Vec::new();
        write_tsv(&mut buf, pairs, labels)?;
        Ok(write_file(self.dir, rel, &buf)?)
    }

    fn read_sents(&self, rel: &str, lang: Lang) -> Result<Vec<TokenSentence>, BoxError> {
        Ok(read_lines(BufReader::new(File::open(self.path(rel))?), lang)?)
    }

    fn write_sents(&self, rel: &str, sents: &[TokenSentence]) -> Result<String, BoxError> {
        let mut buf = Vec::new();
        write_lines(&mut buf, sents)?;
        Ok(write_file(self.dir, rel, &buf)?)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<String, BoxError> {
        Ok(write_file(self.dir, rel, serde_json::to_string_pretty(value)?.as_bytes())?)
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T, BoxError> {
        Ok(serde_json::from_str(&fs::read_to_string(self.path(rel))?)?)
    }

    fn load_model(&self, rel: &str) -> Result<TranslationModel, BoxError> {
        Ok(TranslationModel::load(&self.path(rel))?)
    }

    fn save_model(&self, rel: &str, m: &TranslationModel) -> Result<String, BoxError> {
        if let Some(parent) = self.path(rel).parent() {
            fs::create_dir_all(parent)?;
        }
        m.save(&self.path(rel))?;
        Ok(rel.to_string())
    }
}

pub(crate) fn run_stage(stage: Stage, ctx: &Ctx<'_>) -> StageResult {
    match stage {
        Stage::Prepare => prepare(ctx),
        Stage::Filter => filter(ctx),
        Stage::Case => case(ctx),
        Stage::Bpe => bpe(ctx),
        Stage::Tag => tag(ctx),
        Stage::Base => base(ctx),
        Stage::Augment => augment(ctx),
        Stage::Finetune => finetune(ctx),
        Stage::Pool => pool(ctx),
        Stage::Select => select(ctx),
        Stage::Decode => decode(ctx),
        Stage::Report => report(ctx),
    }
}

fn clean(text: &str) -> String {
    text.replace(['\t', '\r', '\n'], " ")
}

fn text_file(lines: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out.into_bytes()
}

fn read_raw_tsv(path: &Path) -> Result<Vec<Vec<String>>, BoxError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cols.len() < 2 {
            return Err(format!("{}:{}: expected a tab-separated pair", path.display(), i + 1).into());
        }
        rows.push(cols);
    }
    Ok(rows)
}

fn read_raw_lines(path: &Path) -> Result<Vec<String>, BoxError> {
    Ok(fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn prepare(ctx: &Ctx<'_>) -> StageResult {
    let (bitext, mono_tgt, mono_src, dev, test, lexicon): (Vec<(String, String, Domain)>, _, _, _, _, _) =
        match &ctx.cfg.data {
            DataSource::Toy(spec) => {
                let d = toy::generate(spec, ctx.sub_seed("toy"));
                (d.bitext, d.mono_tgt, d.mono_src, d.dev, d.test, d.lexicon)
            }
            DataSource::Files(f) => {
                let mut bitext = Vec::new();
                for b in &f.bitext {
                    bitext.extend(read_raw_tsv(&b.path)?.into_iter().map(|c| (c[0].clone(), c[1].clone(), b.domain)));
                }
                let pairs = |p: &Path| -> Result<Vec<(String, String)>, BoxError> {
                    Ok(read_raw_tsv(p)?.into_iter().map(|c| (c[0].clone(), c[1].clone())).collect())
                };
                let mono_src = match &f.mono_src {
                    Some(p) => read_raw_lines(p)?,
                    None => Vec::new(),
                };
                let lexicon = match &f.lexicon {
                    Some(p) => read_raw_lines(p)?,
                    None => Vec::new(),
                };
                (bitext, read_raw_lines(&f.mono_tgt)?, mono_src, pairs(&f.dev)?, pairs(&f.test)?, lexicon)
            }
        };
    let d = ctx.dir;
    let rows = bitext.iter().map(|(s, t, dom)| format!("{}\t{}\t{}\t{}", clean(s), clean(t), Origin::Real, dom));
    let held = |v: &[(String, String)]| text_file(v.iter().map(|(s, t)| format!("{}\t{}", clean(s), clean(t))));
    Ok(vec![
        write_file(d, "raw/bitext.tsv", &text_file(rows))?,
        write_file(d, "raw/mono_tgt.txt", &text_file(mono_tgt.iter().map(|s| clean(s))))?,
        write_file(d, "raw/mono_src.txt", &text_file(mono_src.iter().map(|s| clean(s))))?,
        write_file(d, "raw/dev.tsv", &held(&dev))?,
        write_file(d, "raw/test.tsv", &held(&test))?,
        write_file(d, "raw/lexicon.txt", &text_file(lexicon))?,
    ])
}

#[derive(Debug, Serialize, Deserialize)]
struct FilterStageReport {
    empty_after_tokenization: usize,
    rules: crate::filter::FilterReport,
}

fn filter(ctx: &Ctx<'_>) -> StageResult {
    let lex = Lexicon::parse(&fs::read_to_string(ctx.path("raw/lexicon.txt"))?);
    let zh = |t: &str| segment_zh(&normalize_punct(&RawSentence::new(t, Lang::Zh)), &lex);
    let en = |t: &str| tokenize_en(&normalize_punct(&RawSentence::new(t, Lang::En)));
    let mut pairs = Vec::new();
    let mut empty = 0;
    for c in read_raw_tsv(&ctx.path("raw/bitext.tsv"))? {
        let (src, tgt) = (zh(&c[0]), en(&c[1]));
        if src.is_empty() || tgt.is_empty() {
            empty += 1;
            continue;
        }
        let origin: Origin = c.get(2).map(|s| s.parse()).transpose()?.unwrap_or(Origin::Real);
        let domain: Domain = c.get(3).map(|s| s.parse()).transpose()?.unwrap_or(Domain::Bio);
        pairs.push(SentencePair { src, tgt, origin, domain });
    }
    let outcome = run_filters(&pairs, &ctx.cfg.filter, None)?;
    ctx.log(&format!("filter kept {} of {}", outcome.report.kept, outcome.report.total));
    if outcome.kept.is_empty() {
        return Err("no bitext survives filtering".into());
    }
    let mut out = vec![
        ctx.write_pairs("tok/bitext.tsv", &outcome.kept, true)?,
        ctx.write_json("tok/filter_report.json", &FilterStageReport { empty_after_tokenization: empty, rules: outcome.report })?,
    ];
    if let Some(m) = &outcome.align_model {
        let mut buf = Vec::new();
        m.write(&mut buf)?;
        out.push(write_file(ctx.dir, "tok/align.model1", &buf)?);
    }
    let mono_tgt: Vec<TokenSentence> =
        read_raw_lines(&ctx.path("raw/mono_tgt.txt"))?.iter().map(|t| en(t)).filter(|s| !s.is_empty()).collect();
    let mono_src: Vec<TokenSentence> =
        read_raw_lines(&ctx.path("raw/mono_src.txt"))?.iter().map(|t| zh(t)).filter(|s| !s.is_empty()).collect();
    out.push(ctx.write_sents("tok/mono_tgt.txt", &mono_tgt)?);
    out.push(ctx.write_sents("tok/mono_src.txt", &mono_src)?);
    for split in ["dev", "test"] {
        let held: Vec<SentencePair> = read_raw_tsv(&ctx.path(&format!("raw/{split}.tsv")))?
            .iter()
            .map(|c| SentencePair { src: zh(&c[0]), tgt: en(&c[1]), origin: Origin::Real, domain: Domain::Bio })
            .collect();
        if held.iter().any(|p| p.src.is_empty() || p.tgt.is_empty()) {
            return Err(format!("{split} set has an empty line").into());
        }
        out.push(ctx.write_pairs(&format!("tok/{split}.tsv"), &held, false)?);
    }
    Ok(out)
}

fn case(ctx: &Ctx<'_>) -> StageResult {
    let mut bitext = ctx.read_pairs("tok/bitext.tsv")?;
    for p in &mut bitext {
        p.tgt = mark_case(&p.tgt)?;
    }
    let mono = ctx.read_sents("tok/mono_tgt.txt", Lang::En)?.iter().map(mark_case).collect::<Result<Vec<_>, _>>()?;
    Ok(vec![ctx.write_pairs("case/bitext.tsv", &bitext, true)?, ctx.write_sents("case/mono_tgt.txt", &mono)?])
}

fn bpe(ctx: &Ctx<'_>) -> StageResult {
    let bitext = ctx.read_pairs("case/bitext.tsv")?;
    let mono_tgt = ctx.read_sents("case/mono_tgt.txt", Lang::En)?;
    let mono_src = ctx.read_sents("tok/mono_src.txt", Lang::Zh)?;
    let protected = default_protected();
    let src_corpus: Vec<TokenSentence> = bitext.iter().map(|p| p.src.clone()).chain(mono_src.iter().cloned()).collect();
    let tgt_corpus: Vec<TokenSentence> = bitext.iter().map(|p| p.tgt.clone()).chain(mono_tgt.iter().cloned()).collect();
    let src_model = bpe_learn(&src_corpus, ctx.cfg.bpe.src_ops, &protected)?;
    let tgt_model = bpe_learn(&tgt_corpus, ctx.cfg.bpe.tgt_ops, &protected)?;
    let save = |rel: &str, m: &BpeModel| -> Result<String, BoxError> {
        let mut buf = Vec::new();
        m.write(&mut buf)?;
        Ok(write_file(ctx.dir, rel, &buf)?)
    };
    let apply_all = |v: &[TokenSentence], m: &BpeModel| -> Vec<TokenSentence> { v.par_iter().map(|s| bpe_apply(s, m)).collect() };
    let pairs: Vec<SentencePair> = bitext
        .par_iter()
        .map(|p| SentencePair { src: bpe_apply(&p.src, &src_model), tgt: bpe_apply(&p.tgt, &tgt_model), ..p.clone() })
        .collect();
    let mut out = vec![
        save("bpe/src.codes", &src_model)?,
        save("bpe/tgt.codes", &tgt_model)?,
        ctx.write_pairs("bpe/bitext.tsv", &pairs, true)?,
        ctx.write_sents("bpe/mono_tgt.txt", &apply_all(&mono_tgt, &tgt_model))?,
        ctx.write_sents("bpe/mono_src.txt", &apply_all(&mono_src, &src_model))?,
    ];
    for split in ["dev", "test"] {
        let src: Vec<TokenSentence> = ctx.read_pairs(&format!("tok/{split}.tsv"))?.into_iter().map(|p| p.src).collect();
        out.push(ctx.write_sents(&format!("bpe/{split}.src"), &apply_all(&src, &src_model))?);
    }
    Ok(out)
}

/// Tags every evaluation source carries.
const EVAL_TAGS: TagSpec = TagSpec { origin: Origin::Real, domain: Domain::Bio };

fn tag(ctx: &Ctx<'_>) -> StageResult {
    let tagged = ctx
        .read_pairs("bpe/bitext.tsv")?
        .into_iter()
        .map(|p| Ok(SentencePair { src: tagged_source(&p)?, ..p }))
        .collect::<Result<Vec<_>, AugmentError>>()?;
    let report = audit(&tagged);
    if !report.ok() {
        return Err(format!("tag audit found {} mismatched pairs", report.mismatches.len()).into());
    }
    let mut out = vec![ctx.write_pairs("tag/bitext.tsv", &tagged, true)?, ctx.write_json("tag/audit.json", &report)?];
    for split in ["dev", "test"] {
        let src = ctx
            .read_sents(&format!("bpe/{split}.src"), Lang::Zh)?
            .iter()
            .map(|s| tag_sentence(s, EVAL_TAGS))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(ctx.write_sents(&format!("tag/{split}.src"), &src)?);
    }
    Ok(out)
}

fn examples(src_vocab: &Vocab, tgt_vocab: &Vocab, pairs: &[(&[String], &[String])], max_len: usize) -> Vec<Example> {
    pairs
        .iter()
        .filter(|(s, t)| !s.is_empty() && s.len() <= max_len && t.len() < max_len)
        .map(|(s, t)| Example::new(src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect()
}

fn tagged_examples(pairs: &[SentencePair], sv: &Vocab, tv: &Vocab, max_len: usize) -> Result<Vec<Example>, BoxError> {
    let tagged = pairs
        .iter()
        .map(|p| match strip_tags(&p.src).0 {
            Some(_) => Ok(p.src.clone()),
            None => tagged_source(p),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let view: Vec<(&[String], &[String])> = tagged.iter().zip(pairs).map(|(s, p)| (&s.tokens[..], &p.tgt.tokens[..])).collect();
    Ok(examples(sv, tv, &view, max_len))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    label: String,
    examples: usize,
    updates: usize,
    first_loss: f64,
    last_loss: f64,
}

fn train_from_scratch(
    ctx: &Ctx<'_>,
    label: &str,
    arch: Arch,
    vocabs: (&Vocab, &Vocab),
    data: &[Example],
    updates: usize,
) -> Result<(TranslationModel, TrainSummary), BoxError> {
    let (sv, tv) = vocabs;
    let cfg = ctx.cfg.model.config(arch, sv.len(), tv.len());
    let net = Transformer::new(cfg, ctx.sub_seed(&format!("{label}/init")))?;
    let mut trainer = Trainer::new(net, ctx.cfg.train.hyper.clone());
    trainer.parallel = ctx.cfg.train.parallel;
    let log = trainer.train(data, updates, LrSchedule::InverseSqrt, ctx.sub_seed(&format!("{label}/batches")), None)?;
    let summary = summarize(label, data.len(), &log.losses);
    ctx.log(&format!("{label}: {} updates, loss {:.3} -> {:.3}", updates, summary.first_loss, summary.last_loss));
    Ok((TranslationModel { net: trainer.into_model(), src_vocab: sv.clone(), tgt_vocab: tv.clone() }, summary))
}

fn summarize(label: &str, examples: usize, losses: &[f64]) -> TrainSummary {
    let window = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let k = losses.len().min(20);
    TrainSummary {
        label: label.to_string(),
        examples,
        updates: losses.len(),
        first_loss: window(&losses[..k]),
        last_loss: window(&losses[losses.len() - k..]),
    }
}

fn reversed(pairs: &[SentencePair]) -> Vec<(&[String], &[String])> {
    pairs.iter().map(|p| (&p.tgt.tokens[..], &p.src.tokens[..])).collect()
}

fn base(ctx: &Ctx<'_>) -> StageResult {
    let tagged = ctx.read_pairs("tag/bitext.tsv")?;
    let plain = ctx.read_pairs("bpe/bitext.tsv")?;
    let mono_src = ctx.read_sents("bpe/mono_src.txt", Lang::Zh)?;
    let mono_tgt = ctx.read_sents("bpe/mono_tgt.txt", Lang::En)?;
    let tags: Vec<String> = Origin::ALL
        .iter()
        .map(|o| o.tag().to_string())
        .chain(Domain::ALL.iter().map(|d| d.tag().to_string()))
        .collect();
    let sv = Vocab::build(tagged.iter().flat_map(|p| &p.src.tokens).chain(mono_src.iter().flat_map(|s| &s.tokens)).chain(&tags));
    let tv = Vocab::build(plain.iter().flat_map(|p| &p.tgt.tokens).chain(mono_tgt.iter().flat_map(|s| &s.tokens)));
    let sv_plain = Vocab::build(plain.iter().flat_map(|p| &p.src.tokens).chain(mono_src.iter().flat_map(|s| &s.tokens)));
    ctx.log(&format!("vocab: {} source, {} target", sv.len(), tv.len()));
    let max_len = ctx.cfg.model.max_len;
    let arch = ctx.cfg.model.arch;
    let fwd = tagged_examples(&tagged, &sv, &tv, max_len)?;
    let (base, s1) = train_from_scratch(ctx, "base", arch, (&sv, &tv), &fwd, ctx.cfg.train.base_updates)?;
    let rev = examples(&tv, &sv_plain, &reversed(&plain), max_len);
    let (reverse, s2) = train_from_scratch(ctx, "reverse", arch, (&tv, &sv_plain), &rev, ctx.cfg.train.reverse_updates)?;
    Ok(vec![
        ctx.save_model("models/base.ckpt", &base)?,
        ctx.save_model("models/reverse.ckpt", &reverse)?,
        ctx.write_json("models/train_log.json", &vec![s1, s2])?,
    ])
}

/// One cumulative system of the augmentation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AugRow {
    label: String,
    slug: String,
    checkpoint: String,
    corpus_size: usize,
    corpus_digest: String,
}

fn strip_all(pairs: Vec<SentencePair>) -> Vec<SentencePair> {
    pairs.into_iter().map(|p| SentencePair { src: strip_tags(&p.src).1, ..p }).collect()
}

struct RoundModels<'a, 'c> {
    ctx: &'a Ctx<'c>,
    sv: Vocab,
    /// Tag-free source vocabulary the reverse models generate from.
    sv_plain: Vocab,
    tv: Vocab,
}

impl RoundTrainer for RoundModels<'_, '_> {
    fn reverse(&mut self, corpus: &[SentencePair], round: usize) -> Result<Box<dyn Translator>, AugmentError> {
        let data = examples(&self.tv, &self.sv_plain, &reversed(corpus), self.ctx.cfg.model.max_len);
        let label = format!("multi-bt/{round}/reverse");
        let (m, _) = train_from_scratch(self.ctx, &label, self.ctx.cfg.model.arch, (&self.tv, &self.sv_plain), &data, self.ctx.cfg.train.reverse_updates)
            .map_err(|e| AugmentError::InvalidSpec(e.to_string()))?;
        Ok(Box::new(m))
    }

    fn forward(&mut self, corpus: &[SentencePair], round: usize) -> Result<Box<dyn Translator>, AugmentError> {
        let max_len = self.ctx.cfg.model.max_len;
        let label = format!("multi-bt/{round}/forward");
        let run = || -> Result<TranslationModel, BoxError> {
            let data = tagged_examples(corpus, &self.sv, &self.tv, max_len)?;
            Ok(train_from_scratch(self.ctx, &label, self.ctx.cfg.model.arch, (&self.sv, &self.tv), &data, self.ctx.cfg.train.aug_updates)?.0)
        };
        Ok(Box::new(run().map_err(|e| AugmentError::InvalidSpec(e.to_string()))?))
    }
}

fn slug(label: &str) -> String {
    label.to_ascii_lowercase().replace(' ', "_").replace('-', "_")
}

fn augment(ctx: &Ctx<'_>) -> StageResult {
    let acfg = &ctx.cfg.augment;
    let real = ctx.read_pairs("bpe/bitext.tsv")?;
    let mono_tgt = ctx.read_sents("bpe/mono_tgt.txt", Lang::En)?;
    let mono_src = ctx.read_sents("bpe/mono_src.txt", Lang::Zh)?;
    let base = ctx.load_model("models/base.ckpt")?;
    let (sv, tv) = (base.src_vocab.clone(), base.tgt_vocab.clone());
    let mut out = Vec::new();
    let mut real_cur = real.clone();
    let mut extra: Vec<SentencePair> = Vec::new();
    let mut rows: Vec<(&str, Vec<SentencePair>)> = Vec::new();
    let beam = SamplingSpec { mode: SamplingMode::Beam, beam_size: acfg.beam, ..SamplingSpec::default() };
    let bt_used = acfg.bt_sentences.unwrap_or(mono_tgt.len()).min(mono_tgt.len());

    if let Some(spec) = &acfg.bt {
        let reverse = ctx.load_model("models/reverse.ckpt")?;
        let sampling = SamplingSpec { seed: ctx.sub_seed("bt"), ..spec.clone() };
        let bt = back_translate(&mono_tgt[..bt_used], &reverse, &sampling, acfg.domain)?;
        ctx.log(&format!("back-translation: {} pairs", bt.len()));
        let manifest = AugmentManifest::new("bt", sampling.seed, &sampling, &bt)
            .input("mono_tgt", sentences_digest(&mono_tgt[..bt_used]))
            .input("reverse_model", crate::digest::sha256_hex(&fs::read(ctx.path("models/reverse.ckpt"))?));
        out.push(ctx.write_pairs("aug/bt.tsv", &bt, true)?);
        out.push(ctx.write_json("aug/bt.manifest.json", &manifest)?);
        if let Some(noise) = &acfg.noise {
            let spec = noise.spec.with_seed(ctx.sub_seed("noise"));
            let mut noised = noised_copies(&bt, &spec, 1.0);
            noised.extend(noised_copies(&real, &spec.with_seed(ctx.sub_seed("noise/real")), noise.real_fraction));
            let manifest = AugmentManifest::new("noise", spec.seed, &spec, &noised).input("bt", pairs_digest(&bt));
            out.push(ctx.write_pairs("aug/noise.tsv", &noised, true)?);
            out.push(ctx.write_json("aug/noise.manifest.json", &manifest)?);
            extra.extend(noised);
        }
        extra.extend(bt);
        rows.push(("Back-Translation", [real_cur.as_slice(), &extra].concat()));
    }

    if acfg.kd {
        let tagged: Vec<SentencePair> =
            real.iter().map(|p| Ok(SentencePair { src: tagged_source(p)?, ..p.clone() })).collect::<Result<_, AugmentError>>()?;
        let sampling = SamplingSpec { seed: ctx.sub_seed("kd"), ..beam.clone() };
        real_cur = strip_all(distill(&tagged, &base, &sampling)?);
        let mut manifest = AugmentManifest::new("kd", sampling.seed, &sampling, &real_cur).input("bitext", pairs_digest(&real));
        manifest.metadata.insert("distilled".into(), "true".into());
        manifest.metadata.insert("teacher".into(), "models/base.ckpt".into());
        out.push(ctx.write_pairs("aug/kd.tsv", &real_cur, true)?);
        out.push(ctx.write_json("aug/kd.manifest.json", &manifest)?);
        rows.push(("Knowledge Distillation", [real_cur.as_slice(), &extra].concat()));
    }

    if acfg.ft {
        let tags = TagSpec { origin: Origin::Real, domain: acfg.domain };
        let tagged = mono_src.iter().map(|s| tag_sentence(s, tags)).collect::<Result<Vec<_>, _>>()?;
        let sampling = SamplingSpec { seed: ctx.sub_seed("ft"), ..beam.clone() };
        let ft = strip_all(forward_translate(&tagged, &base, &sampling, acfg.domain)?);
        let manifest = AugmentManifest::new("ft", sampling.seed, &sampling, &ft).input("mono_src", sentences_digest(&mono_src));
        out.push(ctx.write_pairs("aug/ft.tsv", &ft, true)?);
        out.push(ctx.write_json("aug/ft.manifest.json", &manifest)?);
        extra.extend(ft);
        rows.push(("Forward-Translation", [real_cur.as_slice(), &extra].concat()));
    }

    if let Some(mcfg) = &acfg.multi_bt {
        let mcfg = crate::augment::MultiBtConfig { seed: ctx.sub_seed("multi-bt"), ..mcfg.clone() };
        let start = [real_cur.as_slice(), &extra].concat();
        let sv_plain = ctx.load_model("models/reverse.ckpt")?.tgt_vocab;
        let mut trainer = RoundModels { ctx, sv: sv.clone(), sv_plain, tv: tv.clone() };
        let (corpus, rounds) = iterate_bt(&start, None, &mono_tgt[bt_used..], &mcfg, &mut trainer)?;
        out.push(ctx.write_pairs("aug/multi_bt.tsv", &corpus[start.len()..], true)?);
        out.push(ctx.write_json("aug/multi_bt.manifest.json", &rounds)?);
        rows.push(("Multi BT", corpus));
    }

    let mut records = Vec::new();
    for (label, corpus) in &rows {
        let s = slug(label);
        let data = tagged_examples(corpus, &sv, &tv, ctx.cfg.model.max_len)?;
        let (m, _) = train_from_scratch(ctx, &format!("aug/{s}"), ctx.cfg.model.arch, (&sv, &tv), &data, ctx.cfg.train.aug_updates)?;
        let ckpt = ctx.save_model(&format!("aug/{s}.ckpt"), &m)?;
        records.push(AugRow {
            label: label.to_string(),
            slug: s,
            checkpoint: ckpt.clone(),
            corpus_size: corpus.len(),
            corpus_digest: pairs_digest(corpus),
        });
        out.push(ckpt);
    }
    let final_corpus = rows.last().map(|(_, c)| c.clone()).unwrap_or(real);
    out.push(ctx.write_pairs("aug/corpus.tsv", &final_corpus, true)?);
    out.push(ctx.write_json("aug/rows.json", &records)?);
    Ok(out)
}

/// Checkpoint of the last augmentation row, or the baseline.
fn strongest_before_finetune(ctx: &Ctx<'_>) -> Result<String, BoxError> {
    let rows: Vec<AugRow> = ctx.read_json("aug/rows.json")?;
    Ok(rows.last().map(|r| r.checkpoint.clone()).unwrap_or_else(|| "models/base.ckpt".to_string()))
}

fn finetune_model(
    ctx: &Ctx<'_>,
    label: &str,
    start: TranslationModel,
    data: &[Example],
    denoise: Option<&crate::augment::NoiseSpec>,
) -> Result<TranslationModel, BoxError> {
    let fcfg = &ctx.cfg.finetune;
    let TranslationModel { net, src_vocab, tgt_vocab } = start;
    let mut trainer = Trainer::new(net, ctx.cfg.train.hyper.clone());
    trainer.parallel = ctx.cfg.train.parallel;
    let noise = denoise.map(|spec| target_noise(tgt_vocab.clone(), spec.clone()));
    let noise_ref = noise.as_ref().map(|f| f as &(dyn Fn(&Example, u64) -> Vec<usize> + Sync));
    let log = trainer.train(
        data,
        fcfg.updates,
        LrSchedule::Constant { lr: fcfg.lr },
        ctx.sub_seed(&format!("{label}/batches")),
        noise_ref,
    )?;
    let s = summarize(label, data.len(), &log.losses);
    ctx.log(&format!("{label}: loss {:.3} -> {:.3}", s.first_loss, s.last_loss));
    Ok(TranslationModel { net: trainer.into_model(), src_vocab, tgt_vocab })
}

fn in_domain(ctx: &Ctx<'_>, m: &TranslationModel) -> Result<Vec<Example>, BoxError> {
    let domain = ctx.cfg.finetune.domain;
    let pairs: Vec<SentencePair> =
        ctx.read_pairs("bpe/bitext.tsv")?.into_iter().filter(|p| p.domain == domain && p.origin == Origin::Real).collect();
    if pairs.is_empty() {
        return Err(format!("no real {domain} pairs to fine-tune on").into());
    }
    tagged_examples(&pairs, &m.src_vocab, &m.tgt_vocab, ctx.cfg.model.max_len)
}

fn finetune(ctx: &Ctx<'_>) -> StageResult {
    let start_rel = strongest_before_finetune(ctx)?;
    let start = ctx.load_model(&start_rel)?;
    let data = in_domain(ctx, &start)?;
    let plain = finetune_model(ctx, "ft/plain", start.clone(), &data, None)?;
    let mut out = vec![ctx.save_model("ft/plain.ckpt", &plain)?];
    if let Some(spec) = &ctx.cfg.finetune.denoise {
        let denoised = finetune_model(ctx, "ft/denoise", start, &data, Some(spec))?;
        out.push(ctx.save_model("ft/denoise.ckpt", &denoised)?);
    }
    Ok(out)
}

/// Undoes subword splitting and case markers on a decoder output.
pub fn postprocess(tokens: &[String]) -> TokenSentence {
    unmark_case_lenient(&bpe_undo_lenient(&TokenSentence::new(tokens.to_vec(), Lang::En)))
}

fn decode_all(model: &dyn Translator, srcs: &[TokenSentence], strategy: Strategy) -> Result<Vec<TokenSentence>, ModelError> {
    srcs.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            Ok(postprocess(&model.translate(&s.tokens, strategy, &mut rng)?))
        })
        .collect()
}

fn references(ctx: &Ctx<'_>, split: &str) -> Result<Vec<TokenSentence>, BoxError> {
    Ok(ctx.read_pairs(&format!("tok/{split}.tsv"))?.into_iter().map(|p| p.tgt).collect())
}

fn strategy(ctx: &Ctx<'_>) -> Strategy {
    Strategy::Beam { size: ctx.cfg.decode.beam, alpha: ctx.cfg.decode.alpha }
}

/// Candidate pool: every architecture (the main one plus `extra_archs`) contributes its
/// pre-fine-tune model, a plain fine-tune, a target-denoised fine-tune and one more
/// denoised fine-tune per `pool_noise` setting.
fn pool(ctx: &Ctx<'_>) -> StageResult {
    let dev_src = ctx.read_sents("tag/dev.src", Lang::Zh)?;
    let dev_ref = references(ctx, "dev")?;
    let ecfg = &ctx.cfg.ensemble;
    let mut out = Vec::new();
    let start_rel = strongest_before_finetune(ctx)?;
    let start_id = if ctx.read_json::<Vec<AugRow>>("aug/rows.json")?.is_empty() { "base" } else { "aug" };
    let mut members: Vec<(String, String)> = vec![(start_id.to_string(), start_rel.clone()), ("ft".into(), "ft/plain.ckpt".into())];
    if ctx.cfg.finetune.denoise.is_some() {
        members.push(("ft_denoise".into(), "ft/denoise.ckpt".into()));
    }
    if !ecfg.pool_noise.is_empty() {
        let start = ctx.load_model(&start_rel)?;
        let data = in_domain(ctx, &start)?;
        for (i, spec) in ecfg.pool_noise.iter().enumerate() {
            let id = format!("ft_noise{}", i + 1);
            let tuned = finetune_model(ctx, &format!("pool/{id}"), start.clone(), &data, Some(spec))?;
            let rel = ctx.save_model(&format!("pool/{id}.ckpt"), &tuned)?;
            out.push(rel.clone());
            members.push((id, rel));
        }
    }
    if !ecfg.extra_archs.is_empty() {
        let base = ctx.load_model("models/base.ckpt")?;
        let corpus = ctx.read_pairs("aug/corpus.tsv")?;
        let data = tagged_examples(&corpus, &base.src_vocab, &base.tgt_vocab, ctx.cfg.model.max_len)?;
        for arch in &ecfg.extra_archs {
            let name = arch.name().to_ascii_lowercase();
            let vocabs = (&base.src_vocab, &base.tgt_vocab);
            let (m, _) = train_from_scratch(ctx, &format!("pool/{name}"), *arch, vocabs, &data, ctx.cfg.train.aug_updates)?;
            let ft_data = in_domain(ctx, &m)?;
            let rel = ctx.save_model(&format!("pool/{name}.ckpt"), &m)?;
            out.push(rel.clone());
            members.push((name.clone(), rel));
            let denoise = ctx.cfg.finetune.denoise.iter().map(|spec| ("ft_denoise".to_string(), Some(spec)));
            let noise = ecfg.pool_noise.iter().enumerate().map(|(i, spec)| (format!("ft_noise{}", i + 1), Some(spec)));
            for (variant, spec) in std::iter::once(("ft".to_string(), None)).chain(denoise).chain(noise) {
                let id = format!("{name}_{variant}");
                let tuned = finetune_model(ctx, &format!("pool/{id}"), m.clone(), &ft_data, spec)?;
                let rel = ctx.save_model(&format!("pool/{id}.ckpt"), &tuned)?;
                out.push(rel.clone());
                members.push((id, rel));
            }
        }
    }
    let mut candidates = Vec::new();
    for (id, rel) in members {
        let m = ctx.load_model(&rel)?;
        let outputs = decode_all(&m, &dev_src, strategy(ctx))?;
        let score = corpus_bleu(&outputs, &dev_ref, 4, Smoothing::AddOne)?;
        ctx.log(&format!("candidate {id}: dev BLEU {:.2}", score.score));
        out.push(ctx.write_sents(&format!("pool/outputs/{id}.txt"), &outputs)?);
        candidates.push(CandidateModel { id, checkpoint: Some(PathBuf::from(rel)), dev_outputs: outputs, dev_bleu: score });
    }
    let outputs: Vec<Vec<TokenSentence>> = candidates.iter().map(|c| c.dev_outputs.clone()).collect();
    let matrix = SelfBleuMatrix::compute(candidates.iter().map(|c| c.id.clone()).collect(), &outputs)?;
    out.push(ctx.write_json("pool/candidates.json", &candidates)?);
    out.push(ctx.write_json("pool/matrix.json", &matrix)?);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Selection {
    ids: Vec<String>,
    k: usize,
    lambda: f64,
    objective: f64,
}

fn select(ctx: &Ctx<'_>) -> StageResult {
    let candidates: Vec<CandidateModel> = ctx.read_json("pool/candidates.json")?;
    let matrix: SelfBleuMatrix = ctx.read_json("pool/matrix.json")?;
    matrix.validate()?;
    let k = ctx.cfg.ensemble.k.min(candidates.len());
    let lambda = ctx.cfg.ensemble.lambda;
    let ids = select_candidates(&candidates, &matrix, k, lambda)?;
    let index: Vec<usize> = ids.iter().map(|id| candidates.iter().position(|c| &c.id == id).expect("selected id")).collect();
    let dev: Vec<f64> = candidates.iter().map(|c| c.dev_bleu.score).collect();
    let objective = objective(&index, &dev, &matrix.matrix, lambda);
    ctx.log(&format!("ensemble: {}", ids.join(", ")));
    Ok(vec![ctx.write_json("select/ensemble.json", &Selection { ids, k, lambda, objective })?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub label: String,
    pub slug: String,
    pub dev_bleu: f64,
    pub test_bleu: f64,
    pub base: bool,
    pub starred: bool,
}

/// Scores of every system in the final table plus the diagnostics that go with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub systems: Vec<SystemScore>,
    /// Self-BLEU of the denoised fine-tune's test output against the plain fine-tune's.
    pub selfbleu_denoise_vs_plain: Option<f64>,
    /// `(candidate id, dev BLEU)` of the ensemble members.
    pub ensemble_members: Vec<(String, f64)>,
    pub test_bleu_detail: Vec<BleuScore>,
}

impl Scores {
    pub fn get(&self, label: &str) -> Option<&SystemScore> {
        self.systems.iter().find(|s| s.label == label)
    }
}

fn check_eval_sources(srcs: &[TokenSentence], split: &str) -> Result<(), BoxError> {
    for (i, s) in srcs.iter().enumerate() {
        let ok = s.tokens.len() >= 2
            && s.tokens[0] == EVAL_TAGS.origin.tag()
            && s.tokens[1] == EVAL_TAGS.domain.tag()
            && !s.tokens[2..].iter().any(|t| is_tag(t));
        if !ok {
            return Err(format!("{split} source {} is not tagged exactly {} {}", i + 1, EVAL_TAGS.origin.tag(), EVAL_TAGS.domain.tag()).into());
        }
    }
    Ok(())
}

fn decode(ctx: &Ctx<'_>) -> StageResult {
    let dev_src = ctx.read_sents("tag/dev.src", Lang::Zh)?;
    let test_src = ctx.read_sents("tag/test.src", Lang::Zh)?;
    check_eval_sources(&dev_src, "dev")?;
    check_eval_sources(&test_src, "test")?;
    let (dev_ref, test_ref) = (references(ctx, "dev")?, references(ctx, "test")?);
    let rows: Vec<AugRow> = ctx.read_json("aug/rows.json")?;
    let mut systems: Vec<(String, String, Box<dyn Translator>)> =
        vec![("Baseline".into(), "baseline".into(), Box::new(ctx.load_model("models/base.ckpt")?))];
    for r in &rows {
        systems.push((r.label.clone(), r.slug.clone(), Box::new(ctx.load_model(&r.checkpoint)?)));
    }
    systems.push(("Finetune".into(), "finetune".into(), Box::new(ctx.load_model("ft/plain.ckpt")?)));
    if ctx.cfg.finetune.denoise.is_some() {
        systems.push(("Target denoise finetune".into(), "denoise_finetune".into(), Box::new(ctx.load_model("ft/denoise.ckpt")?)));
    }
    let selection: Selection = ctx.read_json("select/ensemble.json")?;
    let candidates: Vec<CandidateModel> = ctx.read_json("pool/candidates.json")?;
    let mut members = Vec::new();
    let mut member_scores = Vec::new();
    for id in &selection.ids {
        let c = candidates.iter().find(|c| &c.id == id).ok_or_else(|| format!("unknown candidate {id}"))?;
        let rel = c.checkpoint.as_ref().ok_or_else(|| format!("candidate {id} has no checkpoint"))?;
        members.push(ctx.load_model(&rel.to_string_lossy())?);
        member_scores.push((id.clone(), c.dev_bleu.score));
    }
    systems.push(("Ensemble".into(), "ensemble".into(), Box::new(Ensemble::new(members)?)));

    let mut out = Vec::new();
    let mut scores = Vec::new();
    let mut details = Vec::new();
    let mut test_outputs = Vec::new();
    for (i, (label, slug, model)) in systems.iter().enumerate() {
        let dev_out = decode_all(model.as_ref(), &dev_src, strategy(ctx))?;
        let test_out = decode_all(model.as_ref(), &test_src, strategy(ctx))?;
        let dev_bleu = bleu(&dev_out, &dev_ref)?;
        let detail = corpus_bleu(&test_out, &test_ref, 4, Smoothing::AddOne)?;
        ctx.log(&format!("{label}: dev {dev_bleu:.2}, test {:.2}", detail.score));
        let text = text_file(test_out.iter().map(|s| detokenize_en(s).text));
        out.push(write_file(ctx.dir, &format!("decode/{slug}.test.txt"), &text)?);
        out.push(ctx.write_sents(&format!("decode/{slug}.test.tok"), &test_out)?);
        scores.push(SystemScore {
            label: label.clone(),
            slug: slug.clone(),
            dev_bleu,
            test_bleu: detail.score,
            base: i == 0,
            starred: label == "Ensemble",
        });
        details.push(detail);
        test_outputs.push(test_out);
    }
    let pos = |label: &str| systems.iter().position(|s| s.0 == label);
    let selfbleu_denoise_vs_plain = match (pos("Target denoise finetune"), pos("Finetune")) {
        (Some(d), Some(p)) => Some(self_bleu(&test_outputs[d], &test_outputs[p])?),
        _ => None,
    };
    let summary = Scores { systems: scores, selfbleu_denoise_vs_plain, ensemble_members: member_scores, test_bleu_detail: details };
    out.push(ctx.write_json("decode/scores.json", &summary)?);
    Ok(out)
}

fn report(ctx: &Ctx<'_>) -> StageResult {
    let scores: Scores = ctx.read_json("decode/scores.json")?;
    let rows = scores
        .systems
        .iter()
        .map(|s| {
            let mut r = if s.base { ReportRow::base(&s.label, s.test_bleu) } else { ReportRow::added(&s.label, s.test_bleu) };
            r.starred = s.starred;
            r.with_dev(s.dev_bleu)
        })
        .collect();
    let report = AblationReport::new("Test BLEU", rows);
    let mut text = report.render_text();
    if let Some(sb) = scores.selfbleu_denoise_vs_plain {
        text.push_str(&format!("\nSelf-BLEU (denoise vs plain fine-tune): {sb:.2}\n"));
    }
    let members: Vec<String> = scores.ensemble_members.iter().map(|(id, b)| format!("{id} ({b:.2})")).collect();
    text.push_str(&format!("Ensemble members: {}\n", members.join(", ")));
    let mut f = BufWriter::new(File::create(ctx.path("report.txt"))?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(vec!["report.txt".to_string(), write_file(ctx.dir, "report.json", report.to_json().as_bytes())?])
}
