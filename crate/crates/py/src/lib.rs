//! Python bindings: text normalization, BPE, tags and noise, filtering, translation,
//! BLEU and ensemble selection, and the end-to-end pipeline.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use mtforge_core::augment::{apply_noise, strip_tags as core_strip_tags, tag_sentence, NoiseSpec, TagSpec};
use mtforge_core::corpus::{Domain, Origin, SentencePair};
use mtforge_core::evalsel::{corpus_bleu, objective, select_ensemble as core_select, SelfBleuMatrix, Smoothing};
use mtforge_core::filter::{run_filters, FilterRules};
use mtforge_core::model::{
    grad_check as core_grad_check, layer_plan, Arch, Example, ModelConfig, Strategy, Transformer, TranslationModel, Translator,
};
use mtforge_core::pipeline::{postprocess, run_pipeline as core_run_pipeline, PipelineConfig, RunOptions};
use mtforge_core::subword::{bpe_apply, bpe_learn, bpe_undo as core_bpe_undo, default_protected, BpeModel};
use mtforge_core::text_norm::{
    detokenize_en, mark_case as core_mark_case, normalize_punct, segment_zh, tokenize_en, unmark_case as core_unmark_case,
    Lang, Lexicon, RawSentence, TokenSentence,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn lang(s: &str) -> PyResult<Lang> {
    s.parse().map_err(err)
}

fn sent(tokens: Vec<String>, l: Lang) -> TokenSentence {
    TokenSentence::new(tokens, l)
}

/// Parses JSON text into Python objects with the standard `json` module.
fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_string(value).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (text, lang="en"))]
fn normalize(text: &str, lang: &str) -> PyResult<String> {
    Ok(normalize_punct(&RawSentence::new(text, self::lang(lang)?)).text)
}

/// Normalizes punctuation and splits into tokens. Chinese uses greedy longest match
/// over `lexicon` and falls back to single characters.
#[pyfunction]
#[pyo3(signature = (text, lang="en", lexicon=None))]
fn tokenize(text: &str, lang: &str, lexicon: Option<Vec<String>>) -> PyResult<Vec<String>> {
    let l = self::lang(lang)?;
    let raw = normalize_punct(&RawSentence::new(text, l));
    Ok(match l {
        Lang::En => tokenize_en(&raw).tokens,
        Lang::Zh => segment_zh(&raw, &Lexicon::new(lexicon.unwrap_or_default())).tokens,
    })
}

#[pyfunction]
fn mark_case(tokens: Vec<String>) -> PyResult<Vec<String>> {
    Ok(core_mark_case(&sent(tokens, Lang::En)).map_err(err)?.tokens)
}

#[pyfunction]
fn unmark_case(tokens: Vec<String>) -> PyResult<Vec<String>> {
    Ok(core_unmark_case(&sent(tokens, Lang::En)).map_err(err)?.tokens)
}

#[pyfunction]
#[pyo3(signature = (tokens, lang="en"))]
fn detokenize(tokens: Vec<String>, lang: &str) -> PyResult<String> {
    Ok(match self::lang(lang)? {
        Lang::En => detokenize_en(&sent(tokens, Lang::En)).text,
        Lang::Zh => tokens.concat(),
    })
}

/// A learned merge table.
#[pyclass(name = "Bpe", module = "mtforge", frozen)]
struct PyBpe {
    model: BpeModel,
}

fn protected(extra: Option<Vec<String>>) -> BTreeSet<String> {
    let mut set = default_protected();
    set.extend(extra.unwrap_or_default());
    set
}

#[pymethods]
impl PyBpe {
    /// Learns `n_ops` merges from whitespace-tokenized lines.
    #[staticmethod]
    #[pyo3(signature = (lines, n_ops, protected=None))]
    fn learn(lines: Vec<String>, n_ops: usize, protected: Option<Vec<String>>) -> PyResult<Self> {
        let corpus: Vec<TokenSentence> = lines.iter().map(|l| TokenSentence::from_whitespace(l, Lang::En)).collect();
        Ok(Self { model: bpe_learn(&corpus, n_ops, &self::protected(protected)).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, protected=None))]
    fn load(path: PathBuf, protected: Option<Vec<String>>) -> PyResult<Self> {
        let f = File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Ok(Self { model: BpeModel::read(BufReader::new(f), self::protected(protected)).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let f = File::create(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        self.model.write(BufWriter::new(f)).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn merges(&self) -> Vec<(String, String)> {
        self.model.merges().to_vec()
    }

    fn apply(&self, line: &str) -> String {
        bpe_apply(&TokenSentence::from_whitespace(line, Lang::En), &self.model).joined()
    }

    fn __repr__(&self) -> String {
        format!("Bpe(merges={})", self.model.merges().len())
    }
}

#[pyfunction]
fn bpe_undo(line: &str) -> PyResult<String> {
    Ok(core_bpe_undo(&TokenSentence::from_whitespace(line, Lang::En)).map_err(err)?.joined())
}

fn tags(origin: &str, domain: &str) -> PyResult<TagSpec> {
    Ok(TagSpec { origin: origin.parse::<Origin>().map_err(err)?, domain: domain.parse::<Domain>().map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (tokens, origin="REAL", domain="BIO"))]
fn tag(tokens: Vec<String>, origin: &str, domain: &str) -> PyResult<Vec<String>> {
    Ok(tag_sentence(&sent(tokens, Lang::Zh), tags(origin, domain)?).map_err(err)?.tokens)
}

/// Returns `((origin, domain) or None, tokens)`.
#[pyfunction]
fn strip_tags(tokens: Vec<String>) -> (Option<(String, String)>, Vec<String>) {
    let (t, rest) = core_strip_tags(&sent(tokens, Lang::Zh));
    (t.map(|t| (t.origin.to_string(), t.domain.to_string())), rest.tokens)
}

#[pyfunction]
#[pyo3(signature = (tokens, unk_rate=0.1, delete_rate=0.1, swap_rate=0.1, swap_window=3, seed=0))]
fn noise(tokens: Vec<String>, unk_rate: f64, delete_rate: f64, swap_rate: f64, swap_window: usize, seed: u64) -> PyResult<Vec<String>> {
    let spec = NoiseSpec { unk_rate, delete_rate, swap_rate, swap_window, seed };
    spec.validate().map_err(err)?;
    Ok(apply_noise(&sent(tokens, Lang::Zh), &spec).tokens)
}

/// Filters `(source, target)` pairs of whitespace-tokenized text. `rules` is the JSON
/// rule configuration; the default enables every rule. Returns `(kept, report)`.
#[pyfunction]
#[pyo3(signature = (pairs, rules=None))]
fn filter_pairs<'py>(
    py: Python<'py>,
    pairs: Vec<(String, String)>,
    rules: Option<&str>,
) -> PyResult<(Vec<(String, String)>, Bound<'py, PyAny>)> {
    let rules: FilterRules = match rules {
        Some(r) => serde_json::from_str(r).map_err(err)?,
        None => FilterRules::default(),
    };
    let corpus: Vec<SentencePair> = pairs.iter().map(|(s, t)| SentencePair::from_text(s, t)).collect();
    let out = run_filters(&corpus, &rules, None).map_err(err)?;
    let kept = out.kept.iter().map(|p| (p.src.joined(), p.tgt.joined())).collect();
    Ok((kept, to_py(py, &out.report)?))
}

fn lines(xs: &[String]) -> Vec<TokenSentence> {
    xs.iter().map(|x| TokenSentence::from_whitespace(x, Lang::En)).collect()
}

/// Corpus BLEU-4 with add-one smoothing of the higher orders when any order is zero.
#[pyfunction]
fn bleu(hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    Ok(corpus_bleu(&lines(&hyps), &lines(&refs), 4, Smoothing::AddOne).map_err(err)?.score)
}

#[pyfunction]
fn bleu_detail<'py>(py: Python<'py>, hyps: Vec<String>, refs: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &corpus_bleu(&lines(&hyps), &lines(&refs), 4, Smoothing::AddOne).map_err(err)?)
}

#[pyfunction]
fn self_bleu_matrix(outputs: Vec<Vec<String>>) -> PyResult<Vec<Vec<f64>>> {
    let ids = (0..outputs.len()).map(|i| i.to_string()).collect();
    let outs: Vec<Vec<TokenSentence>> = outputs.iter().map(|o| lines(o)).collect();
    Ok(SelfBleuMatrix::compute(ids, &outs).map_err(err)?.matrix)
}

/// Greedy selection of `k` candidates; returns `(indices, objective)`.
#[pyfunction]
#[pyo3(signature = (dev_bleu, matrix, k, lambda_=0.1))]
fn select_ensemble(dev_bleu: Vec<f64>, matrix: Vec<Vec<f64>>, k: usize, lambda_: f64) -> PyResult<(Vec<usize>, f64)> {
    let picked = core_select(&dev_bleu, &matrix, k, lambda_).map_err(err)?;
    let j = objective(&picked, &dev_bleu, &matrix, lambda_);
    Ok((picked, j))
}

/// A trained checkpoint with its vocabularies.
#[pyclass(name = "Model", module = "mtforge", frozen)]
struct PyModel {
    inner: TranslationModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TranslationModel::load(&path).map_err(err)? })
    }

    /// Translates one tokenized sentence. With `top_p` set, samples from the nucleus
    /// instead of running beam search.
    #[pyo3(signature = (source, beam=4, alpha=0.6, top_p=None, seed=0, postprocess=false))]
    fn translate(&self, py: Python<'_>, source: &str, beam: usize, alpha: f64, top_p: Option<f64>, seed: u64, postprocess: bool) -> PyResult<String> {
        let strategy = match top_p {
            Some(p) => Strategy::TopP { p },
            None => Strategy::Beam { size: beam.max(1), alpha },
        };
        let src: Vec<String> = source.split_whitespace().map(str::to_string).collect();
        let out = py
            .detach(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.inner.translate(&src, strategy, &mut rng)
            })
            .map_err(err)?;
        Ok(if postprocess { self::postprocess(&out).joined() } else { out.join(" ") })
    }

    #[getter]
    fn arch(&self) -> String {
        format!("{:?}", self.inner.net.config.dec_plan)
    }

    #[getter]
    fn vocab_sizes(&self) -> (usize, usize) {
        (self.inner.src_vocab.len(), self.inner.tgt_vocab.len())
    }
}

/// Gradient check on a freshly initialized tiny model of the given architecture.
#[pyfunction]
#[pyo3(signature = (arch="BIG", n=50, eps=1e-4, seed=0))]
fn grad_check<'py>(py: Python<'py>, arch: &str, n: usize, eps: f64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let arch: Arch = arch.parse().map_err(err)?;
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 2,
        hidden: 8,
        ffn: 16,
        heads: 2,
        dec_plan: layer_plan(arch, 2),
        src_vocab: 9,
        tgt_vocab: 9,
        max_len: 16,
    };
    let m = Transformer::new(cfg, seed).map_err(err)?;
    let ex = Example::new(vec![2, 3, 4, 5], vec![3, 6, 2, 4, 5]);
    to_py(py, &core_grad_check(&m, &ex, n, eps, seed).map_err(err)?)
}

/// Runs the pipeline from a JSON configuration. Returns a dict with the stages run and
/// reused, the manifest digest and the rendered report (when the run got that far).
#[pyfunction]
#[pyo3(signature = (config, resume=false, until=None))]
fn run_pipeline<'py>(py: Python<'py>, config: &str, resume: bool, until: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = PipelineConfig::from_json(config).map_err(err)?;
    let until = until.map(str::parse).transpose().map_err(err)?;
    let out = py.detach(|| core_run_pipeline(&cfg, &RunOptions { resume, until, verbose: false })).map_err(err)?;
    let names = |s: &[mtforge_core::pipeline::Stage]| s.iter().map(|s| s.name().to_string()).collect::<Vec<_>>();
    let summary = serde_json::json!({
        "ran": names(&out.ran),
        "skipped": names(&out.skipped),
        "digest": out.manifest.content_digest(),
        "report": out.report.map(|r| r.render_text()),
    });
    json_to_py(py, &summary.to_string())
}

#[pymodule]
fn mtforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(mark_case, m)?)?;
    m.add_function(wrap_pyfunction!(unmark_case, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(bpe_undo, m)?)?;
    m.add_function(wrap_pyfunction!(tag, m)?)?;
    m.add_function(wrap_pyfunction!(strip_tags, m)?)?;
    m.add_function(wrap_pyfunction!(noise, m)?)?;
    m.add_function(wrap_pyfunction!(filter_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(bleu_detail, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(select_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<PyBpe>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
