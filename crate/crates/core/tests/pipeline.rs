use std::fs;
use std::path::Path;

use mtforge_core::pipeline::{
    run_pipeline, BpeStage, DataSource, Manifest, PipelineConfig, PipelineError, RunOptions, Stage, ToySpec, LOCK_FILE,
    MANIFEST_FILE,
};

fn tiny(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig { work_dir: dir.to_path_buf(), seed: 5, ..Default::default() };
    c.data = DataSource::Toy(ToySpec {
        news_pairs: 40,
        bio_pairs: 30,
        mono_tgt: 30,
        mono_src: 10,
        dev: 6,
        test: 6,
        ..Default::default()
    });
    c.bpe = BpeStage { src_ops: 10, tgt_ops: 20 };
    c.model.hidden = 16;
    c.model.ffn = 32;
    c.model.heads = 2;
    c.train.base_updates = 8;
    c.train.reverse_updates = 8;
    c.train.aug_updates = 8;
    c.finetune.updates = 4;
    c.ensemble.k = 2;
    c
}

fn run(cfg: &PipelineConfig, resume: bool) -> Result<mtforge_core::pipeline::RunOutcome, PipelineError> {
    run_pipeline(cfg, &RunOptions { resume, ..Default::default() })
}

#[test]
fn full_run_then_resume_skips_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let first = run(&cfg, false).unwrap();
    assert_eq!(first.ran, Stage::ALL.to_vec());
    let report = first.report.expect("report written");
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["Baseline", "Back-Translation", "Finetune", "Target denoise finetune", "Ensemble"]);
    assert!(tmp.path().join("report.txt").exists());
    assert!(!tmp.path().join(LOCK_FILE).exists());

    let second = run(&cfg, true).unwrap();
    assert!(second.ran.is_empty());
    assert_eq!(second.skipped.len(), Stage::ALL.len());
    assert_eq!(second.manifest.content_digest(), first.manifest.content_digest());
}

#[test]
fn same_seed_same_digests_in_another_directory() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run(&tiny(a.path()), false).unwrap().manifest;
    let mb = run(&tiny(b.path()), false).unwrap().manifest;
    assert_eq!(ma.output_digests(), mb.output_digests());
    assert_eq!(ma.content_digest(), mb.content_digest());
}

#[test]
fn tampered_output_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    run_pipeline(&cfg, &RunOptions { until: Some(Stage::Case), ..Default::default() }).unwrap();
    fs::write(tmp.path().join("tok/bitext.tsv"), "x\ty\n").unwrap();
    match run(&cfg, true) {
        Err(PipelineError::DigestMismatch { stage, path }) => {
            assert_eq!(stage, "filter");
            assert_eq!(path, "tok/bitext.tsv");
        }
        other => panic!("expected a digest mismatch, got {other:?}"),
    }
}

#[test]
fn missing_output_is_recreated_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let until = RunOptions { until: Some(Stage::Base), ..Default::default() };
    let first = run_pipeline(&cfg, &until).unwrap();
    assert_eq!(first.manifest.stages.len(), 6);
    fs::remove_file(tmp.path().join("models/base.ckpt")).unwrap();
    let again = run_pipeline(&cfg, &RunOptions { resume: true, ..until }).unwrap();
    assert_eq!(again.ran, vec![Stage::Base]);
    assert_eq!(again.manifest.output_digests(), first.manifest.output_digests());
}

#[test]
fn lambda_only_touches_selection_onwards() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    let before = run(&cfg, false).unwrap().manifest;
    cfg.ensemble.lambda = 0.7;
    let after = run(&cfg, true).unwrap();
    assert_eq!(after.ran, vec![Stage::Select, Stage::Decode, Stage::Report]);
    for stage in &Stage::ALL[..Stage::ALL.iter().position(|s| *s == Stage::Select).unwrap()] {
        assert_eq!(before.stage(stage.name()), after.manifest.stage(stage.name()));
    }
}

#[test]
fn until_stops_and_manifest_persists() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let out = run_pipeline(&cfg, &RunOptions { until: Some("bpe".parse().unwrap()), ..Default::default() }).unwrap();
    assert_eq!(out.ran, vec![Stage::Prepare, Stage::Filter, Stage::Case, Stage::Bpe]);
    let m = Manifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.stages.len(), 4);
    assert!(m.stage("bpe").unwrap().outputs.contains_key("bpe/src.codes"));
    assert!(out.report.is_none());
}

#[test]
fn lock_blocks_a_second_run() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(LOCK_FILE), "1\n").unwrap();
    assert!(matches!(run(&tiny(tmp.path()), false), Err(PipelineError::Locked(_))));
}

#[test]
fn config_errors() {
    assert!(matches!("nope".parse::<Stage>(), Err(PipelineError::UnknownStage(_))));
    assert!(matches!(PipelineConfig::from_json("{\"seed\": \"x\"}"), Err(PipelineError::Config(_))));
    let cfg = PipelineConfig::from_json("{\"seed\": 9, \"ensemble\": {\"lambda\": 0.3}}").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.ensemble.lambda, 0.3);
    assert_eq!(cfg.ensemble.k, 3);
    let back = PipelineConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    let mut bad = cfg;
    bad.ensemble.k = 0;
    assert!(bad.validate().is_err());
}
