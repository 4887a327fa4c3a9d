use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spkver::backend::cosine_score;
use spkver::metrics::{compute_eer, parse_scores, parse_trials, split_scored, MetricSummary};
use spkver::pipeline::{extract_embeddings, Archive, Checkpoint, EmbeddingSet, FeatureSet};

const CONFIG: &str = r#"
[model]
arch = "maxpool"

[model.widths]
frame = 8
top = 16
segment = 8
embedding = 6

[loss]
kind = "softmax"

[train]
batch_size = 4
epochs = 1
steps_per_epoch = 2
segment_seconds = [0.4, 0.6]
learning_rate = 0.01
clip_norm = 5.0

[corpus]
n_speakers = 4
utterances_per_speaker = 4
utterance_seconds = [0.8, 1.0]
dim = 5
separation = 2.0

[backend.csml]
epochs = 2
steps_per_epoch = 2

[backend.plda]
lda_dim = 3
"#;

fn spkver(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkver")).args(args).env("SPKVER_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spkver(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> String {
        p(&self.root, name)
    }
}

/// Config, synthetic corpus, an initialization checkpoint and embeddings.
fn prepared() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let run = Run { _dir: dir, root };
    std::fs::write(run.path("cfg.toml"), CONFIG).unwrap();
    ok(&["synth", "--config", &run.path("cfg.toml"), "--out", &run.path("feats.arc")]);
    ok(&["train", "--config", &run.path("cfg.toml"), "--train", &run.path("feats.arc"), "--epochs", "0", "--out", &run.path("init.ckpt")]);
    ok(&["extract", "--checkpoint", &run.path("init.ckpt"), "--features", &run.path("feats.arc"), "--out", &run.path("emb.arc")]);
    ok(&["trials", "--embeddings", &run.path("emb.arc"), "--out", &run.path("trials.txt")]);
    run
}

#[test]
fn perfect_separation_prints_zero_eer() {
    let dir = tempfile::tempdir().unwrap();
    let scores = p(dir.path(), "scores.txt");
    std::fs::write(&scores, "a b target 0.9\na c nontarget 0.1\nb c nontarget 0.2\nd e target 0.8\n").unwrap();
    let out = ok(&["eval", "--scores", &scores]);
    assert!(out.contains("EER      0.000%"), "{out}");
}

#[test]
fn cosine_pipeline_matches_library() {
    let run = prepared();
    ok(&["score", "--backend", "cosine", "--embeddings", &run.path("emb.arc"), "--trials", &run.path("trials.txt"), "--out", &run.path("scores.txt")]);
    ok(&["eval", "--scores", &run.path("scores.txt"), "--json", &run.path("m.json")]);

    // Same numbers without the command line in between.
    let feats = FeatureSet::from_archive(&Archive::read(&run.root.join("feats.arc")).unwrap()).unwrap();
    let ckpt = Checkpoint::load(&run.root.join("init.ckpt")).unwrap();
    let (emb, skipped) = extract_embeddings(&ckpt.model, &feats).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(EmbeddingSet::from_archive(&Archive::read(&run.root.join("emb.arc")).unwrap()).unwrap(), emb);
    let trials = parse_trials(&std::fs::read_to_string(run.root.join("trials.txt")).unwrap()).unwrap();
    assert_eq!(trials.len(), 16 * 15 / 2);
    let idx = emb.index();
    let lib_scores: Vec<f64> = trials.iter().map(|t| cosine_score(&emb.items[idx[t.enroll.as_str()]].vector, &emb.items[idx[t.test.as_str()]].vector).unwrap()).collect();
    let targets: Vec<bool> = trials.iter().map(|t| t.target).collect();
    let cli_scores = parse_scores(&std::fs::read_to_string(run.root.join("scores.txt")).unwrap()).unwrap();
    assert_eq!(split_scored(&cli_scores), (lib_scores.clone(), targets.clone()));

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.root.join("m.json")).unwrap()).unwrap();
    let lib = MetricSummary::compute(&lib_scores, &targets, &[0.01, 0.001]).unwrap();
    assert_eq!(json["eer"].as_f64().unwrap(), compute_eer(&lib_scores, &targets).unwrap());
    assert_eq!(json["eer"].as_f64().unwrap(), lib.eer);
    for (i, (pt, v)) in lib.min_dcf.iter().enumerate() {
        assert_eq!(json["min_dcf"][i][0].as_f64().unwrap(), *pt);
        assert_eq!(json["min_dcf"][i][1].as_f64().unwrap(), *v);
    }
}

#[test]
fn trained_backends_score_and_mismatch_is_rejected() {
    let run = prepared();
    for (kind, scorer) in [("csml", "csml"), ("lda-plda", "plda"), ("cosine", "cosine")] {
        let model = run.path(&format!("{kind}.arc"));
        let out = run.path(&format!("{kind}.scores"));
        ok(&["backend-train", "--kind", kind, "--config", &run.path("cfg.toml"), "--embeddings", &run.path("emb.arc"), "--out", &model]);
        ok(&["score", "--backend", scorer, "--model", &model, "--embeddings", &run.path("emb.arc"), "--trials", &run.path("trials.txt"), "--out", &out]);
        let text = ok(&["eval", "--scores", &out]);
        assert!(text.contains("EER"));
    }
    let bad = spkver(&["score", "--backend", "plda", "--model", &run.path("csml.arc"), "--embeddings", &run.path("emb.arc"), "--trials", &run.path("trials.txt"), "--out", &run.path("x")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("csml"));
    let no_model = spkver(&["score", "--backend", "csml", "--embeddings", &run.path("emb.arc"), "--trials", &run.path("trials.txt"), "--out", &run.path("x")]);
    assert_eq!(no_model.status.code(), Some(2));
}

#[test]
fn training_resumes_and_writes_log() {
    let run = prepared();
    let cfg = run.path("cfg.toml");
    let feats = run.path("feats.arc");
    ok(&["train", "--config", &cfg, "--train", &feats, "--epochs", "2", "--out", &run.path("full.ckpt"), "--log", &run.path("log.json")]);
    ok(&["train", "--config", &cfg, "--train", &feats, "--epochs", "1", "--out", &run.path("a.ckpt"), "--last", &run.path("a.last")]);
    ok(&["train", "--config", &cfg, "--train", &feats, "--epochs", "2", "--resume", &run.path("a.last"), "--out", &run.path("b.ckpt")]);
    let full = std::fs::read(run.root.join("full.ckpt")).unwrap();
    assert_eq!(std::fs::read(run.root.join("b.ckpt")).unwrap(), full);
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.root.join("log.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);
    assert_eq!(log[1]["step"], 4);
}

#[test]
fn extract_records_short_utterances() {
    let run = prepared();
    // Two utterances of 0.1 s, far below the receptive field.
    let short = r#"
[corpus]
n_speakers = 2
utterances_per_speaker = 1
utterance_seconds = [0.1, 0.1]
dim = 5
"#;
    std::fs::write(run.path("short.toml"), short).unwrap();
    ok(&["synth", "--config", &run.path("short.toml"), "--out", &run.path("short.arc")]);
    let out = ok(&["extract", "--checkpoint", &run.path("init.ckpt"), "--features", &run.path("short.arc"), "--out", &run.path("e.arc"), "--skipped", &run.path("skip.txt")]);
    assert!(out.contains("0 embeddings"), "{out}");
    let manifest = std::fs::read_to_string(run.root.join("skip.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert!(manifest.starts_with("spk0000_u000 10 "));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(dir.path(), "a.arc");
    let b = p(dir.path(), "b.arc");
    for f in [&a, &b] {
        ok(&["synth", "--speakers", "3", "--utterances", "2", "--seed", "5", "--out", f]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let out = spkver(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(spkver(&["frobnicate"]).status.code(), Some(1));
    let missing = spkver(&["eval", "--scores", "/nonexistent/scores.txt"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/scores.txt"));
    assert_eq!(spkver(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_primitives_pass() {
    let out = ok(&["gradcheck", "--primitives-only"]);
    assert_eq!(out.lines().count(), 18);
    assert!(out.lines().all(|l| l.ends_with("PASS")), "{out}");
}

#[test]
fn mfcc_from_wav_list() {
    let dir = tempfile::tempdir().unwrap();
    let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(dir.path().join("x.wav"), spec).unwrap();
    for i in 0..16000u32 {
        let v = 4000.0 * ((i as f64) * 0.07).sin() * (1.0 + ((i as f64) * 0.001).sin());
        w.write_sample(v as i16).unwrap();
    }
    w.finalize().unwrap();
    std::fs::write(dir.path().join("list.txt"), "utt1 x.wav alice\n").unwrap();
    ok(&["mfcc", "--list", &p(dir.path(), "list.txt"), "--out", &p(dir.path(), "f.arc")]);
    let set = FeatureSet::from_archive(&Archive::read(&dir.path().join("f.arc")).unwrap()).unwrap();
    assert_eq!(set.utterances[0].id, "utt1");
    assert_eq!(set.utterances[0].features.dim(), 23);
    assert!(set.utterances[0].features.frames() > 0);
}
