use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tqvsr::checkpoint;
use tqvsr::commands::read_json;
use tqvsr::manifest::load_corpus;
use tqvsr_core::metrics::EvalReport;
use tqvsr_core::trainer::StepRecord;
use tqvsr_core::{DmeModel, Matrix, QueryType, Split};

const TINY: &[&str] = &["--dim", "8", "--layers", "1", "--heads", "2", "--batch-size", "8"];

fn tqvsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tqvsr")).args(args).env("TQVSR_THREADS", "1").output().expect("spawn tqvsr")
}

fn ok(args: &[&str]) -> String {
    let out = tqvsr(args);
    assert!(out.status.success(), "tqvsr {} failed:\n{}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn gen(dir: &Path, extra: &[&str]) -> PathBuf {
    let corpus = dir.join("corpus");
    let c = s(&corpus);
    let mut args = vec!["gen-synth", "--out", &c, "--seed", "5", "--n-videos", "6", "--segments-per-video", "3"];
    args.extend_from_slice(extra);
    ok(&args);
    corpus
}

fn train(corpus: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let (c, o) = (s(corpus), s(out));
    let mut args = vec!["train", "--corpus", &c, "--out", &o, "--seed", "2"];
    args.extend_from_slice(TINY);
    if !extra.contains(&"--epochs") {
        args.extend_from_slice(&["--epochs", "1"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
    out.join("model.tqvc")
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.clone(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn trace(run: &Path) -> Vec<StepRecord> {
    fs::read_to_string(run.join("trace.ndjson")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_synth_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let strip =
        |root: &Path| files(&gen(root, &[])).into_iter().map(|(p, b)| (p.strip_prefix(root).unwrap().to_path_buf(), b)).collect::<Vec<_>>();
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn type_mix_selects_question_types() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = load_corpus(&gen(tmp.path(), &["--type-mix", "1,0,0"])).unwrap();
    assert!(!corpus.questions().is_empty());
    assert!(corpus.questions().iter().all(|q| q.query_type == QueryType::T));
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen(tmp.path(), &[]);
    let ck = checkpoint::load(&train(&corpus, &tmp.path().join("run"), &["--lr", "0"])).unwrap();
    assert!(ck.header.progress.step > 0);
    let init = DmeModel::<f32>::new(*ck.model.config(), 2).unwrap();
    for (a, b) in ck.model.store().iter().zip(init.store().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn resume_continues_the_step_counter_and_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen(tmp.path(), &[]);
    let first = train(&corpus, &tmp.path().join("split"), &[]);
    let steps_per_epoch = checkpoint::load(&first).unwrap().header.progress.step;
    let resumed = train(&corpus, &tmp.path().join("split"), &["--resume", &s(&first), "--epochs", "2"]);
    let whole = train(&corpus, &tmp.path().join("whole"), &["--epochs", "2"]);

    let steps: Vec<u64> = trace(&tmp.path().join("split")).iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=2 * steps_per_epoch).collect::<Vec<_>>());
    let (r, w) = (checkpoint::load(&resumed).unwrap(), checkpoint::load(&whole).unwrap());
    assert_eq!(r.header.progress.step, 2 * steps_per_epoch);
    assert_eq!(r.model, w.model);
}

#[test]
fn eval_applies_masks_and_rejects_invalid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen(tmp.path(), &[]);
    let model = train(&corpus, &tmp.path().join("run"), &[]);
    let (c, m) = (s(&corpus), s(&model));
    let report_path = tmp.path().join("eval/masked.json");
    let stdout = ok(&["eval", "--corpus", &c, "--checkpoint", &m, "--mask", "video_transcript", "--out", &s(&report_path)]);
    assert!(stdout.contains("mAP"), "{stdout}");
    let report: EvalReport = read_json(&report_path).unwrap();
    assert!(report.provenance.mask.as_deref().unwrap_or("").contains("video_transcript"));
    assert!(report.slices["all"].n_queries > 0);

    let bad = tqvsr(&["eval", "--corpus", &c, "--checkpoint", &m, "--mask", "question_text,question_image"]);
    assert!(!bad.status.success());
    let bad = tqvsr(&["eval", "--corpus", &c, "--checkpoint", &m, "--mask", "audio"]);
    assert!(!bad.status.success());
}

#[test]
fn random_baseline_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen(tmp.path(), &[]);
    let out = tmp.path().join("random.json");
    ok(&["eval", "--corpus", &s(&corpus), "--baseline", "random", "--trials", "50", "--split", "train", "--out", &s(&out)]);
    let report: EvalReport = read_json(&out).unwrap();
    assert_eq!(report.provenance.trials, Some(50));
    let all = report.slices["all"];
    assert!(all.map > 0.0 && all.map < 0.5, "{all:?}");
}

#[test]
fn search_clamps_k_is_repeatable_and_rejects_unknown_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = gen(tmp.path(), &[]);
    let model = train(&corpus_dir, &tmp.path().join("run"), &[]);
    let corpus = load_corpus(&corpus_dir).unwrap();
    let q = corpus.questions_in(Split::Train).next().unwrap().question_id.clone();
    let (c, m) = (s(&corpus_dir), s(&model));
    let args = ["search", "--corpus", &c, "--checkpoint", &m, "--split", "train", "--question", &q, "--k", "1000000"];
    let first = ok(&args);
    assert_eq!(first.lines().count(), corpus.segments_in(Split::Train).count());
    assert_eq!(first, ok(&args));

    let index = tmp.path().join("train.tqvi");
    ok(&["index", "--corpus", &c, "--checkpoint", &m, "--split", "train", "--out", &s(&index)]);
    let with_index = ok(&["search", "--corpus", &c, "--checkpoint", &m, "--index", &s(&index), "--question", &q, "--k", "3"]);
    assert_eq!(with_index.lines().collect::<Vec<_>>(), first.lines().take(3).collect::<Vec<_>>());

    let missing = tqvsr(&["search", "--corpus", &c, "--checkpoint", &m, "--question", "q_nope"]);
    assert!(!missing.status.success());
}

#[test]
fn search_accepts_feature_files() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = gen(tmp.path(), &[]);
    let model = train(&corpus_dir, &tmp.path().join("run"), &[]);
    let dims = load_corpus(&corpus_dir).unwrap().dims();
    let (text, regions) = (tmp.path().join("text.tqvf"), tmp.path().join("regions.tqvf"));
    tqvsr::features::write(&text, &Matrix::from_vec(3, dims.text, (0..3 * dims.text).map(|i| (i as f32 * 0.37).sin()).collect())).unwrap();
    tqvsr::features::write(&regions, &Matrix::from_vec(2, dims.visual, (0..2 * dims.visual).map(|i| (i as f32 * 0.11).cos()).collect()))
        .unwrap();
    let out = ok(&[
        "search",
        "--corpus",
        &s(&corpus_dir),
        "--checkpoint",
        &s(&model),
        "--text",
        &s(&text),
        "--regions",
        &s(&regions),
        "--spans",
        "1=0:2",
        "--k",
        "4",
    ]);
    assert_eq!(out.lines().count(), 4);
    let bad = tqvsr(&[
        "search",
        "--corpus",
        &s(&corpus_dir),
        "--checkpoint",
        &s(&model),
        "--text",
        &s(&text),
        "--regions",
        &s(&regions),
        "--spans",
        "1=2:9",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn gradcheck_passes_and_detects_an_injected_fault() {
    let out = tqvsr(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tqvsr(&["gradcheck", "--coords", "100", "--fusion", "add"]);
    assert!(out.status.success());
    let out = tqvsr(&["gradcheck", "--inject-fault", "--fusion", "concat"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_rejects_unknown_keys_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen(tmp.path(), &[]);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 1, "warmup": 3}}"#).unwrap();
    let out = tqvsr(&["--config", &s(&bad), "train", "--corpus", &s(&corpus), "--out", &s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));

    let good = tmp.path().join("good.json");
    fs::write(&good, r#"{"encoder": {"d": 8, "layers": 1, "heads": 2}, "train": {"epochs": 3, "batch_size": 8}}"#).unwrap();
    let run = tmp.path().join("run");
    ok(&["--config", &s(&good), "train", "--corpus", &s(&corpus), "--out", &s(&run), "--epochs", "1"]);
    let ck = checkpoint::load(&run.join("model.tqvc")).unwrap();
    assert_eq!(ck.header.progress.epoch, 1);
    assert_eq!(ck.model.config().encoder.d, 8);
}
