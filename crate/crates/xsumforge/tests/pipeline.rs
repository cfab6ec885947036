//! End-to-end pipeline runs through the command-line interface: preprocess,
//! topic training, model training, decoding, evaluation, and analysis.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::tempdir;
use xsumforge::cli::{run, CorpusAnalysis};
use xsumforge::corpus::load_jsonl;
use xsumforge::evalsuite::SystemReport;
use xsumforge::topiclda::TopicModel;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn arg(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn run_ok(args: &[&str]) {
    let mut argv = vec!["xsumforge"];
    argv.extend_from_slice(args);
    assert_eq!(run(argv.clone()), 0, "command failed: {argv:?}");
}

#[test]
fn full_pipeline_on_the_fixture_corpus() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let corpus = fixture("corpus.jsonl");

    run_ok(&[
        "preprocess",
        "--input",
        &arg(&corpus),
        "--out-dir",
        &arg(&data),
        "--vocab-cap",
        "400",
        "--ratios",
        "0.8,0.1,0.1",
    ]);
    let vocab_path = data.join("vocab.tsv");
    for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        assert!(data.join(name).exists(), "missing {name}");
    }
    let train_docs = load_jsonl(&data.join("train.jsonl")).unwrap();
    let val_docs = load_jsonl(&data.join("val.jsonl")).unwrap();
    let test_docs = load_jsonl(&data.join("test.jsonl")).unwrap();
    assert_eq!(train_docs.len() + val_docs.len() + test_docs.len(), 100);
    assert_eq!(train_docs.len(), 80);

    let topics_path = dir.path().join("topics.bin");
    run_ok(&[
        "train-lda",
        "--corpus",
        &arg(&data.join("train.jsonl")),
        "--vocab",
        &arg(&vocab_path),
        "--out",
        &arg(&topics_path),
        "--topics",
        "3",
        "--iters",
        "30",
    ]);
    let model = TopicModel::load(&topics_path).unwrap();
    assert_eq!(model.topics, 3);

    let run_dir = dir.path().join("run-plain");
    run_ok(&[
        "train",
        "--config",
        &arg(&fixture("toy.json")),
        "--train",
        &arg(&data.join("train.jsonl")),
        "--val",
        &arg(&data.join("val.jsonl")),
        "--vocab",
        &arg(&vocab_path),
        "--out-dir",
        &arg(&run_dir),
    ]);
    assert!(run_dir.join("model.ckpt").exists());
    assert!(run_dir.join("config.json").exists());
    assert!(run_dir.join("ckpt-epoch1").exists());
    assert!(run_dir.join("training_log.csv").exists());
    let log = fs::read_to_string(run_dir.join("training_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_ppl,lr"));
    assert_eq!(log.lines().count(), 3, "header plus two epochs");

    let sys_path = dir.path().join("sys.jsonl");
    run_ok(&[
        "summarize",
        "--ckpt",
        &arg(&run_dir.join("model.ckpt")),
        "--vocab",
        &arg(&vocab_path),
        "--beam",
        "3",
        "--max-len",
        "8",
        "--input",
        &arg(&data.join("test.jsonl")),
        "--output",
        &arg(&sys_path),
    ]);
    let first = fs::read(&sys_path).unwrap();
    assert_eq!(
        String::from_utf8_lossy(&first).lines().count(),
        test_docs.len(),
        "one output line per test document"
    );

    let again = dir.path().join("sys-again.jsonl");
    run_ok(&[
        "summarize",
        "--ckpt",
        &arg(&run_dir.join("model.ckpt")),
        "--vocab",
        &arg(&vocab_path),
        "--beam",
        "3",
        "--max-len",
        "8",
        "--input",
        &arg(&data.join("test.jsonl")),
        "--output",
        &arg(&again),
    ]);
    assert_eq!(first, fs::read(&again).unwrap(), "decoding is reproducible");

    let report_path = dir.path().join("report.json");
    run_ok(&[
        "evaluate",
        "--outputs",
        &arg(&sys_path),
        "--refs",
        &arg(&data.join("test.jsonl")),
        "--out",
        &arg(&report_path),
    ]);
    let report: SystemReport =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.documents, test_docs.len());
    assert!(report.rouge.r1.f1 >= 0.0 && report.rouge.r1.f1 <= 1.0);
}

#[test]
fn topic_conditioned_training_consumes_the_topic_model() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "preprocess",
        "--input",
        &arg(&fixture("corpus.jsonl")),
        "--out-dir",
        &arg(&data),
        "--vocab-cap",
        "400",
        "--ratios",
        "0.1,0.1,0.8",
    ]);
    let topics_path = dir.path().join("topics.bin");
    run_ok(&[
        "train-lda",
        "--corpus",
        &arg(&data.join("train.jsonl")),
        "--vocab",
        &arg(&data.join("vocab.tsv")),
        "--out",
        &arg(&topics_path),
        "--topics",
        "3",
        "--iters",
        "20",
    ]);

    // A topic-conditioned variant without --topics is a usage error.
    let run_dir = dir.path().join("run-topic");
    let missing = run([
        "xsumforge",
        "train",
        "--config",
        &arg(&fixture("toy.json")),
        "--train",
        &arg(&data.join("train.jsonl")),
        "--val",
        &arg(&data.join("val.jsonl")),
        "--vocab",
        &arg(&data.join("vocab.tsv")),
        "--out-dir",
        &arg(&run_dir),
        "--variant",
        "enc_ttD_dec_tD",
    ]);
    assert_eq!(missing, 1);

    run_ok(&[
        "train",
        "--config",
        &arg(&fixture("toy.json")),
        "--train",
        &arg(&data.join("train.jsonl")),
        "--val",
        &arg(&data.join("val.jsonl")),
        "--vocab",
        &arg(&data.join("vocab.tsv")),
        "--out-dir",
        &arg(&run_dir),
        "--variant",
        "enc_ttD_dec_tD",
        "--topics",
        &arg(&topics_path),
    ]);

    let sys_path = dir.path().join("sys.jsonl");
    run_ok(&[
        "summarize",
        "--ckpt",
        &arg(&run_dir.join("model.ckpt")),
        "--vocab",
        &arg(&data.join("vocab.tsv")),
        "--topics",
        &arg(&topics_path),
        "--beam",
        "2",
        "--max-len",
        "6",
        "--input",
        &arg(&data.join("val.jsonl")),
        "--output",
        &arg(&sys_path),
    ]);

    // The same checkpoint without its topic model is rejected as bad data.
    let refused = run([
        "xsumforge",
        "summarize",
        "--ckpt",
        &arg(&run_dir.join("model.ckpt")),
        "--vocab",
        &arg(&data.join("vocab.tsv")),
        "--input",
        &arg(&data.join("val.jsonl")),
    ]);
    assert_eq!(refused, 2);
}

#[test]
fn preprocess_ingests_article_pages() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("html-data");
    run_ok(&[
        "preprocess",
        "--input",
        &arg(&fixture("pages")),
        "--out-dir",
        &arg(&data),
        "--vocab-cap",
        "300",
        "--ratios",
        "1,0,0",
    ]);
    let docs = load_jsonl(&data.join("train.jsonl")).unwrap();
    assert_eq!(docs.len(), 3);
    let storm = docs.iter().find(|d| d.id == "storm-hits-coast").unwrap();
    assert!(storm.raw_summary.contains("powerful storm"));
    assert!(storm.sentences.len() >= 3);
    assert!(!storm.raw_summary.contains("ignore me"), "script text never leaks");
}

#[test]
fn analyze_corpus_reports_extractive_baselines() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("analysis.json");
    run_ok(&["analyze-corpus", "--corpus", &arg(&fixture("corpus.jsonl")), "--out", &arg(&out)]);
    let analysis: CorpusAnalysis =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(analysis.documents, 100);
    assert!(analysis.avg_document_tokens > analysis.avg_summary_tokens);
    for name in ["lead", "ext-oracle", "random"] {
        assert!(analysis.systems.contains_key(name), "missing {name} row");
    }
    for name in ["lead", "ext-oracle"] {
        let novelty = analysis.systems[name].novelty.pct_novel;
        assert_eq!(novelty, [0.0; 4], "{name} copies from the source verbatim");
    }
    let oracle = &analysis.systems["ext-oracle"];
    let lead = &analysis.systems["lead"];
    let random = &analysis.systems["random"];
    assert!(oracle.rouge.r1.f1 >= lead.rouge.r1.f1);
    assert!(oracle.rouge.r1.f1 >= random.rouge.r1.f1);
    assert!(analysis.gold_novelty_pct[0] > 0.0, "gold summaries add novel words");
}

#[test]
fn empty_stdin_is_not_required_for_file_input() {
    // Regression guard: --input reads the file, never stdin.
    let dir = tempdir().unwrap();
    let missing = run([
        "xsumforge",
        "evaluate",
        "--outputs",
        &arg(&dir.path().join("nope.jsonl")),
        "--refs",
        &arg(&fixture("corpus.jsonl")),
    ]);
    assert_eq!(missing, 2);
}
