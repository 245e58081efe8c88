use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctxlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxlm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ctxlm(args);
    assert!(
        out.status.success(),
        "ctxlm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn last_stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// synth -> train -> lattices -> rescore -> eval -> analyze at toy scale.
fn pipeline(dir: &Path, seed: &str) -> (String, String) {
    let cfg = p(dir, "tiny.cfg");
    fs::write(&cfg, "# toy sizes\nentities = 20\ntemplates = 8\ntrain_size = 150\nvalid_size = 20\ntest_size = 30\n").unwrap();
    ok(&["synth-data", "--seed", seed, "--config", &cfg, "--out-dir", &p(dir, "data")]);
    let (train, valid, test, vocab) = (p(dir, "data/train.jsonl"), p(dir, "data/valid.jsonl"), p(dir, "data/test.jsonl"), p(dir, "data/vocab.txt"));

    ok(&["train", "--variant", "ngram", "--order", "3", "--train", &train, "--vocab", &vocab, "--out", &p(dir, "lm.arpa")]);
    for variant in ["lstm", "pointer"] {
        let out = ok(&[
            "train", "--seed", seed, "--variant", variant, "--train", &train, "--valid", &valid, "--vocab", &vocab,
            "--out", &p(dir, &format!("{variant}.ckpt")), "--epochs", "2", "--hidden", "8", "--layers", "1", "--lr", "0.3",
        ]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("best epoch"));
        let log = fs::read_to_string(p(dir, &format!("{variant}.ckpt.metrics.tsv"))).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert_eq!(log.lines().next().unwrap().split('\t').count(), 5);
    }
    let out = ok(&["ppl", "--model", &p(dir, "pointer.ckpt"), "--vocab", &vocab, "--test", &valid, "--test", &test, "--workers", "2"]);
    let lines: Vec<String> = String::from_utf8_lossy(&out.stdout).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("valid\t") && lines[1].starts_with("test\t"));

    ok(&["synth-lattices", "--seed", seed, "--corpus", &test, "--vocab", &vocab, "--arpa", &p(dir, "lm.arpa"), "--out", &p(dir, "test.lattices")]);
    let lats = p(dir, "test.lattices");
    ok(&["rescore", "--first-pass", "--lattices", &lats, "--corpus", &test, "--vocab", &vocab, "--out", &p(dir, "firstpass.tsv")]);
    for variant in ["lstm", "pointer"] {
        ok(&[
            "rescore", "--lattices", &lats, "--corpus", &test, "--vocab", &vocab, "--model", &p(dir, &format!("{variant}.ckpt")),
            "--arpa", &p(dir, "lm.arpa"), "--lambda", "0.6", "--k", "5", "--beam", "32", "--workers", "2",
            "--out", &p(dir, &format!("{variant}.tsv")),
        ]);
    }
    let fp = format!("firstpass={}", p(dir, "firstpass.tsv"));
    let lstm = format!("lstm={}", p(dir, "lstm.tsv"));
    let pointer = format!("pointer={}", p(dir, "pointer.tsv"));
    ok(&["eval-wer", "--reference", &test, "--hyp", &fp, "--hyp", &lstm, "--hyp", &pointer, "--ppl", "pointer=1.5", "--out", &p(dir, "summary.csv")]);
    ok(&[
        "analyze", "--reference", &test, "--vocab", &vocab, "--first-pass", &p(dir, "firstpass.tsv"), "--hyp", &lstm,
        "--hyp", &pointer, "--top-n", "10", "--min-bucket", "1", "--out", &p(dir, "werr.csv"),
    ]);
    (fs::read_to_string(p(dir, "summary.csv")).unwrap(), fs::read_to_string(p(dir, "werr.csv")).unwrap())
}

#[test]
fn pipeline_is_deterministic_under_one_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path(), "11");
    let second = pipeline(b.path(), "11");
    assert_eq!(first, second);

    let summary: Vec<&str> = first.0.lines().collect();
    assert_eq!(summary[0], "model,split,perplexity,wer");
    assert_eq!(summary.len(), 4);
    assert!(summary[3].starts_with("pointer,test,1.500000,"));
    assert!(summary[1].starts_with("firstpass,test,,"));
    assert!(first.1.starts_with("bucket_k,model,n_utts,wer_firstpass,wer_model,werr\n"));
    for f in ["train.jsonl", "vocab.txt"] {
        assert_eq!(fs::read(a.path().join("data").join(f)).unwrap(), fs::read(b.path().join("data").join(f)).unwrap());
    }
    assert_eq!(fs::read(a.path().join("pointer.ckpt")).unwrap(), fs::read(b.path().join("pointer.ckpt")).unwrap());
}

#[test]
fn resolved_config_layers_flags_over_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "c.cfg");
    fs::write(&cfg, "entities = 12\ntemplates = 5\ntrain_size = 40\nvalid_size = 5\ntest_size = 5\n").unwrap();
    let out = ok(&["synth-data", "--config", &cfg, "--templates", "6", "--out-dir", &p(dir.path(), "d")]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("entities = 12"));
    assert!(err.contains("templates = 6"));
    assert!(err.contains("relevance = 0.9"), "{err}");
    assert_eq!(fs::read_to_string(dir.path().join("d/train.jsonl")).unwrap().lines().count(), 40);
}

#[test]
fn errors_carry_a_machine_readable_prefix() {
    let out = ctxlm(&["rescore", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]:"));

    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "missing.txt");
    let out = ctxlm(&["ppl", "--arpa", &missing, "--vocab", &missing, "--test", &missing]);
    assert_eq!(out.status.code(), Some(1));
    let line = last_stderr_line(&out);
    assert!(line.starts_with("error[corpus]:"), "{line}");
    assert_eq!(line.matches("No such file").count(), 1, "{line}");

    let cfg = p(dir.path(), "bad.cfg");
    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = ctxlm(&["synth-data", "--config", &cfg, "--out-dir", &p(dir.path(), "x")]);
    let line = last_stderr_line(&out);
    assert!(line.starts_with("error[config]:") && line.contains("bogus_key"), "{line}");

    let out = ctxlm(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn version_lists_artifact_formats() {
    let out = ok(&["--version"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["ctxlm ", "checkpoint format 1", "lattice text format", "ARPA", "vocabulary format"] {
        assert!(text.contains(needle), "{needle}");
    }
}
