use std::path::Path;
use std::process::{Command, Output};

fn germeval(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_germeval"))
        .current_dir(dir)
        .env_remove("GERMEVAL_RUN_STORE")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = germeval(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn corpus(dir: &Path) {
    ok(dir, &["synth", "--n", "60", "--seed", "3", "--output", "train.csv"]);
}

fn run_lines(store: &Path) -> usize {
    if !store.exists() {
        return 0;
    }
    std::fs::read_to_string(store).unwrap().matches("\"event\":\"run_created\"").count()
}

#[test]
fn split_manifest_header() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(dir.path(), &["split", "--input", "train.csv", "--ratio", "0.8", "--seed", "42", "--output", "m.txt"]);
    let manifest = std::fs::read_to_string(dir.path().join("m.txt")).unwrap();
    assert_eq!(manifest.lines().next(), Some("# seed=42 ratio=0.8"));
    assert_eq!(manifest.lines().count(), 1 + 12);
}

#[test]
fn sweep_creates_one_record_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let out = ok(
        dir.path(),
        &[
            "sweep", "--input", "train.csv", "--lrs", "1e-3,2e-3,3e-3", "--epoch-grid", "1,2", "--max-len", "32",
            "--jobs", "3", "--run-store", "runs.jsonl",
        ],
    );
    assert_eq!(out.lines().count(), 6);
    assert_eq!(run_lines(&dir.path().join("runs.jsonl")), 6);
    let table = ok(dir.path(), &["compare", "--run-store", "runs.jsonl"]);
    assert_eq!(table.lines().count(), 7);
}

#[test]
fn dry_run_creates_no_record() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(dir.path(), &["train", "--input", "train.csv", "--dry-run", "--max-len", "32", "--run-store", "runs.jsonl"]);
    assert_eq!(run_lines(&dir.path().join("runs.jsonl")), 0);
}

#[test]
fn run_store_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_germeval"))
        .current_dir(dir.path())
        .env("GERMEVAL_RUN_STORE", "env-runs.jsonl")
        .args(["train", "--input", "train.csv", "--epochs", "1", "--max-len", "32"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(run_lines(&dir.path().join("env-runs.jsonl")), 1);
}

#[test]
fn exit_codes_and_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], i32, &str); 4] = [
        (&["train", "--no-such-flag"], 1, "usage"),
        (&["ingest", "--input", "missing.csv"], 2, "data"),
        (&["predict", "--model", "nowhere", "--input", "x.csv"], 2, "data"),
        (&["split", "--input", "bad.csv"], 2, "data"),
    ];
    std::fs::write(dir.path().join("bad.csv"), "id,text\n1,hallo\n").unwrap();
    for (args, code, kind) in cases {
        let out = germeval(dir.path(), args);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error kind={kind} code={code}: ")), "{err}");
    }
    assert_eq!(germeval(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn diverged_run_exits_with_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let out = germeval(
        dir.path(),
        &["train", "--input", "train.csv", "--lr", "1e30", "--epochs", "2", "--max-len", "32", "--run-store", "r.jsonl"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    std::fs::write(
        dir.path().join("germeval.toml"),
        "train_corpus = \"train.csv\"\nsplit_ratio = 0.5\n[train]\nmax_len = 32\nepochs = 1\n",
    )
    .unwrap();
    let out = ok(dir.path(), &["train", "--dry-run"]);
    assert!(out.contains("train=30 validation=30"), "{out}");
    assert!(out.contains("\"max_len\":32"), "{out}");
    let out = ok(dir.path(), &["train", "--dry-run", "--ratio", "0.8", "--max-len", "48"]);
    assert!(out.contains("train=48 validation=12") && out.contains("\"max_len\":48"), "{out}");
    std::fs::write(dir.path().join("bad.toml"), "treshold = 0.5\n").unwrap();
    let out = germeval(dir.path(), &["--config", "bad.toml", "ingest"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let read = |name: &str| std::fs::read(d.join(name)).unwrap();
    let ingest = ["ingest", "--input", "train.csv", "--output", "clean.csv"];
    let split = ["split", "--input", "train.csv", "--seed", "7", "--output", "m.txt"];
    let first = (ok(d, &ingest), read("clean.csv"), ok(d, &split), read("m.txt"));
    let second = (ok(d, &ingest), read("clean.csv"), ok(d, &split), read("m.txt"));
    assert_eq!(first, second);

    ok(d, &["train-full", "--input", "train.csv", "--mode", "joint", "--epochs", "1", "--max-len", "32", "--run-store", "r.jsonl", "--output-dir", "models"]);
    let model = std::fs::read_dir(d.join("models")).unwrap().next().unwrap().unwrap().path();
    let model = model.to_str().unwrap();
    ok(d, &["predict", "--model", model, "--input", "train.csv", "--output", "p.json"]);
    ok(d, &["export", "--predictions", "p.json", "--output", "sub.csv"]);
    let a = read("sub.csv");
    ok(d, &["export", "--predictions", "p.json", "--output", "sub.csv"]);
    assert_eq!(a, read("sub.csv"));
    assert!(String::from_utf8(a).unwrap().starts_with("comment_id,Sub1_Toxic,Sub2_Engaging,Sub3_FactClaiming\n"));
    let report = ok(d, &["analyze", "--gold", "train.csv", "--predictions", "p.json", "--filter", "all"]);
    assert!(report.contains("false_positive"));
}

#[test]
fn augment_writes_merged_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    std::fs::write(d.join("ext.tsv"), "du GIFT\tOFFENSE\nschoen\tOTHER\negal\tNOISE\n").unwrap();
    std::fs::write(d.join("map.tsv"), "OFFENSE\ttoxic_present\nOTHER\ttoxic_absent\nNOISE\tdrop\n").unwrap();
    let out = ok(d, &["augment", "--input", "train.csv", "--external", "ext.tsv", "--mapping", "map.tsv", "--output", "merged.csv"]);
    assert!(out.contains("dropped=1 merged=62"), "{out}");
    let merged = ok(d, &["ingest", "--input", "merged.csv"]);
    assert!(merged.starts_with("entries=62"), "{merged}");
    std::fs::write(d.join("short.tsv"), "OFFENSE\ttoxic_present\n").unwrap();
    let out = germeval(d, &["augment", "--input", "train.csv", "--external", "ext.tsv", "--mapping", "short.tsv"]);
    assert_eq!(out.status.code(), Some(2));
}
