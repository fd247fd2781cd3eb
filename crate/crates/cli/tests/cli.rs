use std::path::Path;
use std::process::Command;

fn projtune(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_projtune")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "projtune {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn parameter_table() {
    let out = projtune(&["params", "count"]);
    assert!(out.starts_with("strategy,trainable,total,trainable_pct\n"));
    assert!(out.contains("Prefix,9830400,416168025,2.36"));
    assert_eq!(out.lines().count(), 5);
}

#[test]
fn flop_estimates_follow_strategy_order() {
    let out = projtune(&["flops", "estimate"]);
    let train: Vec<f64> = out.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let [custom, leo, lldb, prefix] = train[..] else { panic!("{out}") };
    assert!(lldb < prefix && prefix <= leo && leo <= custom);
}

#[test]
fn synthetic_corpus_statistics() {
    let dir = tempfile::tempdir().unwrap();
    projtune(&["synth", "gen", "--projects", "6", "--examples", "5", "--out", arg(dir.path())]);
    let corpus = dir.path().join("corpus.jsonl");
    assert!(dir.path().join("dataset.jsonl").exists());
    let stats = projtune(&["corpus", "stats", arg(&corpus)]);
    assert_eq!(stats.lines().filter(|l| l.starts_with("project-")).count(), 6);
    let matrix = dir.path().join("matrix.csv");
    projtune(&["corpus", "matrix", arg(&corpus), "--out", arg(&matrix)]);
    let csv = std::fs::read_to_string(&matrix).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn kruskal_wallis_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("groups.csv");
    std::fs::write(&input, "group,value\na,1\na,2\na,3\nb,4\nb,5\nb,6\n").unwrap();
    let out = projtune(&["stats", "kw", arg(&input)]);
    assert!(out.contains("3.857"), "{out}");
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    projtune(&["synth", "gen", "--projects", "1", "--examples", "12", "--out", arg(dir.path())]);
    let data = dir.path().join("dataset.jsonl");
    let stem = dir.path().join("model");
    projtune(&[
        "train",
        "--data",
        arg(&data),
        "--max-steps",
        "4",
        "--eval-every",
        "2",
        "--out",
        arg(&stem),
    ]);
    assert!(dir.path().join("model.curve.csv").exists());
    let report = dir.path().join("eval");
    projtune(&[
        "eval",
        "--checkpoint",
        arg(&stem),
        "--data",
        arg(&data),
        "--beam-width",
        "2",
        "--max-len",
        "12",
        "--out",
        arg(&report),
    ]);
    let text = std::fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(report.join("predictions.jsonl").exists());
}
