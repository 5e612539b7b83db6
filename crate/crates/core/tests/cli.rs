use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geoembed::manifest::Manifest;

fn geoembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoembed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, seed: &str) -> Output {
    geoembed(&[
        "synth",
        "--seed",
        seed,
        "--trajectories",
        "300",
        "--out",
        &p(dir, "records.csv"),
        "--regions-out",
        &p(dir, "regions.csv"),
    ])
}

fn prepare(dir: &Path) {
    assert_ok(&synth(dir, "7"));
    assert_ok(&geoembed(&[
        "ingest",
        "--input",
        &p(dir, "records.csv"),
        "--out-trajectories",
        &p(dir, "trajectories.tsv"),
        "--out-index",
        &p(dir, "index.tsv"),
    ]));
    assert_ok(&geoembed(&[
        "build-graphs",
        "--trajectories",
        &p(dir, "trajectories.tsv"),
        "--index",
        &p(dir, "index.tsv"),
        "--out-flow",
        &p(dir, "flow.txt"),
        "--out-spatial",
        &p(dir, "spatial.txt"),
    ]));
}

fn train_args(dir: &Path) -> Vec<String> {
    [
        "train",
        "--trajectories",
        &p(dir, "trajectories.tsv"),
        "--index",
        &p(dir, "index.tsv"),
        "--flow",
        &p(dir, "flow.txt"),
        "--spatial",
        &p(dir, "spatial.txt"),
        "--out",
        &p(dir, "embeddings.txt"),
        "--epochs",
        "3",
        "--deterministic",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn help_and_version_exit_zero() {
    let out = geoembed(&["--help"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("build-graphs"));
    assert_ok(&geoembed(&["--version"]));
}

#[test]
fn unknown_subcommand_and_flag_exit_one() {
    for args in [&["frobnicate"][..], &["synth", "--bogus"][..], &[][..]] {
        let out = geoembed(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn synth_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_ok(&synth(a.path(), "7"));
    assert_ok(&synth(b.path(), "7"));
    for f in ["records.csv", "regions.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let train: Vec<String> = train_args(d);
    let train: Vec<&str> = train.iter().map(String::as_str).collect();
    assert_ok(&geoembed(&train));

    let query = geoembed(&[
        "query",
        "--embeddings",
        &p(d, "embeddings.txt"),
        "--cell",
        "18:0",
        "-k",
        "3",
    ]);
    // a cell outside the city is a validation error
    assert_eq!(query.status.code(), Some(1));
    let index = fs::read_to_string(d.join("index.tsv")).unwrap();
    let cell = index
        .lines()
        .next()
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .to_string();
    let query = geoembed(&[
        "query",
        "--embeddings",
        &p(d, "embeddings.txt"),
        "--cell",
        &cell,
        "-k",
        "3",
        "--out",
        &p(d, "neighbors.csv"),
    ]);
    assert_ok(&query);
    let neighbors = fs::read_to_string(d.join("neighbors.csv")).unwrap();
    assert_eq!(neighbors.lines().count(), 4);
    assert!(neighbors.starts_with("rank,cell_id,similarity\n1,"));

    let eval = geoembed(&[
        "eval",
        "--embeddings",
        &p(d, "embeddings.txt"),
        "--regions",
        &p(d, "regions.csv"),
        "--out",
        &p(d, "eval.json"),
        "--features",
        &p(d, "features.csv"),
    ]);
    assert_ok(&eval);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(fs::read_to_string(d.join("features.csv"))
        .unwrap()
        .starts_with("cell_id,v1,"));

    let m = Manifest::load(d).unwrap();
    let stages: Vec<&str> = m.entries.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(
        stages,
        ["synth", "ingest", "build-graphs", "train", "query", "eval"]
    );
    assert_eq!(m.entries[3].seed, Some(0));
    assert_eq!(m.entries[3].inputs.len(), 4);
}

#[test]
fn query_to_stdout_is_plain_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let train: Vec<String> = train_args(d);
    let train: Vec<&str> = train.iter().map(String::as_str).collect();
    assert_ok(&geoembed(&train));
    let out = geoembed(&[
        "query",
        "--embeddings",
        &p(d, "embeddings.txt"),
        "--lat",
        "23.1",
        "--lng",
        "113.3",
    ]);
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 3));
}

#[test]
fn train_with_missing_graph_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    fs::remove_file(d.join("spatial.txt")).unwrap();
    let args = train_args(d);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = geoembed(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&p(d, "spatial.txt")));
}

#[test]
fn tampered_artifact_fails_digest_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let mut flow = fs::read_to_string(d.join("flow.txt")).unwrap();
    flow.push('\n');
    fs::write(d.join("flow.txt"), flow).unwrap();
    let args = train_args(d);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = geoembed(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest mismatch"));
}

#[test]
fn deterministic_stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let args = train_args(d);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_ok(&geoembed(&args));
    let first = fs::read(d.join("embeddings.txt")).unwrap();
    assert_ok(&geoembed(&args));
    assert_eq!(first, fs::read(d.join("embeddings.txt")).unwrap());
    // a re-run appends, it does not rewrite history
    assert_eq!(
        Manifest::load(d)
            .unwrap()
            .entries
            .iter()
            .filter(|e| e.stage == "train")
            .count(),
        2
    );
}
