use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stum::data::{load_dataset, DataFormat, LoadOptions};

/// A small model and short run so each invocation takes about a second.
const SMALL: &[&str] = &[
    "synth.frames=200",
    "model.embed_dim=8",
    "model.num_mlrf=1",
    "model.astucs_per_block=2",
    "model.backbone.hidden=[16]",
    "train.max_epochs=2",
];

fn stum(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stum"));
    cmd.args(args).env_remove("STUM_SEED").env_remove("STUM_THREADS");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn loss_columns(history: &Path) -> Vec<String> {
    fs::read_to_string(history)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn synth_is_reproducible_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&stum(&["synth", "--out", path(&a)], &["synth.seed=1"]));
    ok(&stum(&["synth", "--out", path(&b)], &["synth.seed=1"]));
    for file in ["synth.flatbin", "synth.json", "edges.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let (series, graph) = load_dataset(
        &a.join("synth.flatbin"),
        Some(&a.join("edges.csv")),
        DataFormat::Flatbin,
        &LoadOptions::default(),
    )
    .unwrap();
    assert_eq!((series.nodes(), series.frames()), (20, 500));
    assert_eq!(graph.unwrap().num_nodes(), 20);
}

#[test]
fn synth_rejects_more_regions_than_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let out = stum(
        &["synth", "--out", path(dir.path())],
        &["synth.nodes=4", "synth.regions=5"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("regions"), "{}", stderr(&out));
}

#[test]
fn train_is_deterministic_and_eval_reports_horizons() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut sets = SMALL.to_vec();
    sets.push("seed=7");
    ok(&stum(&["train", "--out", path(&a)], &sets));
    ok(&stum(&["train", "--out", path(&b)], &sets));
    assert_eq!(
        loss_columns(&a.join("history.csv")),
        loss_columns(&b.join("history.csv"))
    );
    for file in ["checkpoint.json", "checkpoint.bin", "predictions.csv", "embeddings.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let resolved = fs::read_to_string(a.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("model.seed = 7") && resolved.contains("train.seed = 7"));

    let out = stum(&["eval", "--out", path(&a), "--horizons", "3,6,12"], &SMALL[..5]);
    ok(&out);
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r.split(',').next().unwrap()).collect::<Vec<_>>(),
        ["3", "6", "12", "avg"]
    );
    for row in rows {
        assert!(row.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }

    // Corrupting the blob must surface as a checkpoint mismatch.
    let blob = a.join("checkpoint.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[3] ^= 0x10;
    fs::write(&blob, bytes).unwrap();
    let out = stum(&["eval", "--out", path(&a)], &SMALL[..5]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("checkpoint mismatch"), "{}", stderr(&out));
}

#[test]
fn env_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stum"))
        .args(["synth", "--out", path(dir.path()), "--set", "seed=3"])
        .env("STUM_SEED", "11")
        .output()
        .unwrap();
    ok(&out);
    let resolved = fs::read_to_string(dir.path().join("resolved.cfg")).unwrap();
    assert!(resolved.contains("\nseed = 11\n"), "{resolved}");
}

#[test]
fn missing_data_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.flatbin");
    let set = format!("data.path={}", path(&missing));
    let out = stum(&["train", "--out", path(dir.path())], &[&set]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent.flatbin"), "{}", stderr(&out));
}

#[test]
fn graphconv_without_edges_is_missing_graph() {
    let dir = tempfile::tempdir().unwrap();
    ok(&stum(&["synth", "--out", path(dir.path())], &[]));
    let set = format!("data.path={}", path(&dir.path().join("synth.flatbin")));
    let out = stum(
        &["train", "--out", path(dir.path())],
        &[&set, "model.backbone=graphconv"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("requires an adjacency graph"), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_rejected() {
    let out = stum(&["synth", "--out", "unused"], &["model.embed=3"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown key `model.embed`"), "{}", stderr(&out));
}

#[test]
fn ablation_rows_are_sorted_with_growing_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = SMALL.to_vec();
    sets.push("train.max_epochs=1");
    let out = stum(
        &[
            "ablate",
            "--out",
            path(dir.path()),
            "--axis",
            "astuc",
            "--values",
            "4,2",
        ],
        &sets,
    );
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("ablation-astuc.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), (2.0, 4.0));
    assert!(rows[0][4] < rows[1][4]);
    for run in ["astuc-2", "astuc-4"] {
        for file in ["report.json", "report.csv", "history.csv", "resolved.cfg"] {
            assert!(dir.path().join(run).join(file).is_file(), "{run}/{file}");
        }
    }
}

#[test]
fn threads_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_stum"))
        .args(["synth", "--out", "unused"])
        .env("STUM_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
