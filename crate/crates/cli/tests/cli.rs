use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn catebounds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catebounds"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = catebounds(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

const QUICK: &str = "n = 400
seeds = [1]
[nuisance.train]
max_epochs = 5
[partition]
restarts = 1
[partition.train]
max_epochs = 5
";

#[test]
fn generate_writes_split_files_and_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "generate",
            "--dataset",
            "1",
            "--seed",
            "7",
            "--n",
            "2000",
            "--out",
            d.to_str().unwrap(),
        ]);
    }
    let data = a.join("data");
    assert_eq!(rows(&data.join("train.csv")), 800);
    assert_eq!(rows(&data.join("val.csv")), 400);
    assert_eq!(rows(&data.join("test.csv")), 800);
    for f in ["train.csv", "val.csv", "test.csv", "manifest.json"] {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(b.join("data").join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["dgp_version"].is_string());
}

#[test]
fn dataset3_has_twenty_instrument_columns() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "generate",
        "--dataset",
        "3",
        "--n",
        "100",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let header = fs::read_to_string(dir.path().join("data/train.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert_eq!(
        header.split(',').filter(|c| c.starts_with("z_")).count(),
        20
    );
}

#[test]
fn stages_chain_through_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    fs::write(&cfg, QUICK).unwrap();
    let run = dir.path().join("run");
    let (c, r) = (cfg.to_str().unwrap(), run.to_str().unwrap());
    ok(&[
        "generate",
        "--dataset",
        "3",
        "--seed",
        "2",
        "--n",
        "400",
        "--out",
        r,
    ]);
    ok(&["fit-nuisance", "--config", c, "--out", r]);
    for k in ["2", "3"] {
        ok(&["fit-partition", "--config", c, "--out", r, "--k", k]);
        ok(&["bounds", "--out", r, "--k", k]);
        ok(&[
            "bounds", "--config", c, "--out", r, "--k", k, "--method", "naive",
        ]);
    }
    let text = ok(&["evaluate", "--out", r, "--k", "3"]);
    assert!(text.contains("coverage") && text.contains("oracle_mse"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("ours/k3/metrics.json")).unwrap()).unwrap();
    assert!(report["msd_k"].is_number(), "two k values present");
    assert_eq!(rows(&run.join("ours/k2/bounds.csv")), 160);
    let log = fs::read_to_string(run.join("ours/k2/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,l_b,l_reg,l_aux,total,val_total,min_cell_mass"));
    ok(&["bounds", "--out", r, "--k", "1", "--method", "oracle"]);
    assert_eq!(rows(&run.join("oracle/grid_bounds.csv")), 101);
}

#[test]
fn run_and_reproduce_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    fs::write(&cfg, QUICK).unwrap();
    let out = dir.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let text = ok(&[
        "run",
        "--config",
        c,
        "--dataset",
        "2",
        "--k",
        "2",
        "--out",
        o,
    ]);
    assert!(text.contains("ours") && text.contains("naive"));
    assert!(out.join("d2/seed1/manifest.json").is_file());
    assert!(out.join("d2/summary.csv").is_file());

    ok(&["reproduce", "--config", c, "--table", "1", "--out", o]);
    assert_eq!(rows(&out.join("table1.csv")), 8);
    let table = fs::read_to_string(out.join("table1.txt")).unwrap();
    assert!(table.contains("±"));
    assert!(out.join("figure_bounds_table1.csv").is_file());
    assert_eq!(rows(&out.join("figure_width_vs_k_table1.csv")), 8);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = catebounds(&["fit-nuisance", "--out", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "dataset = 1\nunknown_field = 3\n").unwrap();
    let out = catebounds(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    let out = catebounds(&[
        "run",
        "--dataset",
        "1",
        "--method",
        "oracle",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
