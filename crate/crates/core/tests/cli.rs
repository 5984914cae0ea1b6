use std::path::Path;
use std::process::{Command, Output};

fn perminv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perminv"))
        .current_dir(dir)
        .args(args)
        .env("PERMINV_OUT_DIR", dir)
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(perminv(d.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(perminv(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        perminv(d.path(), &["gen", "nonsense"]).status.code(),
        Some(1)
    );
    assert_eq!(
        perminv(d.path(), &["sweep", "--lambdas", ""]).status.code(),
        Some(1)
    );
    let missing = perminv(
        d.path(),
        &["audit", "--model", "absent", "--data", "absent"],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent"));
}

#[test]
fn gen_reports_rows_and_writes_a_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = perminv(
        d.path(),
        &[
            "gen", "sum", "--count", "200", "--len", "10", "--max", "19", "--seed", "1",
        ],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 200 rows"));
    let manifest = std::fs::read_to_string(d.path().join("sum.data.manifest")).unwrap();
    assert!(manifest.starts_with("perminv gen sum"));
    assert!(manifest.contains("seed=1"));
    let data = perminv::tasks::SequenceDataset::load(&d.path().join("sum.data")).unwrap();
    assert_eq!(data.len(), 200);
    assert!(data
        .sequences
        .iter()
        .all(|s| s.len() == 10 && s.iter().all(|&x| (0..=19).contains(&x))));
}

#[test]
fn flags_override_the_config_file() {
    let d = tempfile::tempdir().unwrap();
    let spec = "seed = 3\n[task]\ntask = \"sum\"\ncount = 20\nmin_len = 4\nmax_len = 4\nalphabet_max = 5\n[model]\nwidth = 2\n[training]\nepochs = 6\n";
    std::fs::write(d.path().join("spec.toml"), spec).unwrap();
    let out = perminv(
        d.path(),
        &["train", "--config", "spec.toml", "--epochs", "2"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(d.path().join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let saved = perminv::experiments::ExperimentSpec::from_toml(
        &std::fs::read_to_string(d.path().join("run.toml")).unwrap(),
    )
    .unwrap();
    assert_eq!(saved.seed, 3);
    assert_eq!(saved.model.width, 2);
    assert_eq!(saved.training.epochs, 2);
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.toml"), "[training]\nepohcs = 3\n").unwrap();
    let out = perminv(d.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn audit_of_the_exact_parity_model_is_zero() {
    let d = tempfile::tempdir().unwrap();
    assert!(perminv(d.path(), &["construct-parity", "--max-len", "8"])
        .status
        .success());
    assert!(perminv(
        d.path(),
        &["gen", "parity", "--count", "30", "--len", "2..8"]
    )
    .status
    .success());
    let out = perminv(
        d.path(),
        &[
            "audit",
            "--model",
            "parity-rnn.model",
            "--data",
            "parity.data",
        ],
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(d.path().join("audit.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0, "{row}");
    }
}
