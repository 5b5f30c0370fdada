use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chemolab::diagnostics::{DiagnosticsRecord, CSV_HEADER};
use chemolab::ScalarField;

fn chemolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chemolab"))
        .args(args)
        .env_remove("CHEMOLAB_OUT")
        .output()
        .expect("spawn chemolab")
}

fn config(source: &str, initial: &str, run: &str, extra: &str) -> String {
    format!(
        "[grid]\nnx = 16\nny = 16\n\n[physics]\ntau = 0\nchi = 1\n\n[source]\nfamily = {source}\n\n\
         [initial]\n{initial}\n\n[run]\n{run}\n\n[classify]\nc_gn = 1\ngn_floor_budget = 0\n{extra}"
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.trim_start().strip_prefix('=').map(|v| v.trim().to_string()))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

const RANDOM: &str = "kind = random\nbase = 1\namplitude = 0.5";

#[test]
fn zero_length_run_records_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", &config("logistic 1 1 2", RANDOM, "t_end = 0", ""));
    let out = dir.path().join("out");
    let o = chemolab(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], CSV_HEADER);
    let rec = DiagnosticsRecord::parse_csv_row(lines[1]).unwrap();
    assert_eq!(rec.t, 0.0);
    assert_eq!(rec.step_count, 0);
    let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
    assert_eq!(verdict.lines().next(), Some("bounded"));
}

#[test]
fn logistic_run_respects_mass_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", &config("logistic 1 1 2", RANDOM, "t_end = 0.5", ""));
    let out = dir.path().join("out");
    let o = chemolab(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
    let m: f64 = field(&verdict, "M").parse().unwrap();
    let max_l1: f64 = field(&verdict, "max_u_l1").parse().unwrap();
    assert!(max_l1 <= 1.01 * m, "{max_l1} vs {m}");
    assert_eq!(field(&verdict, "mass_within_M"), "true");
    let csv = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let rec = DiagnosticsRecord::parse_csv_row(line).unwrap();
        assert!(rec.u_l1 <= 1.01 * m);
    }
}

#[test]
fn empty_sweep_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.ini",
        &config("zero", RANDOM, "t_end = 0.1", "\n[sweep]\nparameter = initial.base\nvalues =\n"),
    );
    let out = dir.path().join("out");
    let o = chemolab(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let phase = fs::read_to_string(out.join("phase.csv")).unwrap();
    assert_eq!(phase.lines().count(), 1);
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.ini",
        &config(
            "logistic 1 1 2",
            "kind = random\nbase = 1\namplitude = 0.5\nseed = 4",
            "t_end = 0.1",
            "\n[sweep]\nparameter = physics.chi\nvalues = 0.5 1 2\n",
        ),
    );
    let mut tables = Vec::new();
    for threads in ["1", "2"] {
        let out = dir.path().join(format!("out{threads}"));
        let o = chemolab(&["sweep", "--config", s(&cfg), "--out", s(&out), "--parallel", threads]);
        assert_eq!(o.status.code(), Some(0));
        tables.push(fs::read_to_string(out.join("phase.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0].lines().count(), 4);
}

#[test]
fn classify_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("logistic 1 1 2", "B1"),
        ("sublog 1 2 1", "B2"),
        ("zero", "NotCovered (M unbounded)"),
    ];
    for (k, (source, want)) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("c{k}.ini"), &config(source, RANDOM, "t_end = 1", ""));
        let out = dir.path().join(format!("out{k}"));
        let o = chemolab(&["classify", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{source}");
        let report = fs::read_to_string(out.join("regime_report.txt")).unwrap();
        assert_eq!(field(&report, "regime"), *want, "{source}: {report}");
    }
}

#[test]
fn estimate_cgn_reports_lower_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", &config("zero", RANDOM, "t_end = 1", ""));
    let out = dir.path().join("out");
    let o = chemolab(&["estimate-cgn", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(out.join("cgn_estimate.txt")).unwrap();
    let bound: f64 = field(&text, "lower_bound").parse().unwrap();
    assert!((bound - 1.0).abs() < 1e-12);
    assert_eq!(field(&text, "best_trial"), "constant");
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", &config("zero", RANDOM, "t_end = 0", ""));
    let out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_chemolab"))
        .args(["run", "--config", s(&cfg)])
        .env("CHEMOLAB_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("diagnostics.csv").is_file());
}

#[test]
fn seed_changes_hash_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", &config("zero", RANDOM, "t_end = 0", ""));
    let mut hashes = Vec::new();
    let mut rows = Vec::new();
    for seed in ["1", "1", "2"] {
        let out = dir.path().join(format!("out{}", hashes.len()));
        let o = chemolab(&["run", "--config", s(&cfg), "--out", s(&out), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
        let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
        hashes.push(field(&verdict, "config_hash"));
        rows.push(fs::read_to_string(out.join("diagnostics.csv")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);
    assert_eq!(hashes[0].len(), 64);
    assert_eq!(rows[0], rows[1]);
    assert_ne!(rows[0], rows[2]);
}

#[test]
fn snapshots_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.ini",
        &config("logistic 1 1 2", RANDOM, "t_end = 0.05\nsnapshot_every = 2", ""),
    );
    let out = dir.path().join("out");
    let o = chemolab(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let mut names: Vec<_> = fs::read_dir(out.join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.len() >= 2);
    assert_eq!(names[0], "u_00000000.txt");
    let text = fs::read(out.join("snapshots").join(&names[0])).unwrap();
    let (u, t) = ScalarField::read_snapshot(&text[..]).unwrap();
    assert_eq!(t, 0.0);
    assert_eq!((u.grid().nx(), u.grid().ny()), (16, 16));
    assert!(u.min() >= 0.5 - 1e-12 && u.max() <= 1.5 + 1e-12);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(chemolab(&["run"]).status.code(), Some(64));
    assert_eq!(chemolab(&["frobnicate"]).status.code(), Some(64));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", "[grid]\nnx = 16\nwidth = 3\n");
    let o = chemolab(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(64));
    assert_eq!(chemolab(&["--help"]).status.code(), Some(0));
}
