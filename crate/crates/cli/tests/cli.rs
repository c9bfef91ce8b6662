//! Integration tests for the experiment harness: artifact layout,
//! end-to-end determinism, and the frozen report summary.

use std::path::Path;

use drnm_cli::config::ExperimentConfig;
use drnm_cli::experiment::{run_experiment, stage_simulate, StageSink};
use drnm_cli::report::emit_report;

/// Small fixture configuration; also the source of the frozen golden
/// summary in tests/fixtures.
fn fixture_config() -> ExperimentConfig {
    let text = "\
[experiment]
seed = 11

[scene]
points = 300

[ransac]
iterations = 150

[rollout]
seconds = 1,2,4
interval = 2
seeds = 3

[ablate]
intervals = 1,2
seeds = 2
horizon = 4

[planner]
iterations = 3
";
    ExperimentConfig::parse(text).expect("fixture config parses")
}

#[test]
fn minimal_run_produces_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let files = run_experiment(&fixture_config(), dir.path(), 2).unwrap();
    for expected in [
        "scene.txt",
        "trajectory.csv",
        "masks.drnm",
        "mask_stats.csv",
        "rollout_ar.csv",
        "rollout_anchor.csv",
        "drift_curve.csv",
        "ablate.csv",
        "plan_ar.csv",
        "plan_anchor.csv",
        "metrics.csv",
        "manifest.txt",
    ] {
        assert!(files.iter().any(|f| f == expected), "missing {expected}");
        assert!(dir.path().join(expected).exists(), "file {expected} absent");
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("config_sha256 = "));
    for f in &files {
        assert!(manifest.contains(&format!("file = {f}")), "manifest lacks {f}");
    }
}

fn read_all_csv(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            out.push((
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn rerun_is_byte_identical() {
    let cfg = fixture_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir_a.path(), 1).unwrap();
    run_experiment(&cfg, dir_b.path(), 4).unwrap();
    let a = read_all_csv(dir_a.path());
    let b = read_all_csv(dir_b.path());
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between runs");
    }
    let masks_a = std::fs::read(dir_a.path().join("masks.drnm")).unwrap();
    let masks_b = std::fs::read(dir_b.path().join("masks.drnm")).unwrap();
    assert_eq!(masks_a, masks_b);
}

#[test]
fn ablation_matrix_enumerates_all_toggles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_config();
    run_experiment(&cfg, dir.path(), 2).unwrap();
    let text = std::fs::read_to_string(dir.path().join("ablate.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8 * cfg.ablate_intervals.len());
    for interval in &cfg.ablate_intervals {
        for combo in 0..8 {
            let fa = (combo & 1 != 0) as u8;
            let mask = (combo & 2 != 0) as u8;
            let chunk = (combo & 4 != 0) as u8;
            let prefix = format!("{interval},{fa},{mask},{chunk},");
            assert!(
                rows.iter().any(|r| r.starts_with(&prefix)),
                "missing ablation row {prefix}"
            );
        }
    }
}

#[test]
fn report_matches_frozen_golden_summary() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&fixture_config(), dir.path(), 2).unwrap();
    let summary = emit_report(dir.path()).unwrap();
    assert!(summary.flags.iter().all(|f| f.pass), "{}", summary.table);
    let written = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(written, summary.csv);

    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_summary.csv");
    let golden = std::fs::read_to_string(&golden_path).expect("golden fixture present");
    assert_eq!(
        summary.csv, golden,
        "summary drifted from the frozen golden file"
    );
}

#[test]
fn report_on_incomplete_directory_names_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let err = emit_report(dir.path()).unwrap_err();
    assert!(err.0.contains("manifest.txt"));

    // With a manifest but nothing else, the first missing CSV is named.
    let mut sink = StageSink::new(dir.path()).unwrap();
    stage_simulate(&fixture_config(), &mut sink).unwrap();
    std::fs::write(dir.path().join("manifest.txt"), "seed = 0\n").unwrap();
    let err = emit_report(dir.path()).unwrap_err();
    assert!(err.0.contains("metrics.csv"), "{}", err.0);
}
