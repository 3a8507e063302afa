//! End-to-end tests of the `sounder` binary: every subcommand, the pipeline
//! resume logic, thread-count invariance and the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sounder"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn sounder");
    assert!(
        out.status.success(),
        "sounder {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().expect("spawn sounder").status.code().unwrap_or(-1)
}

/// Small single- or two-cell scene on a one-ring array; cells 211 and 214
/// share a pilot comb (same shift modulo three) so separation has work to do.
fn scenario_json(two_cells: bool, n_snapshots: usize, noise: f64) -> String {
    let second = r#",{ "cell_id": 214, "position_m": [-150.0, 250.0, 40.0],
        "paths": [ { "kind": "direct", "weights": { "hh": [0.8, 0.3] } } ] }"#;
    format!(
        r#"{{
  "master_seed": 7, "n_ports": 1, "n_subcarriers": 120, "subcarrier_spacing_hz": 15000.0,
  "noise_sigma2": {noise},
  "rx": {{
    "array": {{ "geometry": {{ "n_rings": 1, "elems_per_ring": 6, "radius_m": 0.025, "ring_spacing_m": 0.02 }},
      "f_c_hz": 2.66e9, "t0_s": 5e-4, "m_az": 17, "m_el": 9, "grid_az": 32, "grid_el": 16, "recon_tol": 5e-3 }},
    "n_snapshots": {n_snapshots}, "snapshot_period_s": 0.1,
    "start_position_m": [0.0, 0.0, 0.0], "speed_mps": 0.0
  }},
  "bs": [
    {{ "cell_id": 211, "position_m": [200.0, 100.0, 25.0],
      "paths": [ {{ "kind": "direct", "weights": {{ "hh": [1.0, 0.0] }} }} ] }}{}
  ]
}}"#,
        if two_cells { second } else { "" }
    )
}

fn pipeline_json(two_cells: bool, n_snapshots: usize, noise: f64) -> String {
    format!("{{ \"scenario\": {} }}", scenario_json(two_cells, n_snapshots, noise))
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

/// Artifact path -> digest map recorded in a run manifest.
fn artifact_digests(run_json: &Path) -> std::collections::BTreeMap<String, String> {
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_json).unwrap()).unwrap();
    let mut map = std::collections::BTreeMap::new();
    for (_, stage) in v["stages"].as_object().unwrap() {
        for a in stage["artifacts"].as_array().unwrap() {
            map.insert(
                a["path"].as_str().unwrap().to_string(),
                a["sha256"].as_str().unwrap().to_string(),
            );
        }
    }
    map
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

// -- 1. pipeline ------------------------------------------------------------

#[test]
fn pipeline_writes_every_stage_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipe.json");
    write(&cfg, &pipeline_json(true, 2, 1e-6));
    let out = dir.path().join("run");
    run_ok(&["pipeline", "--config", &p(&cfg), "--out", &p(&out)]);

    for f in [
        "run.json",
        "capture/manifest.json",
        "capture/y.bin",
        "capture/truth.json",
        "separated/cell_211/y.bin",
        "separated/cell_214/y.bin",
        "separated/telemetry.csv",
        "estimates/cell_211/records.json",
        "estimates/cell_211/records.csv",
        "estimates/cell_214/dmc.json",
        "eval/report.json",
        "eval/sweep_cell_211.csv",
        "eval/sweep_cell_214.csv",
    ] {
        assert!(out.join(f).is_file(), "missing artifact {f}");
    }

    // Both cells fully matched in the report.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval/report.json")).unwrap())
            .unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    for c in cells {
        assert_eq!(c["overall"]["matched"], 2, "cell {}", c["cell_id"]);
        assert_eq!(c["overall"]["missed"], 0);
        assert_eq!(c["overall"]["false_alarms"], 0);
        let nmse = c["overall"]["ic_nmse"].as_array().unwrap();
        assert_eq!(nmse.len(), 2, "one separation residual per snapshot");
    }
}

#[test]
fn completed_pipeline_resumes_entirely_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipe.json");
    write(&cfg, &pipeline_json(true, 1, 1e-6));
    let out = dir.path().join("run");
    run_ok(&["pipeline", "--config", &p(&cfg), "--out", &p(&out)]);
    let before = artifact_digests(&out.join("run.json"));

    let second = run_ok(&["pipeline", "--config", &p(&cfg), "--out", &p(&out)]);
    let text = String::from_utf8_lossy(&second.stdout);
    for stage in ["synth", "ic", "estimate", "eval"] {
        assert!(text.contains(&format!("{stage}: cached")), "stage {stage} should be cached");
    }
    assert_eq!(before, artifact_digests(&out.join("run.json")));
}

#[test]
fn interrupted_pipeline_resumes_from_the_last_completed_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipe.json");
    write(&cfg, &pipeline_json(true, 1, 1e-6));
    let out = dir.path().join("run");

    // Stop after synthesis, as an interrupted run would.
    run_ok(&["pipeline", "--config", &p(&cfg), "--out", &p(&out), "--until", "synth"]);
    assert!(out.join("capture/y.bin").is_file());
    assert!(!out.join("eval").exists());
    let synth_digests = artifact_digests(&out.join("run.json"));

    let resumed = run_ok(&["pipeline", "--config", &p(&cfg), "--out", &p(&out)]);
    let text = String::from_utf8_lossy(&resumed.stdout);
    assert!(text.contains("synth: cached"), "synthesis must be reused, got:\n{text}");
    assert!(out.join("eval/report.json").is_file());
    // The reused capture is bit-identical to the first run's.
    let after = artifact_digests(&out.join("run.json"));
    for (path, digest) in &synth_digests {
        assert_eq!(after.get(path), Some(digest), "capture artifact {path} changed on resume");
    }
}

#[test]
fn changed_configuration_invalidates_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipe.json");
    write(&cfg, &pipeline_json(false, 1, 0.0));
    let out = dir.path().join("run");
    run_ok(&["pipeline", "--config", &p(&cfg), "--out", &p(&out)]);

    write(&cfg, &pipeline_json(false, 2, 0.0));
    let rerun = run_ok(&["pipeline", "--config", &p(&cfg), "--out", &p(&out)]);
    let text = String::from_utf8_lossy(&rerun.stdout);
    assert!(!text.contains("cached"), "new configuration must rerun:\n{text}");
    assert!(text.contains("synth: 2 snapshots"));
}

// -- 2. determinism ----------------------------------------------------------

#[test]
fn artifacts_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipe.json");
    write(&cfg, &pipeline_json(true, 2, 1e-6));
    let out1 = dir.path().join("t1");
    let out4 = dir.path().join("t4");
    run_ok(&[
        "pipeline", "--config", &p(&cfg), "--out", &p(&out1), "--threads", "1",
        "--deterministic",
    ]);
    run_ok(&[
        "pipeline", "--config", &p(&cfg), "--out", &p(&out4), "--threads", "4",
        "--deterministic",
    ]);
    let d1 = artifact_digests(&out1.join("run.json"));
    let d4 = artifact_digests(&out4.join("run.json"));
    assert_eq!(d1, d4, "thread count must not change any artifact");
}

#[test]
fn sounder_threads_environment_variable_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scen.json");
    write(&cfg, &scenario_json(false, 1, 0.0));
    let cap = dir.path().join("cap");
    let out = bin()
        .env("SOUNDER_THREADS", "2")
        .args(["synth", "--config", &p(&cfg), "--out", &p(&cap)])
        .output()
        .unwrap();
    assert!(out.status.success());
    let bad = bin()
        .env("SOUNDER_THREADS", "lots")
        .args(["synth", "--config", &p(&cfg), "--out", &p(&cap)])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2), "non-numeric SOUNDER_THREADS is a config error");
}

// -- 3. stage commands -------------------------------------------------------

/// synth -> estimate -> eval on a noiseless single cell: the chained files
/// round-trip and the estimate matches truth to numerical precision.
#[test]
fn stage_chain_recovers_a_noiseless_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scen.json");
    write(&cfg, &scenario_json(false, 1, 0.0));
    let cap = dir.path().join("cap");
    let est = dir.path().join("est");
    let ev = dir.path().join("ev");
    run_ok(&["synth", "--config", &p(&cfg), "--out", &p(&cap)]);
    run_ok(&["estimate", "--in", &p(&cap), "--out", &p(&est)]);
    run_ok(&[
        "eval",
        "--records",
        &p(&est.join("records.json")),
        "--capture",
        &p(&cap),
        "--out",
        &p(&ev),
    ]);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let overall = &report["cells"][0]["overall"];
    assert_eq!(overall["matched"], 1);
    assert_eq!(overall["missed"], 0);
    let rmse_delay = overall["rmse"]["delay_s"].as_f64().unwrap();
    assert!(rmse_delay < 1e-12, "noiseless delay error should be tiny, got {rmse_delay}");
    assert!(ev.join("sweep.csv").is_file());
}

#[test]
fn ic_writes_single_cell_captures_and_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scen.json");
    write(&cfg, &scenario_json(true, 1, 1e-6));
    let cap = dir.path().join("cap");
    let sep = dir.path().join("sep");
    run_ok(&["synth", "--config", &p(&cfg), "--out", &p(&cap)]);
    run_ok(&["ic", "--in", &p(&cap), "--out", &p(&sep)]);
    assert!(sep.join("cell_211/manifest.json").is_file());
    assert!(sep.join("cell_214/manifest.json").is_file());
    let telemetry = std::fs::read_to_string(sep.join("telemetry.csv")).unwrap();
    assert!(telemetry.starts_with("snapshot,sweep,residual_nmse"));
    assert!(telemetry.lines().count() > 1);
    // Each separated capture is a valid single-cell estimator input.
    let est = dir.path().join("est");
    run_ok(&["estimate", "--in", &p(&sep.join("cell_211")), "--out", &p(&est)]);
    assert!(est.join("records.json").is_file());
}

#[test]
fn estimate_warns_and_assumes_a_static_receiver_without_velocity_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scen.json");
    write(&cfg, &scenario_json(false, 1, 0.0));
    let cap = dir.path().join("cap");
    run_ok(&["synth", "--config", &p(&cfg), "--out", &p(&cap)]);
    std::fs::remove_file(cap.join("truth.json")).unwrap();
    let out = bin()
        .args(["estimate", "--in", &p(&cap), "--out", &p(&dir.path().join("est"))])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("no velocity metadata") && stderr.contains("v = 0"),
        "expected the static-receiver warning, got: {stderr}"
    );
}

#[test]
fn seed_flag_overrides_the_scenario_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scen.json");
    write(&cfg, &scenario_json(false, 1, 1e-4));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    run_ok(&["synth", "--config", &p(&cfg), "--out", &p(&a), "--seed", "1"]);
    run_ok(&["synth", "--config", &p(&cfg), "--out", &p(&b), "--seed", "1"]);
    run_ok(&["synth", "--config", &p(&cfg), "--out", &p(&c), "--seed", "2"]);
    let ya = std::fs::read(a.join("y.bin")).unwrap();
    assert_eq!(ya, std::fs::read(b.join("y.bin")).unwrap(), "same seed, same capture");
    assert_ne!(ya, std::fs::read(c.join("y.bin")).unwrap(), "different noise draw");
}

// -- 4. exit codes -----------------------------------------------------------

#[test]
fn exit_codes_separate_config_format_and_success() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("scen.json");
    write(&scen, &scenario_json(true, 1, 0.0));
    let cap = dir.path().join("cap");
    assert_eq!(
        exit_code(&["synth", "--config", &p(&scen), "--out", &p(&cap)]),
        0,
        "healthy synthesis exits zero"
    );

    // Configuration problems: exit 2.
    assert_eq!(exit_code(&["synth", "--config", "/nonexistent.json", "--out", &p(&cap)]), 2);
    let bad = dir.path().join("bad.json");
    write(&bad, "{ \"bad\": true }");
    assert_eq!(exit_code(&["synth", "--config", &p(&bad), "--out", &p(&cap)]), 2);
    // Estimation refuses multi-cell input: the caller skipped a stage.
    assert_eq!(
        exit_code(&["estimate", "--in", &p(&cap), "--out", &p(&dir.path().join("e"))]),
        2
    );

    // Broken data: exit 3.
    let mangled = dir.path().join("mangled");
    copy_dir(&cap, &mangled);
    std::fs::write(mangled.join("y.bin"), b"short").unwrap();
    assert_eq!(
        exit_code(&["ic", "--in", &p(&mangled), "--out", &p(&dir.path().join("s"))]),
        3
    );
    // Records that are not records: exit 3.
    let not_records = dir.path().join("not_records.json");
    write(&not_records, "[ { \"surprise\": 1 } ]");
    assert_eq!(
        exit_code(&[
            "eval",
            "--records",
            &p(&not_records),
            "--capture",
            &p(&cap),
            "--out",
            &p(&dir.path().join("v")),
        ]),
        3
    );
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target: PathBuf = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).unwrap();
        }
    }
}
