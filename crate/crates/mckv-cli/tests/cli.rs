//! End-to-end tests of the `mckv` binary: exit codes, artifact layout,
//! persistence integrity, and worker-count invariance.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mckv"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Hierarchy config on the all-zero system: every residual must be exactly
/// zero and the run must exit 0.
fn zero_hierarchy_config(out_dir: &Path) -> String {
    format!(
        r#"
[experiment]
kind = "hierarchy_check"
output_dir = "{}"

[system]
family = "constant"
drift = 0.0
sigma = 0.0
gamma = 0.0

[simulation]
n_particles = 200
n_scenarios = 3
horizon = 0.5
n_steps = 50
master_seed = 11

[initial]
kind = "point"
center = 0.0

[space]
x_lo = -3.0
x_hi = 3.0
n_cells = 901
basis_lo = -1.5
basis_hi = 1.5
basis_count = 4
"#,
        out_dir.display()
    )
}

#[test]
fn zero_system_hierarchy_passes_with_exact_zero_residuals() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let config = write_config(tmp.path(), "zero.toml", &zero_hierarchy_config(&out_dir));

    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}\nstdout: {}",
        stderr(&output),
        stdout(&output)
    );

    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["worst_weak_residual"].as_f64().unwrap(), 0.0);
    // The grid solver regularizes a point initial condition to a few cells'
    // width, so the particle/grid gap is bounded by that width, not zero.
    assert!(report["worst_w1"].as_f64().unwrap() <= 0.02);
    for entry in report["measure_battery"].as_array().unwrap() {
        assert_eq!(entry["mean"].as_f64().unwrap(), 0.0);
    }

    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["passed"].as_bool().unwrap(), true);
    assert_eq!(manifest["master_seed"].as_u64().unwrap(), 11);
    // Manifest completeness: every listed artifact exists, and the embedded
    // config reproduces the one we ran.
    for name in manifest["artifacts"].as_array().unwrap() {
        assert!(out_dir.join(name.as_str().unwrap()).exists(), "{name}");
    }
    assert_eq!(
        manifest["config_text"].as_str().unwrap(),
        std::fs::read_to_string(&config).unwrap()
    );

    // Persisted scenarios reload to the identical byte representation.
    let bytes = std::fs::read(out_dir.join("scenario_0000.csv")).unwrap();
    let loaded = mckv::scenario::Scenario::load(&out_dir.join("scenario_0000.csv")).unwrap();
    assert_eq!(loaded.to_csv().as_bytes(), &bytes[..]);
}

#[test]
fn missing_seed_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let broken = zero_hierarchy_config(&out_dir).replace("master_seed = 11\n", "");
    let config = write_config(tmp.path(), "broken.toml", &broken);

    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr(&output));
    let err = stderr(&output);
    assert!(err.contains("master_seed"), "{err}");
    // line:col location after the path.
    assert!(err.contains(".toml:") && err.split(':').count() >= 4, "{err}");
    assert!(!out_dir.exists(), "no artifacts may be written on parse errors");
}

#[test]
fn toml_syntax_errors_carry_line_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "syntax.toml", "[experiment\nkind = \"picard\"\n");
    let output = bin().arg("validate").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains(":1:"), "{}", stderr(&output));
}

#[test]
fn validate_accepts_a_good_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let config = write_config(tmp.path(), "ok.toml", &zero_hierarchy_config(&out_dir));
    let output = bin().arg("validate").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("config valid"), "{}", stdout(&output));
    assert!(!out_dir.exists(), "validate must not run the experiment");
}

#[test]
fn impossible_tolerance_fails_the_named_gate_with_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let mut text = zero_hierarchy_config(&out_dir);
    text.push_str("\n[tolerances]\nw1_max = -1.0\n");
    let config = write_config(tmp.path(), "impossible.toml", &text);

    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(1), "stderr: {}", stderr(&output));
    assert!(stderr(&output).contains("terminal_w1"), "{}", stderr(&output));

    // Artifacts and manifest are still produced for auditing.
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["passed"].as_bool().unwrap(), false);

    // `report` reflects the recorded failure.
    let output = bin().arg("report").arg(&out_dir).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("terminal_w1"), "{}", stderr(&output));
}

fn picard_config(out_dir: &Path, drift: f64, sigma: f64, mean_weight: f64) -> String {
    format!(
        r#"
[experiment]
kind = "picard"
output_dir = "{}"

[system]
family = "mean_reverting"
rate = {drift}
mean_weight = {mean_weight}
sigma = {sigma}
gamma = 0.2

[simulation]
n_particles = 500
n_scenarios = 1
horizon = 0.5
n_steps = 32
master_seed = 21

[initial]
kind = "gaussian"
mean = 1.0
std_dev = 1.0

[picard]
max_iterations = 30
tolerance = 1e-8
"#,
        out_dir.display()
    )
}

#[test]
fn picard_run_report_and_corruption_detection() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let config = write_config(tmp.path(), "picard.toml", &picard_config(&out_dir, 1.0, 0.1, 1.0));

    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["converged"].as_bool().unwrap(), true);

    let output = bin().arg("report").arg(&out_dir).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    assert!(stdout(&output).contains("experiment: picard"));

    // Truncating a checksummed table is detected by `report`.
    let table_path = out_dir.join("iterations.csv");
    let text = std::fs::read_to_string(&table_path).unwrap();
    let truncated: String = text
        .lines()
        .take(text.lines().count() - 1)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&table_path, truncated).unwrap();
    let output = bin().arg("report").arg(&out_dir).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("truncated"), "{}", stderr(&output));
    std::fs::write(&table_path, text).unwrap();

    // A corrupted scenario file (sign-flipped increment) is rejected by its
    // checksum. Line 0 is the header, line 1 the identity row, line 2 the
    // first increment.
    let scen_path = out_dir.join("scenario_0000.csv");
    let text = std::fs::read_to_string(&scen_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    lines[2] = if lines[2].starts_with('-') {
        lines[2].replacen('-', "", 1)
    } else {
        format!("-{}", lines[2])
    };
    std::fs::write(&scen_path, lines.join("\n") + "\n").unwrap();
    let output = bin().arg("report").arg(&out_dir).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(
        stderr(&output).contains("checksum") || stderr(&output).contains("scenario"),
        "{}",
        stderr(&output)
    );
}

#[test]
fn zero_system_fixed_point_converges_in_one_corrective_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let text = picard_config(&out_dir, 0.0, 0.0, 0.0)
        .replace("gamma = 0.2", "gamma = 0.0")
        .replace("kind = \"gaussian\"\nmean = 1.0\nstd_dev = 1.0", "kind = \"point\"\ncenter = 0.0");
    let config = write_config(tmp.path(), "zero_picard.toml", &text);

    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["deltas"][0].as_f64().unwrap(), 0.0);
    assert_eq!(report["converged"].as_bool().unwrap(), true);
}

fn small_hierarchy_config(out_dir: &Path) -> String {
    format!(
        r#"
[experiment]
kind = "hierarchy_check"
output_dir = "{}"

[system]
family = "mean_reverting"
rate = 1.0
mean_weight = 0.3
sigma = 0.6
gamma = 0.4

[simulation]
n_particles = 400
n_scenarios = 4
horizon = 0.5
n_steps = 100
master_seed = 77

[initial]
kind = "gaussian"
mean = 0.2
std_dev = 0.5

[space]
x_lo = -5.0
x_hi = 5.0
n_cells = 200
basis_lo = -2.0
basis_hi = 2.0
basis_count = 6

[tolerances]
w1_max = 0.3
weak_residual_max = 0.5
fpe_z_max = 8.0
"#,
        out_dir.display()
    )
}

#[test]
fn worker_count_does_not_change_any_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("one_worker");
    let out_b = tmp.path().join("many_workers");

    for (out_dir, workers) in [(&out_a, "1"), (&out_b, "4")] {
        let config = write_config(
            tmp.path(),
            &format!("h_{workers}.toml"),
            &small_hierarchy_config(out_dir),
        );
        let output = bin()
            .arg("run")
            .arg(&config)
            .env("MCKV_WORKERS", workers)
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    }

    // Scenario files and every numeric table must be byte-identical.
    for name in [
        "scenario_0000.csv",
        "scenario_0001.csv",
        "scenario_0002.csv",
        "scenario_0003.csv",
        "w1.csv",
        "weak_residual.csv",
        "measure_battery.csv",
        "density_terminal.csv",
        "report.json",
    ] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs across worker counts");
    }

    // Manifests agree on everything except timing and pool size.
    let ma = read_json(&out_a.join("manifest.json"));
    let mb = read_json(&out_b.join("manifest.json"));
    assert_eq!(ma["gates"], mb["gates"]);
    assert_eq!(ma["worker_threads"].as_u64().unwrap(), 1);
    assert_eq!(mb["worker_threads"].as_u64().unwrap(), 4);
}

#[test]
fn mimicking_pipeline_runs_clean_on_a_markovian_input() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let text = format!(
        r#"
[experiment]
kind = "mimicking"
output_dir = "{}"

[system]
family = "mean_reverting"
rate = 1.0
mean_weight = 0.5
sigma = 0.8
gamma = 0.0

[simulation]
n_particles = 2000
n_scenarios = 8
horizon = 0.5
n_steps = 50
master_seed = 2718

[initial]
kind = "gaussian"
mean = 0.3
std_dev = 0.7

[mimicking]
drift_noise = 0.0
bandwidth_scale = 0.3
max_samples_per_slice = 8192
compare_fractions = [0.5, 1.0]

[tolerances]
functional_z_max = 6.0
pooled_w1_max = 0.05
"#,
        out_dir.display()
    );
    let config = write_config(tmp.path(), "mimic.toml", &text);
    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert!(manifest["gates"].as_array().unwrap().len() >= 4);
    assert!(out_dir.join("functional_gaps.csv").exists());
    assert!(out_dir.join("marginals_w1.csv").exists());
}

#[test]
fn control_conversion_pipeline_recovers_the_closed_form_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let text = format!(
        r#"
[experiment]
kind = "mfc_compare"
output_dir = "{}"

[simulation]
n_particles = 400
n_scenarios = 12
horizon = 1.0
n_steps = 20
master_seed = 31415

[control]
action_lo = -5.0
action_hi = 5.0
sigma = 1.0
gamma = 1.0
initial_std = 1.0
noise_scale = 1.0

[tolerances]
gap_z_max = 4.0
marginal_z_max = 5.0
feasible_min = 0.95
"#,
        out_dir.display()
    );
    let config = write_config(tmp.path(), "mfc.toml", &text);
    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    let report = read_json(&out_dir.join("report.json"));
    let gap = report["gap"].as_f64().unwrap();
    assert!((gap - 1.0).abs() < 0.5, "gap {gap} far from randomization variance");
}

#[test]
fn mollify_suite_passes_default_invariant_gates() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let text = format!(
        r#"
[experiment]
kind = "mollify_suite"
output_dir = "{}"

[simulation]
n_particles = 1
n_scenarios = 1
horizon = 1.0
n_steps = 1
master_seed = 902

[mollify]
n_draws = 9
atoms = 30
cutoff_atoms = 120
"#,
        out_dir.display()
    );
    let config = write_config(tmp.path(), "mollify.toml", &text);
    let output = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr(&output));
    for name in ["contraction.csv", "smoothed_psd.csv", "cutoff_psd.csv"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn invalid_worker_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("artifacts");
    let config = write_config(tmp.path(), "ok.toml", &zero_hierarchy_config(&out_dir));
    let output = bin()
        .arg("validate")
        .arg(&config)
        .env("MCKV_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("MCKV_WORKERS"), "{}", stderr(&output));
}
