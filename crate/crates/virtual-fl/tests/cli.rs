//! End-to-end tests of the `virtual-fl` binary: exit codes, validation
//! output, metrics files, and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_virtual-fl"))
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

const CONFIG: &str = r#"
method = "virtual"
repetitions = 1
seed = 7
measure_time = false

[dataset]
clients = 2

[dataset.source]
type = "synthetic"
features = 4
classes = 2
per_client = 24
heterogeneity = 0.5

[architecture]
widths = [4, 6]

[virtual]
refinements = 1
epochs = 1
mc_samples = 3
batch_size = 12
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_reports_configuration_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let output = bin().arg("validate").arg("--config").arg(&config).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    let text = stdout_of(&output);
    assert!(text.contains("configuration OK"), "stdout: {text}");
    assert!(text.contains("method=virtual"), "stdout: {text}");
    assert!(text.contains("clients=2"), "stdout: {text}");
    assert!(text.contains("epoch budget=1"), "stdout: {text}");
}

#[test]
fn semantic_config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    // First hidden width must match the feature count (4), not 5.
    let config = write_config(dir.path(), &CONFIG.replace("widths = [4, 6]", "widths = [5, 6]"));
    let output = bin().arg("validate").arg("--config").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
    assert!(stderr_of(&output).contains("error:"));
}

#[test]
fn missing_config_file_exits_with_code_2() {
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg("/nonexistent/experiment.toml")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
    assert!(stderr_of(&output).contains("cannot read config"));
}

#[test]
fn unknown_method_flag_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .arg("--method")
        .arg("sgd")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
    let text = stderr_of(&output);
    assert!(text.contains("virtual"), "should list the valid methods: {text}");
}

#[test]
fn unreadable_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let csv_config = format!(
        r#"
method = "local"
repetitions = 1

[dataset]
clients = 2

[dataset.source]
type = "csv"
path = "{}"

[architecture]
widths = [4, 6]
"#,
        dir.path().join("missing.csv").display()
    );
    let config = write_config(dir.path(), &csv_config);

    // The file's absence is not a configuration problem...
    let check = bin().arg("validate").arg("--config").arg(&config).output().unwrap();
    assert!(check.status.success(), "stderr: {}", stderr_of(&check));

    // ...but running fails once every repetition fails to load it.
    let output = bin().arg("run").arg("--config").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(1), "stderr: {}", stderr_of(&output));
    let text = stderr_of(&output);
    assert!(text.contains("all 1 repetitions failed"), "stderr: {text}");
    assert!(text.contains("missing.csv"), "stderr: {text}");
}

#[test]
fn run_writes_metrics_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let metrics = dir.path().join("metrics.csv");
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .arg("--method")
        .arg("local")
        .arg("--reps")
        .arg("2")
        .arg("--dataset")
        .arg("cli-check")
        .arg("--out")
        .arg(&metrics)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    assert!(stdout_of(&output).contains("metrics written"));

    let text = fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,dataset,seed,client_id,accuracy,average,seconds,epochs");
    // 2 repetitions x (2 client rows + 1 aggregate row).
    assert_eq!(lines.len(), 7, "csv:\n{text}");
    for line in &lines[1..] {
        assert!(line.starts_with("local,cli-check,"), "csv row: {line}");
    }
    assert_eq!(text.matches(",ALL,").count(), 2, "csv:\n{text}");
}

#[test]
fn epochs_override_is_recorded_in_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let metrics = dir.path().join("metrics.csv");
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .arg("--method")
        .arg("local")
        .arg("--epochs")
        .arg("4")
        .arg("--out")
        .arg(&metrics)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    let text = fs::read_to_string(&metrics).unwrap();
    for line in text.lines().skip(1) {
        assert!(line.ends_with(",4.000000"), "csv row: {line}");
    }
}
