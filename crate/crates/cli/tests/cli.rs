//! End-to-end runs of the `sves` binary on a small MLP policy.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sves_cli::RunConfig;

fn sves(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sves"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("SVES_SEED").env_remove("SVES_OUTPUT_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 3
[task]
max_operand = 9
sft_examples = 40
[model]
architecture = "mlp"
context = 6
d_embed = 8
hidden = 16
max_new_tokens = 3
[lora]
rank = 4
[sft]
steps = 40
[es]
population = 8
generations = 6
subset_size = 20
checkpoint_every = 2
workers = 2
[output]
dir = "{}"
{extra}"#,
        dir.join("run").display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn sft_then_align_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "");
    let config = config.to_str().unwrap();
    let out = sves(&["sft", "--config", config], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = sves(&["align", "--config", config], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let run = tmp.path().join("run");
    for name in [
        "model.essm",
        "adapters.essa",
        "final_adapters.essa",
        "cma.esck",
        "cma_final.esck",
        "summary.json",
        "sft_report.json",
        "data/align.tsv",
    ] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    let rewards = std::fs::read_to_string(run.join("rewards.csv")).unwrap();
    assert!(rewards.lines().all(|l| l.split(',').count() == 9));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary[0]["generations"], 6);
    assert_eq!(summary[0]["evaluations"], 48);
    // The last periodic checkpoint and the final state coincide.
    assert_eq!(
        std::fs::read(run.join("cma.esck")).unwrap(),
        std::fs::read(run.join("cma_final.esck")).unwrap()
    );

    let out = sves(&["align", "--config", config, "--populations", "4,6"], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("pop4/summary.json").exists() && run.join("pop6/summary.json").exists());
    let out = sves(&["plot-data", "--run", run.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("run,generation,"));
    assert_eq!(csv.lines().count(), 1 + 3 * 6);
}

#[test]
fn align_without_sft_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "");
    let out = sves(&["align", "--config", config.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sves sft"));
    let out = sves(&["align", "--config", config.to_str().unwrap(), "--resume"], &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_configurations_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = tiny_config(tmp.path(), "[extra]\nfield = 1\n");
    assert_eq!(code(&sves(&["sft", "--config", unknown.to_str().unwrap()], &[])), 2);

    let config = tiny_config(tmp.path(), "");
    let config = config.to_str().unwrap();
    assert_eq!(code(&sves(&["sft", "--config", config], &[("SVES_SEED", "minus one")])), 2);
    let missing = tmp.path().join("absent.toml");
    assert_eq!(code(&sves(&["sft", "--config", missing.to_str().unwrap()], &[])), 1);

    let uneven = tmp.path().join("uneven");
    std::fs::create_dir(&uneven).unwrap();
    let uneven = tiny_config(&uneven, "");
    let text = std::fs::read_to_string(&uneven).unwrap().replace("workers = 2", "workers = 3");
    std::fs::write(&uneven, text).unwrap();
    assert_eq!(code(&sves(&["sft", "--config", uneven.to_str().unwrap()], &[])), 2);
}

#[test]
fn output_directory_can_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "");
    let elsewhere = tmp.path().join("elsewhere");
    let out = sves(
        &["sft", "--config", config.to_str().unwrap()],
        &[("SVES_OUTPUT_DIR", elsewhere.to_str().unwrap())],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elsewhere.join("model.essm").exists());
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn bench_reports_every_function_as_json() {
    let out = sves(&["bench", "--json"], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    let names: Vec<&str> = report["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["function"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["sphere", "rosenbrock", "rastrigin"]);
}

#[test]
fn shipped_configurations_load_cleanly() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let config = RunConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(config.validate().unwrap(), Vec::<String>::new(), "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 2);
}
