//! End-to-end tests that spawn the `fedgraph` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
[federation]
K = 3
T = 2
E = 1

[train]
batch = 4

[strategy]
name = "fedgraph"

[data]
n = 60
classes = 3
dim = 4
"#;

fn fedgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(args)
        .env_remove("FEDGRAPH_LOG")
        .output()
        .expect("binary should spawn")
}

fn write_config(dir: &Path, content: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, content).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_prints_banner_rounds_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out_dir = dir.path().join("out");
    let out = fedgraph(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let text = stdout(&out);
    assert!(text.contains("resolved configuration:"));
    assert!(text.contains("name = \"fedgraph\""));
    assert!(text.contains("round   1/2"));
    assert!(text.contains("round   2/2"));
    assert!(text.contains("done: 2 rounds"));

    assert!(out_dir.join("metrics.csv").exists());
    assert!(out_dir.join("partition.csv").exists());
    assert!(out_dir.join("model_final.fgck").exists());
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.contains("round,scope,metric,value"));
    assert!(metrics.contains("#   name = \"fedgraph\""));
}

#[test]
fn seed_flag_beats_the_file_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = fedgraph(&["run", "--config", &config, "--seed", "7"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("seed = 7"));
}

#[test]
fn set_flag_overrides_nested_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = fedgraph(&[
        "run",
        "--config",
        &config,
        "--set",
        "federation.T=1",
        "--set",
        "strategy.mix.s=1.0",
        "--set",
        "strategy.mix.top=0.0",
        "--set",
        "strategy.mix.w=0.0",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("T = 1"));
    assert!(text.contains("s = 1"));
    assert!(!text.contains("round   2"));
}

#[test]
fn missing_strategy_name_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[federation]\nK = 3\n");
    let out = fedgraph(&["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("strategy.name"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[strategy]\nname = \"fedavg\"\nbogus = 1\n");
    let out = fedgraph(&["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn missing_config_file_exits_2() {
    let out = fedgraph(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cannot read config"));
}

#[test]
fn malformed_set_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = fedgraph(&["run", "--config", &config, "--set", "no-equals-sign"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("KEY=VALUE"));
}

#[test]
fn invalid_log_level_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(["run", "--config", &config])
        .env("FEDGRAPH_LOG", "verbose")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("FEDGRAPH_LOG"));
}

#[test]
fn debug_logging_goes_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(["run", "--config", &config])
        .env("FEDGRAPH_LOG", "debug")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stderr(&out).contains("local losses"));
    assert!(!stdout(&out).contains("local losses"));
}

#[test]
fn delta_sweep_runs_three_settings_and_ranks_them() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let root = dir.path().join("sweep");
    let out = fedgraph(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "delta",
        "--out",
        root.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    for label in ["delta_0.001", "delta_0.01", "delta_0.1"] {
        assert!(root.join(label).join("metrics.csv").exists(), "{}", label);
    }
    let comparison = fs::read_to_string(root.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = comparison.lines().collect();
    assert_eq!(lines[0], "setting,score_metric,final_score,final_loss");
    assert_eq!(lines.len(), 4);
    let scores: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "not ranked: {:?}", scores);
}

#[test]
fn mode_sweep_covers_both_prune_modes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let root = dir.path().join("sweep");
    let out = fedgraph(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "mode",
        "--out",
        root.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let sim = fs::read_to_string(root.join("mode_similarity/metrics.csv")).unwrap();
    let dis = fs::read_to_string(root.join("mode_dissimilarity/metrics.csv")).unwrap();
    assert!(sim.contains("mode = \"similarity\""));
    assert!(dis.contains("mode = \"dissimilarity\""));
}

#[test]
fn mix_sweep_cross_checks_the_fedavg_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let root = dir.path().join("sweep");
    let out = fedgraph(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "mix",
        "--values",
        "1,0,0",
        "--out",
        root.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("cross-check passed"));
    assert_eq!(
        fs::read(root.join("mix_1_0_0/model_final.fgck")).unwrap(),
        fs::read(root.join("fedavg_check/model_final.fgck")).unwrap()
    );
}

#[test]
fn sweep_without_output_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out = fedgraph(&["sweep", "--config", &config, "--axis", "delta"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("output directory"));
}

#[test]
fn sweep_rejects_bad_axis_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    for (axis, value, needle) in [
        ("delta", "soft", "not a number"),
        ("mode", "sideways", "similarity or dissimilarity"),
        ("mix", "0.5,0.5", "three components"),
        ("mix", "a,b,c", "s,top,w triple"),
    ] {
        let out = fedgraph(&[
            "sweep", "--config", &config, "--axis", axis, "--values", value, "--out", "/tmp/x",
        ]);
        assert_eq!(out.status.code(), Some(2), "{} {}", axis, value);
        assert!(stderr(&out).contains(needle), "{}", stderr(&out));
    }
}

#[test]
fn inspect_reports_layers_params_and_norms() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out_dir = dir.path().join("out");
    let run = fedgraph(&[
        "run", "--config", &config, "--out", out_dir.to_str().unwrap(),
        "--set", "federation.T=1",
    ]);
    assert!(run.status.success());

    let ckpt = out_dir.join("model_final.fgck");
    let out = fedgraph(&["inspect", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    // dense 4 -> 16 and dense 16 -> 3: (4*16 + 16) + (16*3 + 3) params.
    assert!(text.contains("checkpoint: 2 layers, 131 parameters"));
    assert!(text.contains("dense 4 -> 16 (relu)"));
    assert!(text.contains("dense 16 -> 3 (softmax-final)"));

    // The printed total L1 norm must match an independent recomputation
    // from the checkpoint bytes.
    let model = fedgraph_core::nn::read_checkpoint(
        &mut fs::read(&ckpt).unwrap().as_slice(),
    )
    .unwrap();
    let zero = model.map(|_| 0.0);
    let expected = fedgraph_core::nn::param_l1_distance(&model, &zero).unwrap();
    let total_line = text
        .lines()
        .find(|l| l.starts_with("total"))
        .expect("total line");
    let printed: f64 = total_line
        .split_whitespace()
        .last()
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        (printed - expected).abs() < 1e-5,
        "printed {} vs computed {}",
        printed,
        expected
    );
}

#[test]
fn inspect_rejects_truncated_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let out_dir = dir.path().join("out");
    let run = fedgraph(&[
        "run", "--config", &config, "--out", out_dir.to_str().unwrap(),
        "--set", "federation.T=1",
    ]);
    assert!(run.status.success());

    let bytes = fs::read(out_dir.join("model_final.fgck")).unwrap();
    let trunc = dir.path().join("trunc.fgck");
    fs::write(&trunc, &bytes[..40]).unwrap();
    let out = fedgraph(&["inspect", trunc.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("truncated"));

    let out = fedgraph(&["inspect", "/nonexistent.fgck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cannot read checkpoint"));
}

#[test]
fn runs_with_same_seed_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = fedgraph(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success());
    }
    assert_eq!(
        fs::read(a.join("model_final.fgck")).unwrap(),
        fs::read(b.join("model_final.fgck")).unwrap()
    );
}
