//! Exercises the installed binary end to end: exit codes, artifact layout,
//! and manifest stability across reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchflow"))
        .args(args)
        .env("PATCHFLOW_OUT", root.join("runs"))
        .current_dir(root)
        .output()
        .expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("binary should not be killed by a signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

// Small enough that a full train or ablate run takes a few seconds.
const TINY_CFG: &str = "\
[data]
n = 8
channels = 2
height = 4
width = 4
residual_count = 2
residual_scale = 0.05
seed = 3

[model]
patch_size = 2
token_dim = 16
heads = 2
depth = 1
time_freqs = 4

[train]
epochs = 1
batch_size = 8
warmup_steps = 1
plateau_steps = 2
decay_steps = 4
eval_every = 1
eval_steps = 2
eval_instances = 4
inference_steps = 2

[distill]
teacher_steps = 4
epochs = 1
batch_size = 8
blocks_sampled = 1
eval_instances = 4

[eval]
steps = 2
instances = 4

[sample]
instance = 1
steps = 3
";

fn write_cfg(root: &Path) -> PathBuf {
    let path = root.join("cfg.toml");
    std::fs::write(&path, TINY_CFG).unwrap();
    path
}

fn gen_data(root: &Path, cfg: &Path) -> PathBuf {
    let out = run(
        root,
        &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "data"],
    );
    assert_eq!(code(&out), 0, "gen-data failed: {}", stderr(&out));
    root.join("runs/data/dataset")
}

fn train(root: &Path, cfg: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        name,
    ];
    args.extend_from_slice(extra);
    let out = run(root, &args);
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    root.join("runs").join(name)
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn empty_dataset_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "[data]\nn = 0\n").unwrap();
    let out = run(tmp.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "[data]\nn = 4\nbogus = 1\n").unwrap();
    let out = run(tmp.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["gen-data", "--config", "no-such.toml"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));

    let cfg = write_cfg(tmp.path());
    let out = run(
        tmp.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--data", "no-such-dir"],
    );
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = gen_data(tmp.path(), &cfg);
    let ckpt = tmp.path().join("model.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = run(
        tmp.path(),
        &[
            "sample",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
}

#[test]
fn zero_verification_samples_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["verify-theorem", "--samples", "0"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn delta_verification_passes_and_mixture_fails_gracefully() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["verify-theorem", "--samples", "4", "--out", "delta"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("PASS"), "stdout: {}", stdout(&out));
    let report = manifest_sibling(tmp.path(), "delta");
    assert_eq!(report["pass"], serde_json::Value::Bool(true));

    // The curved marginal field is a negative result, not a crash.
    let out = run(
        tmp.path(),
        &["verify-theorem", "--samples", "4", "--mixture", "--out", "mix"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("FAIL"), "stdout: {}", stdout(&out));
    let report = manifest_sibling(tmp.path(), "mix");
    assert_eq!(report["pass"], serde_json::Value::Bool(false));
}

fn manifest_sibling(root: &Path, name: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(root.join("runs").join(name).join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn gen_data_reruns_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let out = run(
        tmp.path(),
        &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "a"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = run(
        tmp.path(),
        &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "b"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let runs = tmp.path().join("runs");
    let ma = manifest(&runs.join("a"));
    let mb = manifest(&runs.join("b"));
    assert_eq!(ma["content_hash"], mb["content_hash"]);
    let da = std::fs::read(runs.join("a/dataset/data.bin")).unwrap();
    let db = std::fs::read(runs.join("b/dataset/data.bin")).unwrap();
    assert_eq!(da, db);
}

#[test]
fn train_records_overrides_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = gen_data(tmp.path(), &cfg);
    let dir = train(tmp.path(), &cfg, &data, "t", &["--beta", "0"]);

    let m = manifest(&dir);
    assert_eq!(m["config"]["train"]["beta"], serde_json::json!(0.0));
    assert_eq!(m["subcommand"], serde_json::json!("train"));
    assert!(m["inputs"]["dataset"].is_string());

    assert!(dir.join("model.ckpt").exists());
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2, "one header plus one epoch: {metrics}");
    assert!(lines[0].starts_with("epoch,"));
    assert!(dir.join("evals.csv").exists());
}

#[test]
fn ablate_writes_the_eight_cell_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = gen_data(tmp.path(), &cfg);
    let out = run(
        tmp.path(),
        &[
            "ablate",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            "grid",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let dir = tmp.path().join("runs/grid");
    let csv = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 9, "header plus eight cells: {csv}");
    assert_eq!(
        lines[0],
        "label,uncond_training,cfg_inference,steps,energy_distance,endpoint_mse,garment_region_mse"
    );
    assert!(dir.join("model_ut.ckpt").exists());
    assert!(dir.join("model_nout.ckpt").exists());
}

#[test]
fn sample_and_eval_read_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = gen_data(tmp.path(), &cfg);
    let dir = train(tmp.path(), &cfg, &data, "t", &[]);
    let ckpt = dir.join("model.ckpt");

    let out = run(
        tmp.path(),
        &[
            "sample",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            "s",
            "--steps",
            "3",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let sdir = tmp.path().join("runs/s");
    let traj = std::fs::read_to_string(sdir.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 5, "header plus steps+1 states: {traj}");
    let last: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sdir.join("final.json")).unwrap()).unwrap();
    assert!(last["values"].is_array());

    let out = run(
        tmp.path(),
        &[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("runs/e/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["n_samples"], serde_json::json!(4));
}

#[test]
fn shape_mismatch_between_model_and_data_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = gen_data(tmp.path(), &cfg);
    let dir = train(tmp.path(), &cfg, &data, "t", &[]);

    let other_cfg = tmp.path().join("wide.toml");
    std::fs::write(
        &other_cfg,
        TINY_CFG.replace("width = 4", "width = 8"),
    )
    .unwrap();
    let out = run(
        tmp.path(),
        &["gen-data", "--config", other_cfg.to_str().unwrap(), "--out", "wide"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = run(
        tmp.path(),
        &[
            "eval",
            "--config",
            other_cfg.to_str().unwrap(),
            "--checkpoint",
            dir.join("model.ckpt").to_str().unwrap(),
            "--data",
            tmp.path().join("runs/wide/dataset").to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
}
