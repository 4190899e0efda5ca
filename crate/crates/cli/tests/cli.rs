//! End-to-end tests of the `repflow` binary: exit codes, file outputs,
//! seed handling.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repflow_cli::flo::read_flo;
use repflow_cli::pgm::write_pgm;
use repflow_core::tensor::Tensor;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_repflow")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("repflow-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn gradient_frame(n: usize, shift: f64) -> Tensor {
    Tensor::from_fn(&[n, n], |i| {
        let x = (i[1] as f64 + shift) / n as f64;
        let y = i[0] as f64 / n as f64;
        (0.5 + 0.4 * (6.0 * x).sin() * (4.0 * y).cos()).clamp(0.0, 1.0)
    })
    .unwrap()
}

#[test]
fn help_succeeds() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("USAGE"));
}

#[test]
fn no_subcommand_is_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flow_identical_frames_writes_exact_zeros() {
    let dir = scratch("flow-zero");
    let frame = gradient_frame(12, 0.0);
    write_pgm(&dir.join("a.pgm"), &frame).unwrap();
    write_pgm(&dir.join("b.pgm"), &frame).unwrap();
    let cfg = write_config(&dir, "flow.cfg", "flow.n_iters = 20\n");

    let out_dir = dir.join("out");
    let out = run(&[
        "flow",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        dir.join("a.pgm").to_str().unwrap(),
        dir.join("b.pgm").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let flo = read_flo(&out_dir.join("flow_0000.flo")).unwrap();
    assert!(flo.data.iter().all(|&v| v == 0.0));
    assert!(!out_dir.join("flow_0001.flo").exists());
}

#[test]
fn flow_three_frames_write_two_outputs_and_ppm() {
    let dir = scratch("flow-three");
    for (i, shift) in [0.0, 1.0, 2.0].iter().enumerate() {
        write_pgm(&dir.join(format!("f{i}.pgm")), &gradient_frame(12, *shift)).unwrap();
    }
    let cfg = write_config(&dir, "flow.cfg", "flow.n_iters = 10\nflow.write_ppm = true\n");
    let out_dir = dir.join("out");
    let out = run(&[
        "flow",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        dir.join("f0.pgm").to_str().unwrap(),
        dir.join("f1.pgm").to_str().unwrap(),
        dir.join("f2.pgm").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("flow_0000.flo").exists());
    assert!(out_dir.join("flow_0001.flo").exists());
    assert!(out_dir.join("flow_0000.ppm").exists());
    assert!(out_dir.join("flow_0001.ppm").exists());
    assert!(!out_dir.join("flow_0002.flo").exists());
}

#[test]
fn flow_missing_input_exits_2_and_names_the_path() {
    let dir = scratch("flow-missing");
    let frame = gradient_frame(12, 0.0);
    write_pgm(&dir.join("a.pgm"), &frame).unwrap();
    let cfg = write_config(&dir, "flow.cfg", "");
    let missing = dir.join("nope.pgm");
    let out = run(&[
        "flow",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
        dir.join("a.pgm").to_str().unwrap(),
        missing.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.pgm"), "{stderr}");
}

#[test]
fn flow_single_frame_is_usage_error() {
    let dir = scratch("flow-single");
    write_pgm(&dir.join("a.pgm"), &gradient_frame(12, 0.0)).unwrap();
    let cfg = write_config(&dir, "flow.cfg", "");
    let out = run(&[
        "flow",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
        dir.join("a.pgm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_exits_1_and_names_the_key() {
    let dir = scratch("badkey");
    let cfg = write_config(&dir, "bench.cfg", "bench.walks = 3\n");
    let out = run(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bench.walks"));
}

#[test]
fn missing_required_key_exits_1_and_names_the_key() {
    let dir = scratch("misskey");
    let cfg = write_config(&dir, "train.cfg", "train.batch_size = 4\n");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train.stage"), "{stderr}");
}

#[test]
fn bench_single_point_emits_header_and_one_row() {
    let dir = scratch("bench-one");
    let cfg = write_config(
        &dir,
        "bench.cfg",
        "bench.resolutions = 8\nbench.channels = 2\nbench.iters = 3\nbench.runs = 5\n",
    );
    let out = run(&["bench", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.trim().lines().collect();
    assert_eq!(lines[0], "resolution,channels,iters,median_s,iqr_s");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("8,2,3,"));
}

#[test]
fn bench_rejects_too_few_runs() {
    let dir = scratch("bench-runs");
    let cfg = write_config(&dir, "bench.cfg", "bench.runs = 3\n");
    let out = run(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

const TINY_TRAIN: &str = "\
seed = 11
data.classes = 4
data.frames = 5
data.train_per_class = 3
data.test_per_class = 2
model.flow_iters = 3
model.convlstm_hidden = 3
train.stage = flow
train.epochs = 2
train.batch_size = 4
train.lr = 0.01
train.clip_length = 5
";

#[test]
fn train_writes_metrics_and_checkpoint_then_eval_reads_them() {
    let dir = scratch("train-eval");
    let cfg = write_config(&dir, "train.cfg", TINY_TRAIN);
    let out_dir = dir.join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("stage,epoch,loss,accuracy\n"));
    assert_eq!(metrics.trim().lines().count(), 3); // header + 2 epochs

    let eval_cfg = write_config(
        &dir,
        "eval.cfg",
        "seed = 11\ndata.classes = 4\ndata.frames = 5\ndata.train_per_class = 3\ndata.test_per_class = 2\nmodel.flow_iters = 3\nmodel.convlstm_hidden = 3\n",
    );
    let out = run(&[
        "eval",
        "--config",
        eval_cfg.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint.rfk").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("split,accuracy\ntest,"), "{stdout}");
}

#[test]
fn env_seed_overrides_config_seed() {
    let dir = scratch("env-seed");
    // Two different config seeds, same env seed: identical outputs.
    let cfg_a = write_config(&dir, "a.cfg", &TINY_TRAIN.replace("seed = 11", "seed = 1"));
    let cfg_b = write_config(&dir, "b.cfg", &TINY_TRAIN.replace("seed = 11", "seed = 2"));
    for (cfg, out_name) in [(&cfg_a, "run_a"), (&cfg_b, "run_b")] {
        let out = Command::new(bin())
            .args([
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                dir.join(out_name).to_str().unwrap(),
            ])
            .env("REPFLOW_SEED", "777")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ck_a = std::fs::read(dir.join("run_a/checkpoint.rfk")).unwrap();
    let ck_b = std::fs::read(dir.join("run_b/checkpoint.rfk")).unwrap();
    assert_eq!(ck_a, ck_b);
    let m_a = std::fs::read(dir.join("run_a/metrics.csv")).unwrap();
    let m_b = std::fs::read(dir.join("run_b/metrics.csv")).unwrap();
    assert_eq!(m_a, m_b);
}

#[test]
fn invalid_env_seed_is_usage_error() {
    let dir = scratch("env-bad");
    let cfg = write_config(&dir, "t.cfg", TINY_TRAIN);
    let out = Command::new(bin())
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join("o").to_str().unwrap(),
        ])
        .env("REPFLOW_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
