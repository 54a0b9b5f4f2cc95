use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sfeuot::train::{load_networks_from, TrainState};
use sfeuot_cli::manifest::{config_hash, RunManifest, MANIFEST_FILE};
use sfeuot_cli::read_config;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sfeuot"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path, total_iters: u64, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{"source": {{"kind": "std_gaussian", "dim": 2}}, "target": {{"kind": "eight_gaussian"}},
            "sigma": 0.8, "n_steps": 20, "lambda_g": 0.1, "lambda_d": 1.0, "p": 1.0,
            "batch_size": 32, "total_iters": {total_iters}, "lr_g": 2e-4, "lr_v": 1e-4, "lr_final": 5e-5,
            "seed": 3, "generator_hidden": [16, 16], "value_hidden": [16, 16],
            "eval_samples": 100, "eval_every": 5{extra}}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn without_wall_clock(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
        .collect()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = run(&["train", "--config", p(&missing), "--out", p(&dir.path().join("out"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1, r#", "lamda_g": 0.2"#);
    let o = run(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lamda_g"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn zero_iterations_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0, "");
    let out = dir.path().join("out");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (g, v) = load_networks_from(&out.join("checkpoint")).unwrap();
    let init = TrainState::new(read_config(&cfg, None).unwrap()).unwrap();
    assert_eq!(g.net, init.generator.net);
    assert_eq!(v.net, init.value.net);
}

#[test]
fn training_is_reproducible_and_leaves_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 12, "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["train", "--config", p(&cfg), "--out", p(out), "--quiet"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        for f in [
            "report.csv",
            "manifest.json",
            "checkpoint/model.sfeu",
            "checkpoint/optimizer.sfeu",
            "checkpoint/checkpoint.json",
        ] {
            assert!(out.join(f).exists(), "{f} missing");
        }
    }
    let bytes = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&a, "checkpoint/model.sfeu"), bytes(&b, "checkpoint/model.sfeu"));
    assert_eq!(
        bytes(&a, "checkpoint/optimizer.sfeu"),
        bytes(&b, "checkpoint/optimizer.sfeu")
    );
    let report = |d: &Path| without_wall_clock(&fs::read_to_string(d.join("report.csv")).unwrap());
    assert_eq!(report(&a), report(&b));
    let text = fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.starts_with("iter,loss_v,loss_g,mean_abs_R"));

    let m: RunManifest = serde_json::from_str(&fs::read_to_string(a.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.config_hash, config_hash(&m.config));
    assert!(m.finished_unix_ms >= m.started_unix_ms);
    let again: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(again["config_hash"], serde_json::json!(m.config_hash));

    // The recorded config alone reproduces the run.
    let replay_cfg = dir.path().join("replay.json");
    fs::write(&replay_cfg, serde_json::to_string(&m.config).unwrap()).unwrap();
    let c = dir.path().join("c");
    assert_eq!(
        code(&run(&["train", "--config", p(&replay_cfg), "--out", p(&c), "--quiet"])),
        0
    );
    assert_eq!(bytes(&a, "checkpoint/model.sfeu"), bytes(&c, "checkpoint/model.sfeu"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3, "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(
        code(&run(&["train", "--config", p(&cfg), "--out", p(&a), "--quiet"])),
        0
    );
    assert_eq!(
        code(&run(&[
            "--seed",
            "99",
            "train",
            "--config",
            p(&cfg),
            "--out",
            p(&b),
            "--quiet"
        ])),
        0
    );
    assert_ne!(
        fs::read(a.join("checkpoint/model.sfeu")).unwrap(),
        fs::read(b.join("checkpoint/model.sfeu")).unwrap()
    );
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(b.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(m.config["seed"], 99);
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 10, "");
    let full = dir.path().join("full");
    assert_eq!(
        code(&run(&["train", "--config", p(&cfg), "--out", p(&full), "--quiet"])),
        0
    );

    let half_cfg = dir.path().join("half.json");
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    doc["total_iters"] = 5.into();
    fs::write(&half_cfg, doc.to_string()).unwrap();
    let half = dir.path().join("half");
    assert_eq!(
        code(&run(&["train", "--config", p(&half_cfg), "--out", p(&half), "--quiet"])),
        0
    );
    let rest = dir.path().join("rest");
    let o = run(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&rest),
        "--resume",
        p(&half.join("checkpoint")),
        "--quiet",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(rest.join("report.csv")).unwrap();
    let iters: Vec<u64> = report
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(iters.iter().all(|&i| i == 10), "{iters:?}");
}

#[test]
fn numeric_blow_up_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("huge.json");
    fs::write(
        &cfg,
        r#"{"source": {"kind": "gaussian", "mean": [1e307], "cov": [[1.0]]},
            "target": {"kind": "gaussian", "mean": [-1e307], "cov": [[1.0]]},
            "sigma": 1.0, "n_steps": 4, "lambda_g": 1.0, "lambda_d": 1.0, "p": 2.0,
            "batch_size": 4, "total_iters": 3, "lr_g": 1e-3, "lr_v": 1e-3, "lr_final": 1e-3,
            "seed": 0, "generator_hidden": [4], "value_hidden": [4]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out), "--quiet"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(out.join("error.txt").exists());
    assert!(out.join("report.csv").exists());
}

#[test]
fn eval_is_deterministic_and_emits_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0, "");
    let train_out = dir.path().join("train");
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--out", p(&train_out)])), 0);
    let ckpt = train_out.join("checkpoint");
    let args = |out: &Path| {
        vec![
            "eval".to_string(),
            "--checkpoint".into(),
            p(&ckpt).into(),
            "--config".into(),
            p(&cfg).into(),
            "--out".into(),
            p(out).into(),
            "--samples".into(),
            "400".into(),
            "--oracle-atoms".into(),
            "100".into(),
            "--permutations".into(),
            "10".into(),
        ]
    };
    let (a, b) = (dir.path().join("ea"), dir.path().join("eb"));
    for out in [&a, &b] {
        let o = bin().args(args(out)).output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["metrics.csv", "scatter.csv", "scatter.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    for name in [
        "transport_cost",
        "mode_coverage",
        "mode_freq_7",
        "target_mode_freq_0",
        "energy_distance",
        "energy_null",
        "energy_ratio",
    ] {
        assert!(
            metrics.lines().any(|l| l.starts_with(&format!("{name},"))),
            "{name} missing:\n{metrics}"
        );
    }
    let scatter = fs::read_to_string(a.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().next(), Some("x0,x1,tx0,tx1"));
    assert_eq!(scatter.lines().count(), 401);
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0, "");
    let train_out = dir.path().join("train");
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--out", p(&train_out)])), 0);
    let one_d = dir.path().join("one_d.json");
    fs::write(
        &one_d,
        r#"{"source": {"kind": "std_gaussian", "dim": 1}, "target": {"kind": "gaussian_pair", "dim": 1, "pair_seed": 0},
            "sigma": 1.0, "n_steps": 20, "lambda_g": 0.1, "lambda_d": 1.0, "p": 1.0,
            "batch_size": 8, "total_iters": 0, "lr_g": 1e-4, "lr_v": 1e-4, "lr_final": 1e-5, "seed": 0}"#,
    )
    .unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        p(&train_out.join("checkpoint")),
        "--config",
        p(&one_d),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));
}

#[test]
fn gaussian_oracle_prints_the_unit_cross_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "oracle",
        "gaussian",
        "--var0",
        "1",
        "--var1",
        "1",
        "--sigma2",
        "1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("cross_cov_00"))
        .unwrap()
        .to_string();
    let c: f64 = line.split(" = ").nth(1).unwrap().parse().unwrap();
    assert!((c - 0.618034).abs() < 1e-6);
}

#[test]
fn one_by_one_sinkhorn_plan_is_unit_mass() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["oracle", "sinkhorn", "--n", "1", "--m", "1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(dir.path().join("coupling.csv")).unwrap(),
        "i,j,mass\n0,0,1\n"
    );
}

#[test]
fn brute_force_agrees_with_sinkhorn_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "--seed",
            "7",
            "oracle",
            "brute",
            "--n",
            "3",
            "--m",
            "3",
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let line = stdout(&o)
            .lines()
            .find(|l| l.starts_with("max_abs_diff_vs_sinkhorn"))
            .unwrap()
            .to_string();
        let diff: f64 = line.split(" = ").nth(1).unwrap().parse().unwrap();
        assert!(diff <= 1e-3, "{diff}");
    }
    for f in ["coupling.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn semi_relaxed_sinkhorn_keeps_unit_mass() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "--seed",
        "2",
        "oracle",
        "sinkhorn",
        "--n",
        "5",
        "--m",
        "4",
        "--epsilon",
        "0.3",
        "--alpha-div",
        "0.7",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0);
    let mass: f64 = stdout(&o)
        .lines()
        .find(|l| l.starts_with("total_mass"))
        .and_then(|l| l.split(" = ").nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((mass - 1.0).abs() <= 1e-4);
}

#[test]
fn gradcheck_passes_and_its_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for term in sfeuot::gradcheck::TERMS {
        assert!(out.contains(term), "{term}");
    }
    assert!(dir.path().join("gradcheck.csv").exists());
    let bad = run(&["gradcheck", "--corrupt-derivative", "--points", "3"]);
    assert_ne!(code(&bad), 0);
}

#[test]
fn threads_flag_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "--threads",
        "4",
        "oracle",
        "sinkhorn",
        "--n",
        "2",
        "--m",
        "2",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("single-threaded"));
}
