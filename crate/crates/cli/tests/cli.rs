//! End-to-end checks of the `lode` binary: every subcommand, the documented
//! exit codes, and the file formats other tools consume.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn lode(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lode"))
        .args(args)
        .current_dir(dir)
        .env_remove("LODE_CONFIG")
        .output()
        .expect("spawn lode")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Data rows of a CSV written by the binary: everything after the
/// `time,value`-style header, skipping `#` comments.
fn data_rows(text: &str) -> Vec<&str> {
    text.lines()
        .skip_while(|l| l.starts_with('#'))
        .skip(1)
        .filter(|l| !l.is_empty())
        .collect()
}

const MICRO_CONFIG: &str = r#"
ic = [0.0, 1.0, 1.05]
dt = 0.05
steps = 360
eta = 0.3
noise_seed = 9
train_end = 12.0
val_end = 14.0
fnn_cap = 256
hidden_width = 8
fit_blocks = 1
coder_blocks = 1
dropout = 0.0
segments = 2
batch = 16
phase1_iters = 10
phase2_iters = 10
val_every = 5
infer_iters = 50
"#;

/// One trained micro run shared by the forecast and eval tests. Keeping the
/// TempDir in the fixture holds the artifacts alive for the whole binary.
struct Trained {
    dir: tempfile::TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
    clean: PathBuf,
    noisy: PathBuf,
}

fn trained() -> &'static Trained {
    static FIXTURE: OnceLock<Trained> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("micro.toml");
        std::fs::write(&config, MICRO_CONFIG).unwrap();

        let gen = lode(
            &root,
            &[
                "--config", "micro.toml", "generate", "--steps", "360", "--eta", "0.3",
                "--seed", "9", "--prefix", "micro",
            ],
        );
        assert!(gen.status.success(), "generate failed: {}", stderr(&gen));

        let train = lode(
            &root,
            &[
                "--config", "micro.toml", "train", "--data", "micro_noisy.csv",
                "--checkpoint", "micro.ckpt.json", "--metrics", "micro-metrics.csv",
            ],
        );
        assert!(train.status.success(), "train failed: {}", stderr(&train));

        Trained {
            config,
            checkpoint: root.join("micro.ckpt.json"),
            clean: root.join("micro_clean.csv"),
            noisy: root.join("micro_noisy.csv"),
            dir,
        }
    })
}

#[test]
fn generate_writes_trajectory_series_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = lode(
        dir.path(),
        &["generate", "--steps", "200", "--eta", "0.3", "--seed", "5", "--prefix", "demo"],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let traj = read(&dir.path().join("demo_traj.csv"));
    assert!(traj.lines().any(|l| l == "time,x,y,z"));
    assert_eq!(data_rows(&traj).len(), 201);

    let clean = read(&dir.path().join("demo_clean.csv"));
    let noisy = read(&dir.path().join("demo_noisy.csv"));
    for text in [&clean, &noisy] {
        assert!(text.starts_with("# config "));
        assert!(text.lines().any(|l| l == "time,value"));
        assert_eq!(data_rows(text).len(), 201);
    }
    assert_ne!(data_rows(&clean), data_rows(&noisy));

    let meta: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("demo_meta.json"))).unwrap();
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 16);
    assert_eq!(meta["steps"], 200);
    assert_eq!(meta["eta"], 0.3);
}

#[test]
fn generate_skips_noisy_file_when_eta_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = lode(dir.path(), &["generate", "--steps", "100", "--eta", "0", "--prefix", "q"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(dir.path().join("q_clean.csv").exists());
    assert!(!dir.path().join("q_noisy.csv").exists());
}

#[test]
fn generate_without_steps_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lode(dir.path(), &["generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--steps"));
}

#[test]
fn fnn_scan_reports_one_gamma_per_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let gen = lode(dir.path(), &["generate", "--steps", "600", "--eta", "0", "--prefix", "s"]);
    assert!(gen.status.success());

    let out = lode(
        dir.path(),
        &[
            "fnn-scan", "--series", "s_clean.csv", "--m", "6", "--tau", "0.1",
            "--samples", "400", "--out", "gamma.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let text = read(&dir.path().join("gamma.csv"));
    assert!(text.starts_with("# config "));
    assert!(text.lines().any(|l| l == "dimension,gamma"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0], "1,1.0");
    let gammas: Vec<f64> =
        rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(gammas.iter().all(|g| (0.0..=1.0).contains(g)));
}

#[test]
fn fnn_scan_needs_at_least_two_samples() {
    let dir = tempfile::tempdir().unwrap();
    let gen = lode(dir.path(), &["generate", "--steps", "600", "--eta", "0", "--prefix", "s"]);
    assert!(gen.status.success());
    let out = lode(
        dir.path(),
        &["fnn-scan", "--series", "s_clean.csv", "--samples", "1"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn equal_seeds_give_identical_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("micro.toml"), MICRO_CONFIG).unwrap();
    for sub in ["a", "b"] {
        std::fs::create_dir(dir.path().join(sub)).unwrap();
        let out = lode(
            &dir.path().join(sub),
            &["--config", "../micro.toml", "train"],
        );
        assert!(out.status.success(), "train {sub} failed: {}", stderr(&out));
    }
    let metrics_a = read(&dir.path().join("a/metrics.csv"));
    let metrics_b = read(&dir.path().join("b/metrics.csv"));
    assert!(metrics_a.lines().count() > 2);
    assert_eq!(metrics_a, metrics_b);
    assert_eq!(
        std::fs::read(dir.path().join("a/lode-checkpoint.json")).unwrap(),
        std::fs::read(dir.path().join("b/lode-checkpoint.json")).unwrap()
    );
}

#[test]
fn resuming_a_half_finished_run_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("micro.toml"), MICRO_CONFIG).unwrap();

    let straight = lode(
        dir.path(),
        &["--config", "micro.toml", "train", "--checkpoint", "one.json", "--metrics", "one.csv"],
    );
    assert!(straight.status.success(), "{}", stderr(&straight));

    let first = lode(
        dir.path(),
        &[
            "--config", "micro.toml", "train", "--checkpoint", "two.json",
            "--metrics", "two.csv", "--phase2-iters", "0", "--mode", "delay",
        ],
    );
    assert!(first.status.success(), "{}", stderr(&first));
    let rows_after_first = data_rows(&read(&dir.path().join("two.csv"))).len();

    let second = lode(
        dir.path(),
        &[
            "--config", "micro.toml", "train", "--checkpoint", "two.json",
            "--metrics", "two.csv", "--resume",
        ],
    );
    assert!(second.status.success(), "{}", stderr(&second));

    // The `# config` comment differs (the first leg ran with overridden
    // flags); every metric row must nonetheless coincide.
    let one = read(&dir.path().join("one.csv"));
    let two = read(&dir.path().join("two.csv"));
    assert!(data_rows(&two).len() > rows_after_first);
    assert_eq!(data_rows(&one), data_rows(&two));
    assert_eq!(
        std::fs::read(dir.path().join("one.json")).unwrap(),
        std::fs::read(dir.path().join("two.json")).unwrap()
    );
}

#[test]
fn forecast_with_zero_steps_writes_only_the_header() {
    let t = trained();
    let out = lode(
        t.dir.path(),
        &[
            "--config", "micro.toml", "forecast", "--checkpoint", "micro.ckpt.json",
            "--t0", "12.0", "--steps", "0", "--out", "empty.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = read(&t.dir.path().join("empty.csv"));
    assert!(text.lines().any(|l| l == "time,value"));
    assert!(data_rows(&text).is_empty());
    let _ = (&t.config, &t.checkpoint);
}

#[test]
fn forecast_emits_finite_values_on_the_time_grid() {
    let t = trained();
    let out = lode(
        t.dir.path(),
        &[
            "--config", "micro.toml", "forecast", "--checkpoint", "micro.ckpt.json",
            "--t0", "12.0", "--steps", "20", "--out", "fc.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = read(&t.dir.path().join("fc.csv"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 20);
    let (t1, v1): (f64, f64) = {
        let mut it = rows[0].split(',');
        (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
    };
    assert!((t1 - 12.05).abs() < 1e-9);
    assert!(v1.is_finite());
    for row in &rows {
        let v: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v.is_finite());
    }
}

#[test]
fn forecast_without_a_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = lode(
        dir.path(),
        &["forecast", "--checkpoint", "missing.json", "--t0", "1.0", "--steps", "5"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn eval_reports_each_case_and_writes_the_tables() {
    let t = trained();
    let case = format!(
        "micro,{},{}",
        t.checkpoint.file_name().unwrap().to_str().unwrap(),
        t.noisy.file_name().unwrap().to_str().unwrap()
    );
    let out = lode(
        t.dir.path(),
        &[
            "eval", "--clean", "micro_clean.csv", "--case", &case,
            "--out", "report.csv", "--horizon-out", "horizon.csv", "--steps", "40",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("micro"));

    let report = read(&t.dir.path().join("report.csv"));
    assert!(report.lines().any(|l| l == "label,nmse_raw,nmse_fit,nmse_decoded"));
    let row = data_rows(&report)[0];
    assert!(row.starts_with("micro,"));
    let nmse_raw: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!(nmse_raw > 0.0);

    let horizon = read(&t.dir.path().join("horizon.csv"));
    assert!(horizon.lines().any(|l| l == "label,horizon"));
    let h: f64 =
        data_rows(&horizon)[0].split(',').nth(1).unwrap().parse().unwrap();
    assert!(h >= 0.0);
}

#[test]
fn eval_rejects_a_series_the_checkpoint_was_not_trained_on() {
    let t = trained();
    let gen = lode(
        t.dir.path(),
        &["generate", "--steps", "360", "--eta", "0.8", "--seed", "77", "--prefix", "other"],
    );
    assert!(gen.status.success());
    let out = lode(
        t.dir.path(),
        &[
            "eval", "--clean", "micro_clean.csv", "--case",
            "bad,micro.ckpt.json,other_noisy.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("wrong series"));
}
