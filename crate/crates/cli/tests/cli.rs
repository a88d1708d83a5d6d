//! End-to-end runs of the `depthart` binary on a tiny dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use depthart::vq::{ScaleSchedule, VqConfig, VqModel};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_depthart");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn depthart")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(BIN)
        .args(args)
        .env(key, value)
        .output()
        .expect("spawn depthart")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Digest of every file under `dir`, keyed by relative path.
fn tree_digest(dir: &Path) -> Vec<(PathBuf, String)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, String)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "run_manifest.txt" {
                let hash = Sha256::digest(std::fs::read(&path).unwrap());
                let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), hex));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Dataset and autoencoder shared by every test in this binary.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    vq: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        ok(run(&[
            "gen-data",
            "--out",
            s(&data),
            "--train",
            "12",
            "--eval",
            "4",
            "--seed",
            "3",
        ]));
        let cfg = dir.path().join("vq.cfg");
        std::fs::write(
            &cfg,
            format!(
                "data_dir={}\nout_dir={}\nseed=0\nsteps=4\nbatch=2\nkmeans_iters=2\nwarmup_samples=8\n",
                s(&data),
                s(&dir.path().join("vq"))
            ),
        )
        .unwrap();
        ok(run(&["train-vqvae", "--config", s(&cfg)]));
        let vq = dir.path().join("vq/vq.dart");
        Fixture { _dir: dir, data, vq }
    })
}

fn var_config(dir: &Path, steps: usize) -> PathBuf {
    let f = fixture();
    let path = dir.join("var.cfg");
    std::fs::write(
        &path,
        format!(
            "regime=tf\nlr=1e-4\nwd=1e-2\nbatch=2\nsteps={steps}\ndecay_period=2\ndecay_gamma=0.8\nseed=0\n\
             data_dir={}\nout_dir={}\nvq={}\n",
            s(&f.data),
            s(&dir.join("run")),
            s(&f.vq)
        ),
    )
    .unwrap();
    path
}

fn train(cfg: &Path, regime: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train-var", "--config", s(cfg), "--regime", regime, "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gen_data_is_reproducible_per_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        ok(run(&[
            "gen-data",
            "--out",
            s(out),
            "--train",
            "3",
            "--eval",
            "2",
            "--seed",
            seed,
        ]));
    }
    let (da, db, dc) = (tree_digest(&a), tree_digest(&b), tree_digest(&c));
    assert!(!da.is_empty());
    assert_eq!(da, db);
    assert_ne!(da, dc);
}

#[test]
fn unwritable_output_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        s(&blocker.join("sub")),
        "--train",
        "1",
        "--eval",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("sub"));
}

#[test]
fn missing_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = var_config(dir.path(), 2);
    let text = std::fs::read_to_string(&cfg).unwrap();
    let trimmed: String = text
        .lines()
        .filter(|l| !l.starts_with("decay_gamma"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&cfg, trimmed).unwrap();
    let out = train(&cfg, "tf", &dir.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("decay_gamma"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let cfg = var_config(dir.path(), 2);
    let out = train(&cfg, "bogus", &dir.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn missing_data_exits_three() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "eval",
        "--model",
        s(&dir.path().join("none.dart")),
        "--vq",
        s(&fixture().vq),
        "--data",
        s(&fixture().data),
        "--out",
        s(&dir.path().join("m.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("none.dart"));
}

#[test]
fn regimes_train_distinct_models_and_evaluate() {
    let dir = TempDir::new().unwrap();
    let cfg = var_config(dir.path(), 3);
    let (tf, da) = (dir.path().join("tf"), dir.path().join("depthart"));
    ok(train(&cfg, "tf", &tf, &[]));
    ok(train(&cfg, "depthart", &da, &[]));
    let (ct, cd) = (tf.join("checkpoint.dart"), da.join("checkpoint.dart"));
    assert_ne!(std::fs::read(&ct).unwrap(), std::fs::read(&cd).unwrap());
    for run_dir in [&tf, &da] {
        let manifest = std::fs::read_to_string(run_dir.join("run_manifest.txt")).unwrap();
        for line in manifest.lines().filter_map(|l| l.strip_prefix("output=")) {
            assert!(Path::new(line).exists(), "{line} listed but missing");
        }
        assert!(manifest.contains("config.regime="));
        assert_eq!(
            std::fs::read_to_string(run_dir.join("loss.csv"))
                .unwrap()
                .lines()
                .count(),
            4
        );
    }

    let csv = dir.path().join("metrics.csv");
    let args = [
        "eval",
        "--model",
        s(&ct),
        "--model",
        s(&cd),
        "--vq",
        s(&fixture().vq),
        "--data",
        s(&fixture().data),
        "--out",
        s(&csv),
    ];
    ok(run(&args));
    let report = depthart::metrics::MetricsReport::parse_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["tf", "depthart"]);
    assert!(report.rows.iter().all(|r| r.rank.is_some() && r.absrel.is_finite()));
    assert!(dir.path().join("metrics.csv.manifest").exists());

    // Thread count must not change any number.
    let first = std::fs::read(&csv).unwrap();
    ok(run_env(&args, "DEPTHART_THREADS", "1"));
    assert_eq!(std::fs::read(&csv).unwrap(), first);
    ok(run_env(&args, "DEPTHART_THREADS", "3"));
    assert_eq!(std::fs::read(&csv).unwrap(), first);

    let curve = dir.path().join("curve.csv");
    let svg = dir.path().join("curve.svg");
    ok(run(&[
        "scale-curve",
        "--model",
        s(&cd),
        "--vq",
        s(&fixture().vq),
        "--data",
        s(&fixture().data),
        "--out",
        s(&curve),
        "--svg",
        s(&svg),
    ]));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 1 + 4);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let out = run_env(&["gen-data", "--out", "/nonexistent/x"], "DEPTHART_THREADS", "zero");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("DEPTHART_THREADS"));
}

#[test]
fn schedule_mismatch_names_both_schedules() {
    let dir = TempDir::new().unwrap();
    let cfg = var_config(dir.path(), 1);
    let run_dir = dir.path().join("tf");
    ok(train(&cfg, "tf", &run_dir, &[]));
    let other = VqModel::new(
        VqConfig {
            schedule: ScaleSchedule::new(vec![(1, 1), (4, 4), (8, 8)]).unwrap(),
            ..VqConfig::default()
        },
        0,
    )
    .unwrap();
    let other_path = dir.path().join("other.dart");
    other.save(&other_path).unwrap();
    let out = run(&[
        "eval",
        "--model",
        s(&run_dir.join("checkpoint.dart")),
        "--vq",
        s(&other_path),
        "--data",
        s(&fixture().data),
        "--out",
        s(&dir.path().join("m.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let msg = stderr(&out);
    assert!(
        msg.contains("[1x1,2x2,4x4,8x8]") && msg.contains("[1x1,4x4,8x8]"),
        "{msg}"
    );
}

#[test]
fn killed_run_resumes_to_the_same_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = var_config(dir.path(), 12);
    let whole = dir.path().join("whole");
    ok(train(&cfg, "depthart", &whole, &["--checkpoint-every", "2"]));

    let parted = dir.path().join("parted");
    let mut child = Command::new(BIN)
        .args([
            "train-var",
            "--config",
            s(&cfg),
            "--regime",
            "depthart",
            "--out",
            s(&parted),
        ])
        .args(["--checkpoint-every", "2"])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(120);
    while !parted.join("checkpoint.dart").exists() {
        assert!(Instant::now() < deadline, "no checkpoint written");
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    ok(train(
        &cfg,
        "depthart",
        &parted,
        &["--checkpoint-every", "2", "--resume"],
    ));
    assert_eq!(
        std::fs::read(whole.join("checkpoint.dart")).unwrap(),
        std::fs::read(parted.join("checkpoint.dart")).unwrap()
    );
    let losses = std::fs::read_to_string(parted.join("loss.csv")).unwrap();
    assert_eq!(losses, std::fs::read_to_string(whole.join("loss.csv")).unwrap());
}
