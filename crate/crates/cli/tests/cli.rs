//! End-to-end checks of the dbmef binary: every subcommand, the exit-code
//! contract, and the determinism of artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbmef_core::EvaluationReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dbmef"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawning dbmef")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

/// A deliberately tiny world so the whole pipeline runs in well under a
/// second: 4 dims, 2 classes, short schedule, single voter.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(
        &path,
        r#"{
            "seed": 7,
            "data_dim": 4,
            "num_classes": 2,
            "sigma": 1.0,
            "mean_scale": 0.8,
            "n_train_per_class": 20,
            "n_test_per_class": 10,
            "hidden_dim": 8,
            "epochs": 2,
            "base_epochs": 1,
            "batch_size": 8,
            "t_max": 20,
            "t_eval": 3,
            "voters": 1,
            "prot": 0.9
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);

    assert_ok(&run(&["train-base", "--config", "tiny.json", "--out", "base.ck"], d));
    assert_ok(&run(&["train-diffusion", "--config", "tiny.json", "--out", "den.ck"], d));
    assert_ok(&run(
        &["calibrate", "--config", "tiny.json", "--checkpoint", "base.ck", "--out", "cal.json"],
        d,
    ));
    assert_ok(&run(
        &[
            "evaluate",
            "--config",
            "tiny.json",
            "--checkpoint",
            "base.ck",
            "--denoiser",
            "den.ck",
            "--calibration",
            "cal.json",
            "--out",
            "report.json",
        ],
        d,
    ));
    assert_ok(&run(
        &[
            "ablate",
            "--config",
            "tiny.json",
            "--checkpoint",
            "base.ck",
            "--denoiser",
            "den.ck",
            "--grid",
            "prot=0.0,1.0",
            "--out",
            "sweep.csv",
        ],
        d,
    ));
    assert_ok(&run(
        &["export-scores", "--config", "tiny.json", "--checkpoint", "base.ck", "--out", "scores.csv"],
        d,
    ));

    let report = EvaluationReport::from_json(&fs::read_to_string(d.join("report.json")).unwrap())
        .unwrap();
    assert_eq!(report.n_total, 20);
    assert_eq!(report.config.seed, 7);
    report.validate().unwrap();

    let sweep = fs::read_to_string(d.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("param,value,"));
    assert!(rows[1].starts_with("prot,0,"));
    assert!(rows[2].starts_with("prot,1,"));

    let scores = fs::read_to_string(d.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 41);
    assert_eq!(scores.lines().next(), Some("score,correct"));
}

#[test]
fn evaluate_without_calibration_uses_config_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    assert_ok(&run(&["train-base", "--config", "tiny.json", "--out", "base.ck"], d));
    assert_ok(&run(&["train-diffusion", "--config", "tiny.json", "--out", "den.ck"], d));
    assert_ok(&run(
        &[
            "evaluate",
            "--config",
            "tiny.json",
            "--checkpoint",
            "base.ck",
            "--denoiser",
            "den.ck",
            "--out",
            "r1.json",
        ],
        d,
    ));
    // Quantile mode without a calibration file falls back to scoring the
    // synthetic training stream.
    let quantile = fs::read_to_string(d.join("tiny.json"))
        .unwrap()
        .replace("\"prot\": 0.9", "\"prot\": 0.9, \"threshold_mode\": \"quantile\"");
    fs::write(d.join("quant.json"), quantile).unwrap();
    assert_ok(&run(
        &[
            "evaluate",
            "--config",
            "quant.json",
            "--checkpoint",
            "base.ck",
            "--denoiser",
            "den.ck",
            "--out",
            "r2.json",
        ],
        d,
    ));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    let with_flag = |seed: &str, out: &str| {
        assert_ok(&run(
            &["train-base", "--config", "tiny.json", "--seed", seed, "--out", out],
            d,
        ));
    };
    with_flag("7", "same.ck");
    with_flag("8", "other.ck");
    assert_ok(&run(&["train-base", "--config", "tiny.json", "--out", "plain.ck"], d));
    let plain = fs::read(d.join("plain.ck")).unwrap();
    assert_eq!(plain, fs::read(d.join("same.ck")).unwrap());
    assert_ne!(plain, fs::read(d.join("other.ck")).unwrap());
}

#[test]
fn trains_from_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    // 4 images of 2x2 pixels, two labels each way.
    let mut images = Vec::new();
    images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for v in [4u32, 2, 2] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&[0, 64, 128, 255, 10, 20, 30, 40, 200, 210, 220, 230, 5, 5, 5, 5]);
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    labels.extend_from_slice(&4u32.to_be_bytes());
    labels.extend_from_slice(&[0, 1, 0, 1]);
    let mut f = fs::File::create(d.join("imgs.idx")).unwrap();
    f.write_all(&images).unwrap();
    let mut f = fs::File::create(d.join("lbls.idx")).unwrap();
    f.write_all(&labels).unwrap();

    assert_ok(&run(
        &[
            "train-base",
            "--config",
            "tiny.json",
            "--data-images",
            "imgs.idx",
            "--data-labels",
            "lbls.idx",
            "--out",
            "idx_base.ck",
        ],
        d,
    ));
    assert!(d.join("idx_base.ck").is_file());
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    assert_ok(&run(&["train-base", "--config", "tiny.json", "--out", "base.ck"], d));
    assert_ok(&run(&["train-diffusion", "--config", "tiny.json", "--out", "den.ck"], d));

    // Usage errors: unknown subcommand, missing required flag, malformed grid.
    assert_eq!(code(&run(&["frobnicate"], d)), 2);
    assert_eq!(code(&run(&["evaluate", "--config", "tiny.json"], d)), 2);
    assert_eq!(
        code(&run(
            &[
                "ablate",
                "--config",
                "tiny.json",
                "--checkpoint",
                "base.ck",
                "--denoiser",
                "den.ck",
                "--grid",
                "lambda",
                "--out",
                "s.csv",
            ],
            d,
        )),
        2
    );
    // --data-images without --data-labels is rejected before anything runs.
    assert_eq!(
        code(&run(
            &["train-base", "--config", "tiny.json", "--data-images", "x.idx", "--out", "b.ck"],
            d,
        )),
        2
    );

    // Runtime errors: missing checkpoint carries the path, unknown grid
    // parameter names the offender.
    let missing = run(
        &[
            "evaluate",
            "--config",
            "tiny.json",
            "--checkpoint",
            "nope.ck",
            "--denoiser",
            "den.ck",
            "--out",
            "r.json",
        ],
        d,
    );
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ck"));

    let bad_grid = run(
        &[
            "ablate",
            "--config",
            "tiny.json",
            "--checkpoint",
            "base.ck",
            "--denoiser",
            "den.ck",
            "--grid",
            "bogus=1,2",
            "--out",
            "s.csv",
        ],
        d,
    );
    assert_eq!(code(&bad_grid), 1);
    assert!(String::from_utf8_lossy(&bad_grid.stderr).contains("bogus"));

    let bad_config = run(&["train-base", "--config", "absent.json", "--out", "b.ck"], d);
    assert_eq!(code(&bad_config), 1);
    assert!(String::from_utf8_lossy(&bad_config.stderr).contains("absent.json"));
}
