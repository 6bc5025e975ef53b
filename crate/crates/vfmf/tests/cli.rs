//! End-to-end exercise of the command-line interface at smoke scale.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vfmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfmf"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn vfmf")
}

const SMOKE: &[&str] = &[
    "--set", "world.num_scenes=6",
    "--set", "world.frames=8",
    "--set", "world.branches=4",
    "--set", "world.train_frac=0.5",
    "--set", "world.val_frac=0.25",
    "--set", "world.test_frac=0.25",
    "--set", "vae.epochs=2",
    "--set", "probe.epochs=2",
    "--set", "flow.width=32",
    "--set", "flow.depth=1",
    "--set", "flow.heads=2",
    "--set", "flow.steps=15",
    "--set", "regression.width=32",
    "--set", "regression.depth=1",
    "--set", "regression.heads=2",
    "--set", "regression.steps=15",
    "--set", "eval.scenes=1",
    "--set", "eval.k=2",
    "--set", "eval.k_context1=2",
    "--set", "eval.contexts=1,2",
    "--set", "spectral.samples=4",
    "--set", "workers=1",
];

fn run_ok(dir: &Path, subcommand: &str, extra: &[&str]) {
    let mut args = vec![subcommand];
    args.extend_from_slice(SMOKE);
    args.extend_from_slice(extra);
    let out = vfmf(dir, &args);
    assert!(
        out.status.success(),
        "{subcommand} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn cli_smoke_pipeline_end_to_end() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-smoke");
    let _ = std::fs::remove_dir_all(&dir);

    run_ok(&dir, "gen-data", &[]);
    assert!(dir.join("dataset/index.txt").exists());
    assert!(dir.join("manifest-gen-data.txt").exists());
    assert!(dir.join("config.txt").exists(), "resolved config echo");

    run_ok(&dir, "train-vae", &[]);
    run_ok(&dir, "fit-pca", &[]);
    for task in ["segmentation", "depth"] {
        for space in ["direct", "vae", "pca"] {
            run_ok(
                &dir,
                "train-probe",
                &["--set", &format!("probe.task={task}"), "--set", &format!("probe.space={space}")],
            );
            assert!(dir.join(format!("probe-{task}-{space}.bin")).exists());
        }
    }
    run_ok(&dir, "train-flow", &[]);
    run_ok(&dir, "train-regression", &[]);

    run_ok(&dir, "evaluate", &["--set", "eval.method=flow"]);
    run_ok(&dir, "evaluate", &["--set", "eval.method=regression", "--set", "eval.space=direct"]);
    run_ok(&dir, "evaluate", &["--set", "eval.method=fidelity"]);
    let csv = std::fs::read_to_string(dir.join("reports-flow.csv")).expect("flow csv");
    assert!(csv.starts_with(
        "method,space,context,horizon,protocol,k,miou_all,miou_mov,d1,absrel,num_scenes,seed\n"
    ));

    run_ok(&dir, "rollout", &[]);
    let rollouts: Vec<_> = std::fs::read_dir(dir.join("rollout"))
        .expect("rollout dir")
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".ppm"))
        .collect();
    assert!(!rollouts.is_empty(), "rollout dumps PPM frames");

    run_ok(&dir, "spectrum", &["--set", "spectral.source=features"]);
    assert!(dir.join("spectrum-features.csv").exists());
    assert!(dir.join("spectrum-features.svg").exists());

    run_ok(&dir, "report", &[]);
    let table = std::fs::read_to_string(dir.join("report.txt")).expect("report");
    assert!(table.contains("flow") && table.contains("regression"));
}

#[test]
fn cli_missing_artifact_names_the_path() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-missing");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let mut args = vec!["evaluate"];
    args.extend_from_slice(SMOKE);
    let out = vfmf(&dir, &args);
    assert!(!out.status.success(), "evaluate without artifacts must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let expected = dir.join("dataset").join("index.txt");
    assert!(
        stderr.contains("missing artifact") && stderr.contains(&expected.display().to_string()),
        "stderr should name the missing path, got: {stderr}"
    );
}

#[test]
fn cli_out_env_var_is_honored() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-env-out");
    let _ = std::fs::remove_dir_all(&dir);
    let mut args = vec!["gen-data"];
    args.extend_from_slice(SMOKE);
    let out = Command::new(env!("CARGO_BIN_EXE_vfmf"))
        .env("VFMF_OUT", &dir)
        .args(&args)
        .output()
        .expect("spawn vfmf");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("dataset/index.txt").exists());
}
