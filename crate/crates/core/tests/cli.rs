//! End-to-end tests of the command-line interface: every subcommand runs
//! as a real process, and failures map to the documented exit codes
//! (`2` configuration, `3` data, `1` numerical/check failures).

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bimamsleep"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Generate a small cohort under `dir/cohort` and return the manifest path.
fn gen_cohort(dir: &Path, seed: u64) -> std::path::PathBuf {
    let cohort = dir.join("cohort");
    let out = bin()
        .args(["gen-synthetic", "--subjects", "4", "--epochs", "24", "--seed"])
        .arg(seed.to_string())
        .arg("--out")
        .arg(&cohort)
        .output()
        .unwrap();
    assert!(out.status.success(), "gen-synthetic failed: {}", stderr(&out));
    cohort.join("manifest.csv")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "model_scale = \"toy\"\nbatch_size = 16\nmax_epochs = 2\nfolds = 2\nval_fraction = 0.34\nsmote = false\n",
    )
    .unwrap();
    path
}

#[test]
fn synthetic_cohort_lands_as_epb_files_plus_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_cohort(dir.path(), 5);
    assert!(manifest.exists());
    let cohort = manifest.parent().unwrap();
    for i in 0..4 {
        let epb = cohort.join(format!("S00{i}.epb"));
        let bytes = std::fs::read(&epb).unwrap();
        assert_eq!(&bytes[..4], b"EPB1", "{} must start with the EPB magic", epb.display());
    }
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with("path,subject_id\n"));
    assert_eq!(text.lines().count(), 5, "header plus one row per subject");
}

#[test]
fn seed_flag_beats_the_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env_seed: Option<&str>, flag_seed: Option<&str>| {
        let cohort = dir.path().join(name);
        let mut cmd = bin();
        cmd.args(["gen-synthetic", "--subjects", "2", "--epochs", "6"])
            .arg("--out")
            .arg(&cohort)
            .env_remove("BIMAMSLEEP_SEED");
        if let Some(s) = env_seed {
            cmd.env("BIMAMSLEEP_SEED", s);
        }
        if let Some(s) = flag_seed {
            cmd.args(["--seed", s]);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{name}: {}", stderr(&out));
        std::fs::read(cohort.join("S000.epb")).unwrap()
    };
    let flag_wins = run("a", Some("999"), Some("5"));
    let flag_only = run("b", None, Some("5"));
    let env_only = run("c", Some("999"), None);
    assert_eq!(flag_wins, flag_only, "the --seed flag must override BIMAMSLEEP_SEED");
    assert_ne!(flag_only, env_only, "a different seed must change the data");

    // An unparseable environment seed is a configuration error.
    let out = bin()
        .args(["gen-synthetic", "--subjects", "1", "--epochs", "1"])
        .arg("--out")
        .arg(dir.path().join("d"))
        .env("BIMAMSLEEP_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "bad BIMAMSLEEP_SEED: {}", stderr(&out));
}

#[test]
fn train_then_evaluate_round_trips_through_saved_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_cohort(dir.path(), 5);
    let config = tiny_config(dir.path());
    let run_dir = dir.path().join("run");

    let out = bin()
        .args(["train", "--seed", "11"])
        .arg("--data")
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("resolved configuration:"), "missing config banner:\n{text}");
    assert!(text.contains("seed = 11"), "banner must show the resolved seed:\n{text}");
    assert!(text.contains("pooled cross-validation"), "missing pooled report:\n{text}");
    assert!(text.contains("ACC"), "missing summary metrics:\n{text}");
    for name in [
        "pooled_report.csv",
        "fold_0_report.csv",
        "fold_0_history.csv",
        "fold_0_model.json",
        "fold_1_model.json",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing after train");
    }

    let report = dir.path().join("eval.csv");
    let out = bin()
        .arg("evaluate")
        .arg("--model")
        .arg(run_dir.join("fold_0_model.json"))
        .arg("--data")
        .arg(&manifest)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "evaluate failed: {}", stderr(&out));
    assert!(stdout(&out).contains("evaluation"), "missing report:\n{}", stdout(&out));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("metric,class,value\n"));
    assert!(csv.contains("kappa_raw,overall,"));
}

#[test]
fn ablate_prints_the_four_variant_table() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_cohort(dir.path(), 5);
    let config = tiny_config(dir.path());
    let abl_dir = dir.path().join("abl");
    let out = bin()
        .args(["ablate", "--seed", "11"])
        .arg("--data")
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&abl_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "ablate failed: {}", stderr(&out));
    let text = stdout(&out);
    for variant in ["no_mamba", "forward_only", "backward_only", "bidirectional"] {
        assert!(text.contains(variant), "table missing {variant}:\n{text}");
        assert!(
            abl_dir.join(format!("ablation_{variant}_report.csv")).exists(),
            "missing per-variant report for {variant}"
        );
    }
    let summary = std::fs::read_to_string(abl_dir.join("ablation_summary.csv")).unwrap();
    assert!(summary.starts_with("variant,acc,mf1,kappa\n"));
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn scan_bench_reports_linear_scaling_on_small_lengths() {
    let out = bin()
        .args(["scan-bench", "--lengths", "256,512", "--d-model", "8", "--state", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "scan-bench failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("len    256"), "missing first timing:\n{text}");
    assert!(text.contains("time ratio"), "missing ratio line:\n{text}");
    assert!(text.contains("scales linearly"), "missing verdict:\n{text}");
}

#[test]
fn grad_check_passes_and_reports_every_group() {
    let out = bin()
        .args(["grad-check", "--tolerance", "1e-4", "--directions", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "grad-check failed: {}", stderr(&out));
    let text = stdout(&out);
    for group in ["conv1d", "ssm_scan", "afm_block", "model_end_to_end"] {
        assert!(text.contains(group), "report missing {group}:\n{text}");
    }
    assert!(text.contains("gradient checks passed"), "missing verdict:\n{text}");

    // An impossible tolerance must fail with the numerical exit code.
    let out = bin().args(["grad-check", "--tolerance", "1e-18"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
}

#[test]
fn failures_map_to_the_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_cohort(dir.path(), 5);

    // Missing data file: exit 3.
    let out = bin()
        .args(["train", "--data"])
        .arg(dir.path().join("missing.csv"))
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));

    // Malformed config: exit 2.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "batch_size = 0\n").unwrap();
    let out = bin()
        .args(["train", "--data"])
        .arg(&manifest)
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // Unknown flag: clap's own usage error, exit 2.
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // A file that is not a model: exit 2 (malformed model file).
    let out = bin()
        .arg("evaluate")
        .arg("--model")
        .arg(&manifest)
        .arg("--data")
        .arg(&manifest)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // Corrupt EPB payload referenced by a manifest: exit 3.
    let cohort = manifest.parent().unwrap();
    let victim = cohort.join("S000.epb");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&victim, bytes).unwrap();
    let out = bin()
        .args(["train", "--data"])
        .arg(&manifest)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}
