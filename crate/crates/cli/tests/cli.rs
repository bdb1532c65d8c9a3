//! End-to-end tests of the `meg-enum` binary: exit codes, output files,
//! manifest digests, and determinism under repeated invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use meg_enum_core::io;
use meg_enum_core::simulate::{add_noise_at_snr, gen_waveforms};
use meg_enum_core::whiten::TrialSet;
use meg_enum_core::world::{World, WorldConfig};
use meg_enum_core::Mat;

fn run(args: &[&str], dir: &Path) -> (i32, String, String) {
    run_env(args, dir, &[])
}

fn run_env(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_meg-enum"));
    cmd.args(args).current_dir(dir).env_remove("MEG_ENUM_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary should run");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).expect("test file written");
    path
}

/// A threshold table with one SNR bin covering model orders 0..5.
fn flat_table(dir: &Path, value: f64) -> PathBuf {
    let mut s = String::from("snr_db,k_reduced,threshold\n");
    for k in 0..6 {
        s.push_str(&format!("0,{k},{value}\n"));
    }
    write(dir, "flat.csv", &s)
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("manifest.json")).expect("manifest exists");
    serde_json::from_str(&text).expect("manifest is json")
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[test]
fn simulate_writes_three_files_and_repeats_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "scen.txt", "q_true = 2\nsnr_db = 40\nrho = 0.5\nseed = 7\n");

    let (code, stdout, _) =
        run(&["simulate", "--config", "scen.txt", "--out", "a"], dir);
    assert_eq!(code, 0);
    assert!(stdout.contains("q_true = 2"), "stdout: {stdout}");
    for name in ["data.txt", "truth.json", "manifest.json"] {
        assert!(dir.join("a").join(name).is_file(), "missing {name}");
    }

    let (code, _, _) = run(&["simulate", "--config", "scen.txt", "--out", "b"], dir);
    assert_eq!(code, 0);
    let da = fs::read(dir.join("a/data.txt")).unwrap();
    let db = fs::read(dir.join("b/data.txt")).unwrap();
    assert_eq!(da, db, "same config and seed must reproduce the data file");
    assert_eq!(manifest(&dir.join("a"))["outputs"], manifest(&dir.join("b"))["outputs"]);

    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("a/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["q_true"], 2);
    assert_eq!(truth["locations_m"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "scen.txt", "q_true = 1\nseed = 7\n");
    let (code, _, _) =
        run(&["simulate", "--config", "scen.txt", "--seed", "9", "--out", "a"], dir);
    assert_eq!(code, 0);
    let m = manifest(&dir.join("a"));
    assert_eq!(m["base_seed"], 9);
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("a/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["seed"], 9);
}

#[test]
fn simulate_rejects_more_sources_than_the_array_supports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "scen.txt", "q_true = 500\n");
    let (code, _, stderr) = run(&["simulate", "--config", "scen.txt"], dir);
    assert_eq!(code, 1);
    assert!(stderr.contains("sensors"), "stderr: {stderr}");
}

#[test]
fn simulate_without_a_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, stderr) = run(&["simulate"], tmp.path());
    assert_eq!(code, 1);
    assert!(stderr.contains("--config"), "stderr: {stderr}");
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[test]
fn calibrate_writes_thresholds_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "cal.txt",
        "snr_levels_db = 0\nq_levels = 1\nrho_levels = 0.5\nmodel_errors_mm = 1 0 0\n\
         reps = 2\nn_samples = 60\nthreshold_lo = 1.0\nthreshold_hi = 1.4\n\
         threshold_points = 10\nbase_seed = 1\n",
    );
    let (code, stdout, _) = run(&["calibrate", "--config", "cal.txt", "--out", "c"], dir);
    assert_eq!(code, 0);
    assert!(stdout.contains("2/2 repetitions succeeded"), "stdout: {stdout}");

    let thresholds = fs::read_to_string(dir.join("c/thresholds.csv")).unwrap();
    let mut lines = thresholds.lines();
    assert_eq!(lines.next(), Some("snr_db,k_reduced,threshold,mean_accuracy"));
    // One calibrated order plus the downward fill to order zero.
    assert_eq!(lines.count(), 2);

    let curves = fs::read_to_string(dir.join("c/curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("snr_db,q_true,threshold,accuracy"));
    assert_eq!(curves.lines().count(), 11, "10 sweep points under one header");
    assert_eq!(manifest(&dir.join("c"))["command"], "calibrate");
}

#[test]
fn calibrate_without_sweep_bounds_names_the_missing_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "cal.txt", "snr_levels_db = 0\nq_levels = 1\nreps = 2\n");
    let (code, _, stderr) = run(&["calibrate", "--config", "cal.txt"], dir);
    assert_eq!(code, 1);
    assert!(stderr.contains("threshold_lo"), "stderr: {stderr}");
}

#[test]
fn calibrate_needs_a_config_or_a_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, stderr) = run(&["calibrate"], tmp.path());
    assert_eq!(code, 1);
    assert!(stderr.contains("--config") || stderr.contains("preset"), "stderr: {stderr}");
}

// ---------------------------------------------------------------------------
// enumerate
// ---------------------------------------------------------------------------

/// Noise-free mixture of two reconstruction-grid topographies: the scan can
/// fit it exactly, so the count decision is deterministic.
fn on_grid_measurement(dir: &Path) -> PathBuf {
    let world = World::build(&WorldConfig::default()).unwrap();
    let g_a = world.recon.fixed_topography(100).unwrap();
    let g_b = world.recon.fixed_topography(2600).unwrap();
    let waves = gen_waveforms(2, 100, (10.0, 30.0), 1_000.0, 11).unwrap();
    let m = g_a.len();
    let mut y = Mat::zeros(m, 100);
    for t in 0..100 {
        for s in 0..m {
            y[(s, t)] = g_a[s] * waves[(0, t)] + g_b[s] * waves[(1, t)];
        }
    }
    let ms = meg_enum_core::simulate::MeasurementSet {
        data: y,
        sampling_rate_hz: 1_000.0,
        noise_sigma: 0.0,
        clean: None,
    };
    write(dir, "clean.txt", &io::measurement_to_text(&ms))
}

#[test]
fn enumerate_recovers_the_count_on_clean_on_grid_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    on_grid_measurement(dir);
    flat_table(dir, 1.5);
    let (code, stdout, _) = run(
        &[
            "enumerate", "--data", "clean.txt", "--thresholds", "flat.csv",
            "--method", "fratio,aic,mdl", "--snr-db", "0", "--out", "e",
        ],
        dir,
    );
    assert_eq!(code, 0);
    assert!(stdout.contains("fratio: q_hat = 2"), "stdout: {stdout}");

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["methods"]["fratio"]["q_hat"], 2);
    assert!(report["methods"]["aic"]["q_hat"].is_u64());
    assert!(report["methods"]["mdl"]["q_hat"].is_u64());
    assert_eq!(report["whitened"], false);
    assert_eq!(report["snr_db"], 0.0);
}

#[test]
fn enumerate_whitens_trials_and_estimates_the_snr() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let world = World::build(&WorldConfig::default()).unwrap();
    let g = world.recon.fixed_topography(1500).unwrap();
    let waves = gen_waveforms(1, 100, (10.0, 30.0), 1_000.0, 3).unwrap();
    let m = g.len();
    let mut clean = Mat::zeros(m, 200);
    for t in 0..100 {
        for s in 0..m {
            clean[(s, t + 100)] = g[s] * waves[(0, t)];
        }
    }
    let trials: Vec<Mat> = (0..20)
        .map(|t| add_noise_at_snr(&clean, -5.0, 1_000.0, 100 + t).unwrap().data)
        .collect();
    let set = TrialSet { trials, baseline_samples: 100, sampling_rate_hz: 1_000.0 };
    write(dir, "trials.txt", &io::trials_to_text(&set));

    let (code, stdout, stderr) = run(
        &["enumerate", "--data", "trials.txt", "--whiten", "--method", "nominal", "--out", "w"],
        dir,
    );
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("nominal: q_hat = "), "stdout: {stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("w/report.json")).unwrap()).unwrap();
    assert_eq!(report["whitened"], true);
    assert!(report["snr_db"].is_f64(), "whitening estimates the SNR");
}

#[test]
fn enumerate_fratio_without_snr_or_whiten_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    on_grid_measurement(dir);
    flat_table(dir, 1.5);
    let (code, _, stderr) =
        run(&["enumerate", "--data", "clean.txt", "--thresholds", "flat.csv"], dir);
    assert_eq!(code, 1);
    assert!(stderr.contains("--snr-db"), "stderr: {stderr}");
}

#[test]
fn enumerate_names_the_missing_threshold_bin() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    on_grid_measurement(dir);
    // Coverage stops at order 1; the scan asks for more.
    write(dir, "short.csv", "snr_db,k_reduced,threshold\n0,0,1.5\n0,1,1.5\n");
    let (code, _, stderr) = run(
        &["enumerate", "--data", "clean.txt", "--thresholds", "short.csv", "--snr-db", "0"],
        dir,
    );
    assert_eq!(code, 3);
    assert!(stderr.contains("model order 2"), "stderr: {stderr}");
}

#[test]
fn enumerate_rejects_corrupt_data_with_a_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "bad.txt", "garbage\n");
    flat_table(dir, 1.5);
    let (code, _, stderr) = run(
        &["enumerate", "--data", "bad.txt", "--thresholds", "flat.csv", "--snr-db", "0"],
        dir,
    );
    assert_eq!(code, 2);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[test]
fn compare_writes_the_results_schema_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    flat_table(dir, 1.1);
    write(
        dir,
        "cmp.txt",
        "snr_levels_db = 0\nq_levels = 1 2\nrho_levels = 0.5\nreps = 2\n\
         n_samples = 60\nbase_seed = 3\n",
    );
    let args =
        ["compare", "--thresholds", "flat.csv", "--config", "cmp.txt", "--out", "r1"];
    let (code, stdout, stderr) = run(&args, dir);
    assert_eq!(code, 0, "stderr: {stderr}");
    assert!(stdout.contains("accuracy_fratio"), "stdout: {stdout}");

    let results = fs::read_to_string(dir.join("r1/results.csv")).unwrap();
    assert_eq!(
        results.lines().next(),
        Some(
            "run_id,seed,q_true,rho,snr_db,err_x_mm,err_y_mm,err_z_mm,\
             q_hat_fratio,q_hat_aic,q_hat_mdl"
        )
    );
    assert_eq!(results.lines().count(), 5, "header plus 2 cells x 2 reps");
    let summary = fs::read_to_string(dir.join("r1/summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next(),
        Some("snr_db,q_true,reps,accuracy_fratio,accuracy_aic,accuracy_mdl")
    );

    let mut args2 = args;
    args2[6] = "r2";
    let (code, _, _) = run(&args2, dir);
    assert_eq!(code, 0);
    assert_eq!(
        manifest(&dir.join("r1"))["outputs"],
        manifest(&dir.join("r2"))["outputs"],
        "same config and seed must reproduce the result digests"
    );
}

// ---------------------------------------------------------------------------
// global flags
// ---------------------------------------------------------------------------

#[test]
fn thread_cap_env_var_must_be_a_number() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "scen.txt", "q_true = 1\n");
    let (code, _, stderr) = run_env(
        &["simulate", "--config", "scen.txt"],
        dir,
        &[("MEG_ENUM_THREADS", "many")],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("MEG_ENUM_THREADS"), "stderr: {stderr}");

    let (code, _, stderr) = run_env(
        &["simulate", "--config", "scen.txt", "--out", "a"],
        dir,
        &[("MEG_ENUM_THREADS", "1")],
    );
    assert_eq!(code, 0, "stderr: {stderr}");
}

#[test]
fn unknown_subcommands_exit_with_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, _) = run(&["frobnicate"], tmp.path());
    assert_eq!(code, 1);
    let (code, stdout, _) = run(&["--help"], tmp.path());
    assert_eq!(code, 0);
    assert!(stdout.contains("simulate"), "help lists the commands");
}
