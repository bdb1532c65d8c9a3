//! The four command implementations.

use std::fs;
use std::path::Path;

use meg_enum_core::calibrate::{self, CalibrationGrid};
use meg_enum_core::enumerate::{
    aic_estimate, eigen_spectrum, mdl_estimate, sequential_estimate, sequential_estimate_nominal,
    SequentialConfig, ThresholdTable,
};
use meg_enum_core::io::{self, KeyValueFile};
use meg_enum_core::localize::{ApScanner, OrientationMode};
use meg_enum_core::phantom::{self, PhantomSpec};
use meg_enum_core::seed;
use meg_enum_core::simulate::{run_scenario, CorrelationSpec, ScenarioSpec};
use meg_enum_core::whiten;
use meg_enum_core::world::{World, WorldConfig};
use meg_enum_core::{Error, Vec3};
use rayon::prelude::*;
use serde_json::json;

use crate::manifest::OutputWriter;
use crate::{
    usage, CalibrateArgs, CmdResult, CompareArgs, ComparePreset, EnumerateArgs, Method, Preset,
    SimulateArgs, WithPhase,
};

/// Fraction of Monte Carlo repetitions that must succeed for exit code 0.
const SUCCESS_FLOOR: f64 = 0.9;

fn read(path: &Path) -> meg_enum_core::Result<String> {
    fs::read_to_string(path).map_err(Error::from)
}

/// The experiment world shared by all presets; `paper` changes repetition
/// counts elsewhere, not the desk-scale geometry.
fn build_world(_preset: Option<Preset>) -> meg_enum_core::Result<World> {
    World::build(&WorldConfig::default())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate(args: SimulateArgs) -> CmdResult<()> {
    let config_path = args
        .common
        .config
        .as_ref()
        .ok_or_else(|| usage("simulate needs --config <scenario file>"))?;
    let mut config = io::scenario_from_text(&read(config_path).config()?).config()?;
    if let Some(seed) = args.common.seed {
        config.spec.seed = seed;
    }
    let world = build_world(args.preset).compute()?;
    if config.spec.q_true >= world.sensors.len() {
        return Err(usage(format!(
            "config asks for {} sources, but the model requires fewer sources than the {} sensors",
            config.spec.q_true,
            world.sensors.len()
        )));
    }
    let (measurement, truth) = run_scenario(&config.spec, &world.sim, &world.recon).compute()?;

    let locations: Vec<[f64; 3]> = truth
        .point_indices
        .iter()
        .map(|&i| {
            let p = world.sim.grid().points()[i];
            [p.x, p.y, p.z]
        })
        .collect();
    let truth_json = json!({
        "q_true": config.spec.q_true,
        "seed": config.spec.seed,
        "point_indices": truth.point_indices,
        "locations_m": locations,
        "orientations": truth.orientations.iter().map(|o| [o.x, o.y, o.z]).collect::<Vec<_>>(),
    });

    let mut out = OutputWriter::new(&args.common.out).data()?;
    out.write("data.txt", &io::measurement_to_text(&measurement)).data()?;
    out.write("truth.json", &pretty(&truth_json).config()?).data()?;
    let snapshot = json!({ "scenario": io::scenario_to_text(&config).config()? });
    out.finish("simulate", snapshot, config.spec.seed).data()?;
    println!("simulated q_true = {} ({} sensors x {} samples)",
        config.spec.q_true, measurement.m(), measurement.n());
    Ok(())
}

fn pretty(v: &serde_json::Value) -> meg_enum_core::Result<String> {
    serde_json::to_string_pretty(v)
        .map_err(|e| Error::InvalidInput(format!("report serialization failed: {e}")))
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn grid_snapshot(g: &CalibrationGrid) -> serde_json::Value {
    json!({
        "snr_levels_db": g.snr_levels_db,
        "q_levels": g.q_levels,
        "rho_levels": g.rho_levels,
        "model_errors_mm": g.model_errors_mm.iter().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>(),
        "reps": g.reps,
        "n_samples": g.n_samples,
        "threshold_sweep": g.threshold_sweep,
        "base_seed": g.base_seed,
        "orientation_mode": g.orientation_mode.to_string(),
        "k_max": g.k_max,
    })
}

pub fn calibrate(args: CalibrateArgs) -> CmdResult<i32> {
    let preset_grid = args.preset.map(|p| match p {
        Preset::Desk => CalibrationGrid::desk(0),
        Preset::Paper => CalibrationGrid::default(),
    });
    let mut grid = match (&args.common.config, preset_grid) {
        (Some(path), preset) => {
            io::calibration_grid_from_text(&read(path).config()?, preset).config()?
        }
        (None, Some(grid)) => grid,
        (None, None) => return Err(usage("calibrate needs --config and/or --preset desk|paper")),
    };
    if let Some(seed) = args.common.seed {
        grid.base_seed = seed;
    }
    let world = build_world(args.preset).compute()?;
    let outcome = calibrate::calibrate(&grid, &world).compute()?;

    let mut out = OutputWriter::new(&args.common.out).data()?;
    out.write(
        "thresholds.csv",
        &io::calibrated_table_to_csv(&outcome.table, &outcome.cells).compute()?,
    )
    .data()?;
    out.write("curves.csv", &io::curves_to_csv(&outcome.curves)).data()?;
    out.finish("calibrate", grid_snapshot(&grid), grid.base_seed).data()?;

    let succeeded = outcome.attempted - outcome.failed;
    let rate = succeeded as f64 / outcome.attempted.max(1) as f64;
    println!(
        "calibrated {} cells: {succeeded}/{} repetitions succeeded",
        outcome.cells.len(),
        outcome.attempted
    );
    if rate >= SUCCESS_FLOOR {
        Ok(0)
    } else {
        eprintln!(
            "error: only {:.1}% of repetitions succeeded (need {:.0}%)",
            rate * 100.0,
            SUCCESS_FLOOR * 100.0
        );
        Ok(3)
    }
}

// ---------------------------------------------------------------------------
// enumerate
// ---------------------------------------------------------------------------

pub fn enumerate(args: EnumerateArgs) -> CmdResult<()> {
    let mode: OrientationMode = args.mode.parse().config()?;
    let raw = read(&args.data).data()?;
    let (y, sampling_rate_hz, estimated_snr_db) = if args.whiten {
        let trials = io::trials_from_text(&raw, args.sampling_rate_hz).data()?;
        let wa = whiten::whiten_pipeline(&trials, 6, 0.1).compute()?;
        (wa.data, wa.sampling_rate_hz, Some(wa.snr_db))
    } else {
        let ms = io::measurement_from_text(&raw).data()?;
        (ms.data, ms.sampling_rate_hz, None)
    };
    let snr_db = args.snr_db.or(estimated_snr_db);

    let world = build_world(args.preset).compute()?;
    let scanner = ApScanner::new(&world.recon, mode).compute()?;
    let session = scanner.session(&y).data()?;
    let cfg = SequentialConfig::default();

    let mut methods = args.method.clone();
    methods.dedup();
    let needs_spectrum = methods.iter().any(|m| matches!(m, Method::Aic | Method::Mdl));
    let spectrum = needs_spectrum.then(|| eigen_spectrum(&y));

    let mut report_methods = serde_json::Map::new();
    for method in methods {
        match method {
            Method::Fratio => {
                let path = args
                    .thresholds
                    .as_ref()
                    .ok_or_else(|| usage("--method fratio needs --thresholds <csv>"))?;
                let table = io::threshold_table_from_csv(&read(path).data()?).data()?;
                let snr = snr_db.ok_or_else(|| {
                    usage("provide --snr-db, or --whiten so the pipeline can estimate it")
                })?;
                let result = sequential_estimate(&session, &cfg, &table, snr).compute()?;
                println!("fratio: q_hat = {}{}", result.q_hat, saturated_note(&result.saturated));
                report_methods.insert("fratio".into(), report_value(&result).compute()?);
            }
            Method::Nominal => {
                let result = sequential_estimate_nominal(&session, &cfg, args.alpha).compute()?;
                println!("nominal: q_hat = {}{}", result.q_hat, saturated_note(&result.saturated));
                report_methods.insert("nominal".into(), report_value(&result).compute()?);
            }
            Method::Aic => {
                let q = aic_estimate(spectrum.as_ref().unwrap(), y.ncols()).compute()?;
                println!("aic: q_hat = {q}");
                report_methods.insert("aic".into(), json!({ "q_hat": q }));
            }
            Method::Mdl => {
                let q = mdl_estimate(spectrum.as_ref().unwrap(), y.ncols()).compute()?;
                println!("mdl: q_hat = {q}");
                report_methods.insert("mdl".into(), json!({ "q_hat": q }));
            }
        }
    }

    let report = json!({
        "snr_db": snr_db,
        "mode": mode.to_string(),
        "whitened": args.whiten,
        "sampling_rate_hz": sampling_rate_hz,
        "methods": report_methods,
    });
    let mut out = OutputWriter::new(&args.common.out).data()?;
    out.write("report.json", &pretty(&report).compute()?).data()?;
    let snapshot = json!({
        "data": args.data.display().to_string(),
        "mode": mode.to_string(),
        "whiten": args.whiten,
        "snr_db": snr_db,
        "alpha": args.alpha,
    });
    out.finish("enumerate", snapshot, args.common.seed.unwrap_or(0)).data()?;
    Ok(())
}

fn saturated_note(saturated: &bool) -> &'static str {
    if *saturated {
        " (saturated: a lower bound)"
    } else {
        ""
    }
}

fn report_value(result: &meg_enum_core::enumerate::EnumerationResult) -> meg_enum_core::Result<serde_json::Value> {
    let text = io::enumeration_report_json(result)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("report serialization failed: {e}")))
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// One scored repetition; rows render as `results.csv` lines.
struct ResultRow {
    seed: u64,
    q_true: usize,
    rho: f64,
    snr_db: f64,
    err_mm: Vec3,
    q_fratio: usize,
    q_aic: usize,
    q_mdl: usize,
}

fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(
        "run_id,seed,q_true,rho,snr_db,err_x_mm,err_y_mm,err_z_mm,q_hat_fratio,q_hat_aic,q_hat_mdl\n",
    );
    for (run_id, r) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{run_id},{},{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.q_true,
            r.rho,
            r.snr_db,
            r.err_mm.x,
            r.err_mm.y,
            r.err_mm.z,
            r.q_fratio,
            r.q_aic,
            r.q_mdl
        ));
    }
    s
}

/// Per-(snr, q) exact-match accuracy of each method, in first-seen order.
fn summary_csv(rows: &[ResultRow]) -> String {
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        if !cells.iter().any(|c| c.0 == r.snr_db && c.1 == r.q_true) {
            cells.push((r.snr_db, r.q_true));
        }
    }
    let mut s = String::from("snr_db,q_true,reps,accuracy_fratio,accuracy_aic,accuracy_mdl\n");
    for (snr, q) in cells {
        let members: Vec<&ResultRow> =
            rows.iter().filter(|r| r.snr_db == snr && r.q_true == q).collect();
        let n = members.len() as f64;
        let acc = |f: &dyn Fn(&ResultRow) -> usize| {
            members.iter().filter(|r| f(r) == q).count() as f64 / n
        };
        s.push_str(&format!(
            "{snr},{q},{},{},{},{}\n",
            members.len(),
            acc(&|r| r.q_fratio),
            acc(&|r| r.q_aic),
            acc(&|r| r.q_mdl)
        ));
    }
    s
}

/// Monte Carlo grid for the standard compare campaign.
struct CompareConfig {
    snr_levels_db: Vec<f64>,
    q_levels: Vec<usize>,
    rho_levels: Vec<f64>,
    model_errors_mm: Vec<Vec3>,
    reps: usize,
    n_samples: usize,
    orientation_mode: OrientationMode,
    base_seed: u64,
}

impl CompareConfig {
    fn preset(reps: usize) -> CompareConfig {
        CompareConfig {
            snr_levels_db: vec![0.0],
            q_levels: vec![1, 2, 3, 4, 5],
            rho_levels: vec![0.9],
            model_errors_mm: vec![Vec3::new(1.0, 0.0, 0.0)],
            reps,
            n_samples: 100,
            orientation_mode: OrientationMode::Fixed,
            base_seed: 0,
        }
    }

    fn apply(&mut self, text: &str) -> meg_enum_core::Result<()> {
        let mut kv = KeyValueFile::parse(text)?;
        if let Some(v) = kv.numbers::<f64>("snr_levels_db", "a number")? {
            self.snr_levels_db = v;
        }
        if let Some(v) = kv.numbers::<usize>("q_levels", "a non-negative integer")? {
            self.q_levels = v;
        }
        if let Some(v) = kv.numbers::<f64>("rho_levels", "a number")? {
            self.rho_levels = v;
        }
        if let Some(v) = kv.numbers::<f64>("model_errors_mm", "a number")? {
            if v.is_empty() || v.len() % 3 != 0 {
                return Err(Error::InvalidInput(format!(
                    "model_errors_mm lists x y z triples; got {} numbers",
                    v.len()
                )));
            }
            self.model_errors_mm = v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        }
        self.reps = kv.one("reps", "a positive integer", self.reps)?;
        self.n_samples = kv.one("n_samples", "a positive integer", self.n_samples)?;
        self.orientation_mode = kv.mode("orientation_mode", self.orientation_mode)?;
        self.base_seed = kv.one("base_seed", "an unsigned integer", self.base_seed)?;
        kv.finish()
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "snr_levels_db": self.snr_levels_db,
            "q_levels": self.q_levels,
            "rho_levels": self.rho_levels,
            "model_errors_mm": self.model_errors_mm.iter().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>(),
            "reps": self.reps,
            "n_samples": self.n_samples,
            "orientation_mode": self.orientation_mode.to_string(),
            "base_seed": self.base_seed,
        })
    }
}

pub fn compare(args: CompareArgs) -> CmdResult<i32> {
    let table = io::threshold_table_from_csv(&read(&args.thresholds).data()?).data()?;
    let world = build_world(None).compute()?;
    let cfg = SequentialConfig::default();

    let (rows, attempted, failed, snapshot) = match args.preset {
        ComparePreset::Phantom => compare_phantom(&args, &table, &world, &cfg)?,
        ComparePreset::Desk => compare_grid(&args, &table, &world, &cfg, 50)?,
        ComparePreset::Paper => compare_grid(&args, &table, &world, &cfg, 100)?,
    };

    let base_seed = snapshot["base_seed"].as_u64().unwrap_or(0);
    let mut out = OutputWriter::new(&args.common.out).data()?;
    out.write("results.csv", &results_csv(&rows)).data()?;
    out.write("summary.csv", &summary_csv(&rows)).data()?;
    out.finish("compare", snapshot, base_seed).data()?;

    let succeeded = attempted - failed;
    println!("compared 3 methods on {succeeded}/{attempted} repetitions");
    print!("{}", summary_csv(&rows));
    if succeeded as f64 / attempted.max(1) as f64 >= SUCCESS_FLOOR {
        Ok(0)
    } else {
        eprintln!("error: more than {:.0}% of repetitions failed", (1.0 - SUCCESS_FLOOR) * 100.0);
        Ok(3)
    }
}

type CampaignOutcome = (Vec<ResultRow>, usize, usize, serde_json::Value);

fn compare_grid(
    args: &CompareArgs,
    table: &ThresholdTable,
    world: &World,
    cfg: &SequentialConfig,
    preset_reps: usize,
) -> CmdResult<CampaignOutcome> {
    let mut config = CompareConfig::preset(preset_reps);
    if let Some(path) = &args.common.config {
        config.apply(&read(path).config()?).config()?;
    }
    if let Some(seed) = args.common.seed {
        config.base_seed = seed;
    }
    if config.q_levels.is_empty() || config.snr_levels_db.is_empty() || config.reps == 0 {
        return Err(usage("compare needs at least one SNR level, one count, and one repetition"));
    }

    let scanners = config
        .model_errors_mm
        .iter()
        .map(|err| {
            let lfs = world.recon_variant(*err)?;
            ApScanner::new(&lfs, config.orientation_mode)
        })
        .collect::<meg_enum_core::Result<Vec<_>>>()
        .compute()?;

    let mut rows = Vec::new();
    let mut attempted = 0usize;
    let mut failed = 0usize;
    for (snr_i, &snr_db) in config.snr_levels_db.iter().enumerate() {
        for (q_i, &q_true) in config.q_levels.iter().enumerate() {
            for (rho_i, &rho) in config.rho_levels.iter().enumerate() {
                for (err_i, scanner) in scanners.iter().enumerate() {
                    let err_mm = config.model_errors_mm[err_i];
                    let outcomes: Vec<meg_enum_core::Result<ResultRow>> = (0..config.reps)
                        .into_par_iter()
                        .map(|rep| {
                            let rep_seed = seed::derive_path(
                                config.base_seed,
                                &[snr_i as u64, q_i as u64, rho_i as u64, err_i as u64, rep as u64],
                            );
                            let spec = ScenarioSpec {
                                q_true,
                                n_samples: config.n_samples,
                                snr_db,
                                correlation: CorrelationSpec::Uniform(rho),
                                freq_range_hz: (10.0, 30.0),
                                sampling_rate_hz: 1_000.0,
                                orientation_mode: config.orientation_mode,
                                delay_range_ms: None,
                                seed: rep_seed,
                            };
                            let (ms, _) = run_scenario(&spec, &world.sim, &world.recon)?;
                            score_rep(&ms.data, scanner, cfg, table, snr_db, rho, err_mm, q_true, rep_seed)
                        })
                        .collect();
                    attempted += config.reps;
                    for (rep, outcome) in outcomes.into_iter().enumerate() {
                        match outcome {
                            Ok(row) => rows.push(row),
                            Err(e) => {
                                failed += 1;
                                log::warn!(
                                    "compare rep failed (snr={snr_db} dB, q={q_true}, rho={rho}, rep={rep}): {e}"
                                );
                            }
                        }
                    }
                }
            }
            log::info!("compared cell snr={snr_db} dB q={q_true}");
        }
    }
    let snapshot = config.snapshot();
    Ok((rows, attempted, failed, snapshot))
}

#[allow(clippy::too_many_arguments)]
fn score_rep(
    y: &meg_enum_core::Mat,
    scanner: &ApScanner,
    cfg: &SequentialConfig,
    table: &ThresholdTable,
    snr_db: f64,
    rho: f64,
    err_mm: Vec3,
    q_true: usize,
    rep_seed: u64,
) -> meg_enum_core::Result<ResultRow> {
    let session = scanner.session(y)?;
    let q_fratio = sequential_estimate(&session, cfg, table, snr_db)?.q_hat;
    let eigs = eigen_spectrum(y);
    let q_aic = aic_estimate(&eigs, y.ncols())?;
    let q_mdl = mdl_estimate(&eigs, y.ncols())?;
    Ok(ResultRow { seed: rep_seed, q_true, rho, snr_db, err_mm, q_fratio, q_aic, q_mdl })
}

fn compare_phantom(
    args: &CompareArgs,
    table: &ThresholdTable,
    world: &World,
    cfg: &SequentialConfig,
) -> CmdResult<CampaignOutcome> {
    let mut q_levels: Vec<usize> = vec![0, 1, 2, 3, 4, 5];
    let mut reps = 100usize;
    let mut base_seed = 0u64;
    if let Some(path) = &args.common.config {
        let mut kv = KeyValueFile::parse(&read(path).config()?).config()?;
        if let Some(v) = kv.numbers::<usize>("q_levels", "a non-negative integer").config()? {
            q_levels = v;
        }
        reps = kv.one("reps", "a positive integer", reps).config()?;
        base_seed = kv.one("base_seed", "an unsigned integer", base_seed).config()?;
        kv.finish().config()?;
    }
    if let Some(seed) = args.common.seed {
        base_seed = seed;
    }
    if q_levels.is_empty() || reps == 0 {
        return Err(usage("phantom compare needs at least one count level and one repetition"));
    }

    let spec = PhantomSpec::default();
    let dipoles = phantom::dipole_fields(&spec, world).compute()?;
    let scanner = ApScanner::new(&world.recon, OrientationMode::Free).compute()?;

    let mut rows = Vec::new();
    let mut attempted = 0usize;
    let mut failed = 0usize;
    for &q in &q_levels {
        let outcomes: Vec<meg_enum_core::Result<ResultRow>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = seed::derive_path(base_seed, &[q as u64, rep as u64]);
                let (ms, _) = phantom::simulate_rep(&spec, &dipoles, q, rep_seed)?;
                score_rep(&ms.data, &scanner, cfg, table, spec.snr_db, 0.0, Vec3::zeros(), q, rep_seed)
            })
            .collect();
        attempted += reps;
        for (rep, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(row) => rows.push(row),
                Err(e) => {
                    failed += 1;
                    log::warn!("phantom compare rep failed (q={q}, rep={rep}): {e}");
                }
            }
        }
        log::info!("compared phantom level q={q}");
    }
    let snapshot = json!({
        "preset": "phantom",
        "q_levels": q_levels,
        "reps": reps,
        "base_seed": base_seed,
        "snr_db": spec.snr_db,
        "dipoles": spec.dipole_count(),
    });
    Ok((rows, attempted, failed, snapshot))
}
