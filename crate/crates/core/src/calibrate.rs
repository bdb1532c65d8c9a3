//! Monte Carlo calibration of F-ratio thresholds over an (SNR, source-count)
//! grid.
//!
//! For every grid cell, scenarios are simulated across correlation levels and
//! small registration errors, the full F cascade is computed once per
//! repetition, and every candidate threshold is then replayed against the
//! stored cascades. The threshold with the highest mean exact-match accuracy
//! wins the cell; the winners form a threshold table keyed by (SNR bin,
//! reduced order) — the decisive comparison for a true count Q is the test at
//! reduced order Q, so each cell's optimum is filed under that order.
//!
//! Repetition seeds derive from the grid position `(snr index, q index, rho
//! index, error index, rep)`, making every sweep reproducible from its base
//! seed and every repetition independent of execution order.

use rayon::prelude::*;

use crate::enumerate::{
    decide_from_cascade, f_cascade, FCascade, SequentialConfig, ThresholdRow, ThresholdTable,
};
use crate::error::{Error, Result};
use crate::localize::{ApScanner, OrientationMode, DEFAULT_MAX_PASSES};
use crate::seed;
use crate::simulate::{run_scenario, CorrelationSpec, ScenarioSpec};
use crate::world::World;
use crate::Vec3;

/// Candidate thresholds: `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo, "degenerate sweep bounds");
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            (llo + f * (lhi - llo)).exp()
        })
        .collect()
}

/// The default candidate sweep: 40 log-spaced thresholds in [1.0, 1.5],
/// the decision-relevant region for large residual degrees of freedom.
pub fn default_sweep() -> Vec<f64> {
    log_spaced(1.0, 1.5, 40)
}

/// Full description of one calibration campaign.
#[derive(Debug, Clone)]
pub struct CalibrationGrid {
    /// SNR levels in dB; each becomes a bin of the threshold table.
    pub snr_levels_db: Vec<f64>,
    /// True source counts to calibrate, one table order per level.
    pub q_levels: Vec<usize>,
    /// Inter-source correlation levels averaged over.
    pub rho_levels: Vec<f64>,
    /// Registration errors (millimeters) averaged over.
    pub model_errors_mm: Vec<Vec3>,
    /// Repetitions per (cell, correlation, error) combination.
    pub reps: usize,
    /// Candidate thresholds, strictly increasing, at least 10.
    pub threshold_sweep: Vec<f64>,
    /// Master seed of the campaign.
    pub base_seed: u64,
    /// Time samples per scenario.
    pub n_samples: usize,
    /// Orientation mode of both simulation and fitting.
    pub orientation_mode: OrientationMode,
    /// Cascade depth; must exceed every calibrated source count.
    pub k_max: usize,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        CalibrationGrid {
            snr_levels_db: vec![-8.0, -4.0, 0.0, 4.0, 8.0],
            q_levels: vec![1, 2, 3, 4, 5],
            rho_levels: vec![0.1, 0.5, 0.9],
            model_errors_mm: vec![
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            reps: 100,
            threshold_sweep: default_sweep(),
            base_seed: 0,
            n_samples: 100,
            orientation_mode: OrientationMode::Fixed,
            k_max: 6,
        }
    }
}

impl CalibrationGrid {
    /// The desk-scale campaign: the default grid at 50 repetitions.
    pub fn desk(base_seed: u64) -> Self {
        CalibrationGrid {
            reps: 50,
            base_seed,
            ..CalibrationGrid::default()
        }
    }

    /// Checks the structural invariants of the grid.
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidInput("calibration needs at least one repetition".into()));
        }
        if self.threshold_sweep.len() < 10 {
            return Err(Error::InvalidInput(format!(
                "threshold sweep needs at least 10 points, got {}",
                self.threshold_sweep.len()
            )));
        }
        for w in self.threshold_sweep.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidInput(format!(
                    "threshold sweep must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if self.threshold_sweep[0] <= 0.0 {
            return Err(Error::InvalidInput("thresholds must be positive".into()));
        }
        if self.snr_levels_db.is_empty()
            || self.q_levels.is_empty()
            || self.rho_levels.is_empty()
            || self.model_errors_mm.is_empty()
        {
            return Err(Error::InvalidInput(
                "snr, q, rho, and model-error lists must all be non-empty".into(),
            ));
        }
        let q_top = *self.q_levels.iter().max().expect("non-empty q levels");
        if self.k_max <= q_top {
            return Err(Error::InvalidInput(format!(
                "cascade depth k_max = {} cannot decide for {} sources; needs at least {}",
                self.k_max,
                q_top,
                q_top + 1
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::InvalidInput("scenarios need at least 2 samples".into()));
        }
        Ok(())
    }

    /// Seed of one repetition, derived from its grid position.
    pub fn rep_seed(&self, snr_i: usize, q_i: usize, rho_i: usize, err_i: usize, rep: usize) -> u64 {
        seed::derive_path(
            self.base_seed,
            &[snr_i as u64, q_i as u64, rho_i as u64, err_i as u64, rep as u64],
        )
    }
}

/// Accuracy as a function of the candidate threshold, for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    /// SNR level of the cell in dB.
    pub snr_db: f64,
    /// True source count of the cell.
    pub q_true: usize,
    /// (threshold, mean exact-match accuracy) per candidate, ascending.
    pub points: Vec<(f64, f64)>,
    /// Repetitions attempted (correlations times errors times reps).
    pub attempted: usize,
    /// Repetitions whose simulation or fitting failed; excluded from means.
    pub failed: usize,
}

/// One calibrated cell: the winning threshold and its accuracy.
#[derive(Debug, Clone, Copy)]
pub struct CalibratedCell {
    /// SNR level in dB.
    pub snr_db: f64,
    /// True source count the cell was calibrated on.
    pub q_true: usize,
    /// Threshold with the highest mean accuracy (ties go upward).
    pub threshold: f64,
    /// That threshold's mean accuracy.
    pub mean_accuracy: f64,
}

/// A finished calibration: curves, per-cell winners, and the final table.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    /// One accuracy curve per (SNR, Q) cell.
    pub curves: Vec<AccuracyCurve>,
    /// The winning threshold per cell.
    pub cells: Vec<CalibratedCell>,
    /// Threshold table keyed by (SNR bin, reduced order).
    pub table: ThresholdTable,
    /// Total repetitions attempted.
    pub attempted: usize,
    /// Total repetitions that failed.
    pub failed: usize,
}

/// Exact-match fraction between estimates and truths.
pub fn accuracy(estimates: &[usize], truths: &[usize]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} estimates against {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty list is undefined".into()));
    }
    let hits = estimates.iter().zip(truths).filter(|(e, t)| e == t).count();
    Ok(hits as f64 / estimates.len() as f64)
}

/// Outcome of one repetition: which candidate thresholds got it right.
struct RepOutcome {
    hits: Vec<bool>,
    failed: bool,
}

/// Sweep every candidate threshold over every cell of the grid.
///
/// Each repetition simulates one scenario, computes its F cascade once, and
/// replays every candidate threshold against it (applied uniformly at every
/// sequential step). Failed repetitions are logged and excluded from the
/// accuracy denominators; they never abort the sweep.
pub fn sweep_thresholds(grid: &CalibrationGrid, world: &World) -> Result<Vec<AccuracyCurve>> {
    grid.validate()?;
    let scanners: Vec<ApScanner> = grid
        .model_errors_mm
        .iter()
        .map(|&err| {
            let lfs = world.recon_variant(err)?;
            ApScanner::new(&lfs, grid.orientation_mode)
        })
        .collect::<Result<_>>()?;
    let seq_cfg = SequentialConfig {
        k_max: grid.k_max,
        max_passes: DEFAULT_MAX_PASSES,
        perfect_fit_tol: crate::enumerate::PERFECT_FIT_TOL,
    };

    let mut curves = Vec::with_capacity(grid.snr_levels_db.len() * grid.q_levels.len());
    for (snr_i, &snr_db) in grid.snr_levels_db.iter().enumerate() {
        for (q_i, &q_true) in grid.q_levels.iter().enumerate() {
            // Every (rho, error, rep) combination of this cell, flattened so
            // the repetitions can run concurrently.
            let tasks: Vec<(usize, usize, usize)> = (0..grid.rho_levels.len())
                .flat_map(|rho_i| {
                    (0..grid.model_errors_mm.len()).flat_map(move |err_i| {
                        (0..grid.reps).map(move |rep| (rho_i, err_i, rep))
                    })
                })
                .collect();
            let outcomes: Vec<RepOutcome> = tasks
                .par_iter()
                .map(|&(rho_i, err_i, rep)| {
                    run_rep(grid, world, &scanners[err_i], &seq_cfg, snr_i, q_i, rho_i, err_i, rep)
                })
                .collect();

            let mut hits = vec![0usize; grid.threshold_sweep.len()];
            let mut failed = 0usize;
            for out in &outcomes {
                if out.failed {
                    failed += 1;
                    continue;
                }
                for (h, &ok) in hits.iter_mut().zip(&out.hits) {
                    *h += ok as usize;
                }
            }
            let attempted = tasks.len();
            let succeeded = attempted - failed;
            if succeeded == 0 {
                return Err(Error::Numerical(format!(
                    "every repetition of cell ({snr_db} dB, Q={q_true}) failed"
                )));
            }
            let points: Vec<(f64, f64)> = grid
                .threshold_sweep
                .iter()
                .zip(&hits)
                .map(|(&t, &h)| (t, h as f64 / succeeded as f64))
                .collect();
            let best = points.iter().map(|p| p.1).fold(0.0, f64::max);
            log::info!(
                "cell ({snr_db} dB, Q={q_true}): {succeeded}/{attempted} reps, best accuracy {best:.3}"
            );
            curves.push(AccuracyCurve {
                snr_db,
                q_true,
                points,
                attempted,
                failed,
            });
        }
    }
    Ok(curves)
}

#[allow(clippy::too_many_arguments)]
fn run_rep(
    grid: &CalibrationGrid,
    world: &World,
    scanner: &ApScanner,
    seq_cfg: &SequentialConfig,
    snr_i: usize,
    q_i: usize,
    rho_i: usize,
    err_i: usize,
    rep: usize,
) -> RepOutcome {
    let n_cand = grid.threshold_sweep.len();
    match try_rep(grid, world, scanner, seq_cfg, snr_i, q_i, rho_i, err_i, rep) {
        Ok(cascade) => {
            let q_true = grid.q_levels[q_i];
            let hits = grid
                .threshold_sweep
                .iter()
                .map(|&t| {
                    decide_from_cascade(&cascade, &mut |_| Ok(t))
                        .map(|r| r.q_hat == q_true)
                        .unwrap_or(false)
                })
                .collect();
            RepOutcome { hits, failed: false }
        }
        Err(e) => {
            log::warn!(
                "rep (snr {snr_i}, q {q_i}, rho {rho_i}, err {err_i}, rep {rep}) failed: {e}"
            );
            RepOutcome {
                hits: vec![false; n_cand],
                failed: true,
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn try_rep(
    grid: &CalibrationGrid,
    world: &World,
    scanner: &ApScanner,
    seq_cfg: &SequentialConfig,
    snr_i: usize,
    q_i: usize,
    rho_i: usize,
    err_i: usize,
    rep: usize,
) -> Result<FCascade> {
    let spec = ScenarioSpec {
        q_true: grid.q_levels[q_i],
        n_samples: grid.n_samples,
        snr_db: grid.snr_levels_db[snr_i],
        correlation: CorrelationSpec::Uniform(grid.rho_levels[rho_i]),
        freq_range_hz: (10.0, 30.0),
        sampling_rate_hz: 1000.0,
        orientation_mode: grid.orientation_mode,
        delay_range_ms: None,
        seed: grid.rep_seed(snr_i, q_i, rho_i, err_i, rep),
    };
    let (measurement, _) = run_scenario(&spec, &world.sim, &world.recon)?;
    let session = scanner.session(&measurement.data)?;
    f_cascade(&session, seq_cfg)
}

/// Pick the winning threshold per cell and assemble the table.
///
/// Ties go to the larger threshold. Each cell files its winner under reduced
/// order `k = q_true`; orders below the smallest calibrated level inherit
/// that level's threshold so the table covers the walk from order zero.
pub fn select_optimal(curves: &[AccuracyCurve]) -> Result<(ThresholdTable, Vec<CalibratedCell>)> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("no accuracy curves to select from".into()));
    }
    let mut cells = Vec::with_capacity(curves.len());
    for curve in curves {
        if curve.points.is_empty() {
            return Err(Error::InvalidInput(format!(
                "cell ({} dB, Q={}) has an empty sweep",
                curve.snr_db, curve.q_true
            )));
        }
        let mut best = curve.points[0];
        for &(t, a) in &curve.points[1..] {
            // Ascending sweep: `>=` lands ties on the largest threshold.
            if a >= best.1 {
                best = (t, a);
            }
        }
        cells.push(CalibratedCell {
            snr_db: curve.snr_db,
            q_true: curve.q_true,
            threshold: best.0,
            mean_accuracy: best.1,
        });
    }

    let mut rows: Vec<ThresholdRow> = cells
        .iter()
        .map(|c| ThresholdRow {
            snr_db: c.snr_db,
            k: c.q_true,
            threshold: c.threshold,
        })
        .collect();
    // Fill orders below the smallest calibrated level, per SNR bin.
    let mut bins: Vec<f64> = cells.iter().map(|c| c.snr_db).collect();
    bins.sort_by(f64::total_cmp);
    bins.dedup();
    for bin in bins {
        let lowest = cells
            .iter()
            .filter(|c| c.snr_db == bin)
            .min_by_key(|c| c.q_true)
            .expect("bin came from cells");
        for k in 0..lowest.q_true {
            rows.push(ThresholdRow {
                snr_db: bin,
                k,
                threshold: lowest.threshold,
            });
        }
    }
    let table = ThresholdTable::new(&rows)?;
    Ok((table, cells))
}

/// Run the whole campaign: sweep, select, and summarize.
pub fn calibrate(grid: &CalibrationGrid, world: &World) -> Result<CalibrationOutcome> {
    let curves = sweep_thresholds(grid, world)?;
    let (table, cells) = select_optimal(&curves)?;
    let attempted = curves.iter().map(|c| c.attempted).sum();
    let failed = curves.iter().map(|c| c.failed).sum();
    Ok(CalibrationOutcome {
        curves,
        cells,
        table,
        attempted,
        failed,
    })
}
