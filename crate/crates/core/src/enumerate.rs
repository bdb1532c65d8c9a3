//! Source-count estimation by sequential F-ratio model comparison, with
//! information-criterion baselines.
//!
//! The core procedure compares the k-source model against the (k+1)-source
//! model through the ratio of their residual mean squares. Starting at k = 0
//! it keeps adding sources while the ratio exceeds a threshold, and reports
//! the first k at which the improvement is no longer worth an extra source.
//! Thresholds come either from a calibration table (indexed by SNR bin and
//! model order) or from the nominal F-distribution quantile. AIC and MDL
//! estimates on the data's eigenvalue spectrum are provided for comparison.

use std::fmt::Write as _;

use nalgebra::linalg::SymmetricEigen;

use crate::localize::{ApSession, OrientationMode, DEFAULT_MAX_PASSES};
use crate::special;
use crate::{Error, Mat, Result};

/// Default relative residual below which a model counts as a perfect fit.
pub const PERFECT_FIT_TOL: f64 = 1e-18;

/// Residual degrees of freedom of a k-source model on m-by-n data.
///
/// Each source consumes its location (3), its amplitude time course (n),
/// and — in free-orientation mode — one orientation parameter beyond the
/// location. Errors when the model has no residual degrees of freedom left.
pub fn dof(m: usize, n: usize, k: usize, mode: OrientationMode) -> Result<usize> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("data must be non-empty".into()));
    }
    let per_source = match mode {
        OrientationMode::Fixed => 3 + n,
        OrientationMode::Free => 4 + n,
    };
    let used = per_source.checked_mul(k).ok_or_else(|| {
        Error::Capacity(format!("parameter count overflows for k = {k}"))
    })?;
    let total = m * n;
    if used >= total {
        return Err(Error::Capacity(format!(
            "a {k}-source model has {used} parameters but the data carries only \
             {total} values; no residual degrees of freedom remain"
        )));
    }
    Ok(total - used)
}

/// Ratio of residual mean squares between nested model orders.
///
/// Returns `(ss_reduced / dof_reduced) / (ss_full / dof_full)`. A zero full
/// residual with a nonzero reduced residual yields positive infinity.
pub fn f_ratio(ss_reduced: f64, dof_reduced: usize, ss_full: f64, dof_full: usize) -> Result<f64> {
    if dof_reduced == 0 || dof_full == 0 {
        return Err(Error::InvalidInput("degrees of freedom must be positive".into()));
    }
    if !(ss_reduced >= 0.0) || !(ss_full >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "residual sums of squares must be non-negative, got {ss_reduced} and {ss_full}"
        )));
    }
    let num = ss_reduced / dof_reduced as f64;
    let den = ss_full / dof_full as f64;
    if den == 0.0 {
        if num == 0.0 {
            return Err(Error::Degenerate(
                "both models fit perfectly; the ratio is undefined".into(),
            ));
        }
        return Ok(f64::INFINITY);
    }
    Ok(num / den)
}

/// Upper-tail F-distribution quantile used as the uncalibrated threshold.
pub fn nominal_threshold(dof_reduced: usize, dof_full: usize, alpha: f64) -> Result<f64> {
    special::f_quantile_upper(dof_reduced as f64, dof_full as f64, alpha)
}

/// One calibrated threshold entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRow {
    /// Center of the SNR bin in dB.
    pub snr_db: f64,
    /// Reduced-model order the threshold applies to.
    pub k: usize,
    /// F-ratio threshold: continue past order k when F exceeds this.
    pub threshold: f64,
}

/// Calibrated decision thresholds, keyed by SNR bin and model order.
///
/// Lookup snaps the query SNR to the nearest bin center (ties to the lower
/// bin). Every bin must cover every order the walk can reach; coverage is
/// checked up front so missing entries fail before any data is touched.
#[derive(Debug, Clone)]
pub struct ThresholdTable {
    /// Sorted distinct bin centers in dB.
    bins: Vec<f64>,
    /// thresholds[bin_index] maps order k to a threshold.
    per_bin: Vec<Vec<(usize, f64)>>,
}

impl ThresholdTable {
    /// Build a table from rows, grouping identical SNR values into bins.
    pub fn new(rows: &[ThresholdRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("threshold table has no rows".into()));
        }
        let mut bins: Vec<f64> = Vec::new();
        for r in rows {
            if !r.snr_db.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "threshold table SNR bin must be finite, got {}",
                    r.snr_db
                )));
            }
            if !(r.threshold.is_finite() && r.threshold > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "threshold for bin {} dB, k = {} must be positive and finite, got {}",
                    r.snr_db, r.k, r.threshold
                )));
            }
            if !bins.iter().any(|&b| b == r.snr_db) {
                bins.push(r.snr_db);
            }
        }
        bins.sort_by(|a, b| a.partial_cmp(b).expect("finite bins"));
        let mut per_bin: Vec<Vec<(usize, f64)>> = vec![Vec::new(); bins.len()];
        for r in rows {
            let bi = bins.iter().position(|&b| b == r.snr_db).expect("bin present");
            if per_bin[bi].iter().any(|&(k, _)| k == r.k) {
                return Err(Error::InvalidInput(format!(
                    "duplicate threshold entry for bin {} dB, k = {}",
                    r.snr_db, r.k
                )));
            }
            per_bin[bi].push((r.k, r.threshold));
        }
        for entries in &mut per_bin {
            entries.sort_by_key(|&(k, _)| k);
        }
        Ok(ThresholdTable { bins, per_bin })
    }

    /// Sorted bin centers in dB.
    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    /// All rows in bin-then-order order (for serialization).
    pub fn rows(&self) -> Vec<ThresholdRow> {
        let mut out = Vec::new();
        for (bi, entries) in self.per_bin.iter().enumerate() {
            for &(k, threshold) in entries {
                out.push(ThresholdRow {
                    snr_db: self.bins[bi],
                    k,
                    threshold,
                });
            }
        }
        out
    }

    /// Index of the bin whose center is nearest to `snr_db`.
    pub fn nearest_bin(&self, snr_db: f64) -> usize {
        let mut best = 0;
        let mut best_d = (snr_db - self.bins[0]).abs();
        for (i, &b) in self.bins.iter().enumerate().skip(1) {
            let d = (snr_db - b).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Threshold for order `k` at the bin nearest to `snr_db`.
    pub fn threshold(&self, snr_db: f64, k: usize) -> Result<f64> {
        let bi = self.nearest_bin(snr_db);
        self.per_bin[bi]
            .iter()
            .find(|&&(kk, _)| kk == k)
            .map(|&(_, t)| t)
            .ok_or_else(|| {
                Error::Capacity(format!(
                    "threshold table has no entry for SNR bin {} dB at model order {k}",
                    self.bins[bi]
                ))
            })
    }

    /// Verify that every bin covers every order in `0..k_max`.
    pub fn validate_coverage(&self, k_max: usize) -> Result<()> {
        let mut missing = String::new();
        for (bi, entries) in self.per_bin.iter().enumerate() {
            for k in 0..k_max {
                if !entries.iter().any(|&(kk, _)| kk == k) {
                    let _ = write!(missing, " ({} dB, k = {k})", self.bins[bi]);
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Capacity(format!(
                "threshold table is missing entries:{missing}"
            )))
        }
    }
}

/// Options for the sequential walk.
#[derive(Debug, Clone)]
pub struct SequentialConfig {
    /// Largest model order the walk may reach; reaching it sets `saturated`.
    pub k_max: usize,
    /// Refinement pass cap handed to the localizer.
    pub max_passes: usize,
    /// Relative residual (fraction of total energy) counting as perfect.
    pub perfect_fit_tol: f64,
}

impl Default for SequentialConfig {
    fn default() -> Self {
        SequentialConfig {
            k_max: 6,
            max_passes: DEFAULT_MAX_PASSES,
            perfect_fit_tol: PERFECT_FIT_TOL,
        }
    }
}

impl SequentialConfig {
    fn validate(&self, m: usize) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::InvalidInput(
                "k_max must be at least 1 to test any model order".into(),
            ));
        }
        if self.k_max >= m {
            return Err(Error::InvalidInput(format!(
                "k_max = {} cannot reach the sensor count {m}",
                self.k_max
            )));
        }
        if !(self.perfect_fit_tol >= 0.0 && self.perfect_fit_tol < 1.0) {
            return Err(Error::InvalidInput(format!(
                "perfect-fit tolerance must lie in [0, 1), got {}",
                self.perfect_fit_tol
            )));
        }
        Ok(())
    }
}

/// One model comparison: order k against order k+1.
#[derive(Debug, Clone, Copy)]
pub struct FStep {
    /// Reduced-model order.
    pub k: usize,
    /// Residual sum of squares of the k-source model.
    pub ss_reduced: f64,
    /// Residual sum of squares of the (k+1)-source model.
    pub ss_full: f64,
    /// Residual degrees of freedom of the reduced model.
    pub dof_reduced: usize,
    /// Residual degrees of freedom of the full model.
    pub dof_full: usize,
    /// The F ratio; 0.0 when the reduced model is already perfect,
    /// infinity when only the full model is perfect.
    pub f: f64,
    /// The reduced model already fit to rounding level; the walk stops.
    pub perfect_reduced: bool,
    /// The full model fit to rounding level.
    pub perfect_full: bool,
    /// The extra source increased the residual (non-nested scan solutions).
    pub residual_increased: bool,
}

/// An [`FStep`] together with the threshold decision applied to it.
#[derive(Debug, Clone, Copy)]
pub struct DecisionStep {
    /// The model comparison.
    pub step: FStep,
    /// Threshold the F value was compared against.
    pub threshold: f64,
    /// Whether the walk moved on to the next order.
    pub continued: bool,
}

/// Outcome of a sequential estimate.
#[derive(Debug, Clone)]
pub struct EnumerationResult {
    /// Estimated number of sources.
    pub q_hat: usize,
    /// The walk hit `k_max` while still continuing; `q_hat` is a lower bound.
    pub saturated: bool,
    /// Every comparison made, in order.
    pub steps: Vec<DecisionStep>,
}

/// The F statistics for all comparisons up to `k_max`, decision-free.
///
/// Calibration evaluates many candidate thresholds against the same data;
/// computing the fits once and replaying decisions afterwards keeps that
/// affordable. [`decide_from_cascade`] reproduces the sequential walk
/// exactly for any threshold rule.
#[derive(Debug, Clone)]
pub struct FCascade {
    /// Order cap the cascade was computed for.
    pub k_max: usize,
    /// Comparisons for k = 0, 1, ... — the list ends early only when a
    /// reduced model fits perfectly (which stops every threshold rule).
    pub steps: Vec<FStep>,
    /// Squared Frobenius norm of the data.
    pub total_ss: f64,
}

/// Compute one comparison step, fitting the (k+1)-source model.
fn compute_step(
    session: &ApSession,
    cfg: &SequentialConfig,
    k: usize,
    ss_reduced: f64,
) -> Result<FStep> {
    let m = session.m();
    let n = session.n();
    let mode = session.mode();
    let dof_reduced = dof(m, n, k, mode)?;
    let dof_full = dof(m, n, k + 1, mode)?;
    let tol = cfg.perfect_fit_tol * session.total_ss();
    let perfect_reduced = ss_reduced <= tol;
    if perfect_reduced {
        // Nothing left to explain: the full model is not fitted.
        return Ok(FStep {
            k,
            ss_reduced,
            ss_full: ss_reduced,
            dof_reduced,
            dof_full,
            f: 0.0,
            perfect_reduced: true,
            perfect_full: true,
            residual_increased: false,
        });
    }
    let fit = session.fit(k + 1, cfg.max_passes)?;
    let ss_full = fit.residual_ss;
    let perfect_full = ss_full <= tol;
    let mut ss_reduced = ss_reduced;
    if perfect_full && k >= 1 {
        // A perfect larger model sometimes hides a sufficient k-source
        // submodel that the greedy fit missed (its extra source carries no
        // amplitude). Refitting each leave-one-out subset of the perfect
        // fit is cheap, runs only in this exact-fit regime, and keeps the
        // comparison honest: if a subset already explains the data, the
        // reduced model deserves that residual.
        for drop in 0..fit.point_indices.len() {
            let subset: Vec<usize> = fit
                .point_indices
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != drop)
                .map(|(_, &p)| p)
                .collect();
            let sub = session.refit(&subset, cfg.max_passes)?;
            if sub.residual_ss < ss_reduced {
                ss_reduced = sub.residual_ss;
                if ss_reduced <= tol {
                    break;
                }
            }
        }
    }
    let perfect_reduced = ss_reduced <= tol;
    let f = if perfect_reduced {
        0.0
    } else if perfect_full {
        f64::INFINITY
    } else {
        f_ratio(ss_reduced, dof_reduced, ss_full, dof_full)?
    };
    Ok(FStep {
        k,
        ss_reduced,
        ss_full,
        dof_reduced,
        dof_full,
        f,
        perfect_reduced,
        perfect_full,
        residual_increased: ss_full > ss_reduced,
    })
}

/// Walk the orders lazily, stopping as soon as a threshold says stop.
fn walk(
    session: &ApSession,
    cfg: &SequentialConfig,
    threshold_for: &mut dyn FnMut(usize) -> Result<f64>,
) -> Result<EnumerationResult> {
    cfg.validate(session.m())?;
    let mut ss = session.fit(0, cfg.max_passes)?.residual_ss;
    let mut steps = Vec::new();
    let mut k = 0;
    let mut saturated = false;
    loop {
        if k == cfg.k_max {
            saturated = true;
            break;
        }
        let step = compute_step(session, cfg, k, ss)?;
        let threshold = threshold_for(k)?;
        let continued = step.f > threshold;
        steps.push(DecisionStep {
            step,
            threshold,
            continued,
        });
        if !continued {
            break;
        }
        ss = step.ss_full;
        k += 1;
    }
    Ok(EnumerationResult {
        q_hat: k,
        saturated,
        steps,
    })
}

/// Estimate the source count with calibrated thresholds.
///
/// The SNR is snapped to the nearest table bin and that bin's coverage of
/// orders `0..k_max` is verified before any fitting happens.
pub fn sequential_estimate(
    session: &ApSession,
    cfg: &SequentialConfig,
    table: &ThresholdTable,
    snr_db: f64,
) -> Result<EnumerationResult> {
    cfg.validate(session.m())?;
    let bin = table.bins()[table.nearest_bin(snr_db)];
    for k in 0..cfg.k_max {
        table.threshold(bin, k)?;
    }
    walk(session, cfg, &mut |k| table.threshold(bin, k))
}

/// Estimate the source count with nominal F-quantile thresholds.
pub fn sequential_estimate_nominal(
    session: &ApSession,
    cfg: &SequentialConfig,
    alpha: f64,
) -> Result<EnumerationResult> {
    cfg.validate(session.m())?;
    let m = session.m();
    let n = session.n();
    let mode = session.mode();
    walk(session, cfg, &mut |k| {
        nominal_threshold(dof(m, n, k, mode)?, dof(m, n, k + 1, mode)?, alpha)
    })
}

/// Compute every comparison up to `k_max` without applying a threshold.
pub fn f_cascade(session: &ApSession, cfg: &SequentialConfig) -> Result<FCascade> {
    cfg.validate(session.m())?;
    let mut ss = session.fit(0, cfg.max_passes)?.residual_ss;
    let mut steps = Vec::new();
    for k in 0..cfg.k_max {
        let step = compute_step(session, cfg, k, ss)?;
        let stop = step.perfect_reduced;
        ss = step.ss_full;
        steps.push(step);
        if stop {
            break;
        }
    }
    Ok(FCascade {
        k_max: cfg.k_max,
        steps,
        total_ss: session.total_ss(),
    })
}

/// Replay the sequential decision on a precomputed cascade.
///
/// Produces exactly what the lazy walk would have produced with the same
/// threshold rule: same estimate, same saturation flag, same step records.
pub fn decide_from_cascade(
    cascade: &FCascade,
    threshold_for: &mut dyn FnMut(usize) -> Result<f64>,
) -> Result<EnumerationResult> {
    let mut steps = Vec::new();
    let mut k = 0;
    let mut saturated = false;
    loop {
        if k == cascade.k_max {
            saturated = true;
            break;
        }
        let Some(step) = cascade.steps.get(k).copied() else {
            // The cascade ended early on a perfect reduced fit, whose F of
            // zero stops every positive threshold — so the walk cannot get
            // here with a well-formed rule.
            return Err(Error::InvalidInput(format!(
                "threshold rule continued past the cascade's perfect fit at order {k}"
            )));
        };
        let threshold = threshold_for(k)?;
        let continued = step.f > threshold;
        steps.push(DecisionStep {
            step,
            threshold,
            continued,
        });
        if !continued {
            break;
        }
        k += 1;
    }
    Ok(EnumerationResult {
        q_hat: k,
        saturated,
        steps,
    })
}

/// Eigenvalues of the sample covariance `Y Y' / n`, descending, clamped at 0.
pub fn eigen_spectrum(y: &Mat) -> Vec<f64> {
    let n = y.ncols().max(1) as f64;
    let cov = (y * y.transpose()) / n;
    let eig = SymmetricEigen::new(cov);
    let mut eigs: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    eigs
}

/// Shared form of the information criteria.
///
/// For each candidate order k the likelihood term is
/// `-n (m-k) * (mean of log noise eigenvalues - log of their mean)`,
/// where the noise eigenvalues are the m-k smallest. Eigenvalues are floored
/// at 1e-300 before taking logarithms.
fn info_criterion(
    eigs: &[f64],
    n_samples: usize,
    penalty: impl Fn(usize) -> f64,
    likelihood_scale: f64,
) -> Result<usize> {
    let m = eigs.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 eigenvalues, got {m}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("sample count must be positive".into()));
    }
    for w in eigs.windows(2) {
        if w[1] > w[0] {
            return Err(Error::InvalidInput(
                "eigenvalues must be sorted in descending order".into(),
            ));
        }
    }
    if eigs.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput(
            "eigenvalues must be finite and non-negative".into(),
        ));
    }
    if eigs.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput(
            "all-zero eigenvalue spectrum carries no signal".into(),
        ));
    }
    let n = n_samples as f64;
    let mut best_k = 0;
    let mut best_score = f64::INFINITY;
    for k in 0..m {
        let tail = &eigs[k..];
        let count = tail.len() as f64;
        let mean_ln = tail.iter().map(|&v| v.max(1e-300).ln()).sum::<f64>() / count;
        let arith = tail.iter().sum::<f64>() / count;
        let term = -likelihood_scale * n * count * (mean_ln - arith.max(1e-300).ln());
        let score = term + penalty(k);
        if score < best_score {
            best_score = score;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Akaike information criterion estimate of the source count.
pub fn aic_estimate(eigs: &[f64], n_samples: usize) -> Result<usize> {
    let m = eigs.len();
    info_criterion(
        eigs,
        n_samples,
        |k| (2 * k * (2 * m - k)) as f64,
        2.0,
    )
}

/// Minimum description length estimate of the source count.
pub fn mdl_estimate(eigs: &[f64], n_samples: usize) -> Result<usize> {
    let m = eigs.len();
    let n = n_samples as f64;
    info_criterion(
        eigs,
        n_samples,
        move |k| 0.5 * (k * (2 * m - k)) as f64 * n.ln(),
        1.0,
    )
}
