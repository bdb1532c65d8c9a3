//! Two-step noise prewhitening for trial-structured sensor recordings.
//!
//! Step one is temporal: a linear-prediction (LPC) model is fit to each
//! trial's pre-stimulus baseline and its prediction-error filter is applied
//! to the whole trial, flattening the noise spectrum. Step two is spatial:
//! after averaging the filtered trials, the noise covariance estimated from
//! the averaged baseline is ridge-regularized and its inverse square root
//! whitens the sensor dimension. The result is data whose residual noise is
//! close to white in both time and space, which the downstream F-ratio test
//! assumes.

use nalgebra::linalg::{Cholesky, SymmetricEigen};

use crate::{Error, Mat, Result};

/// Ridge fraction added to the noise covariance diagonal, as a multiple of
/// its largest eigenvalue.
pub const DEFAULT_RIDGE_FRAC: f64 = 0.10;

/// Default LPC model order.
pub const DEFAULT_LPC_ORDER: usize = 6;

/// A set of repeated trials with a shared pre-stimulus baseline window.
///
/// Each trial is an m-by-n_total matrix whose first `baseline_samples`
/// columns precede the stimulus.
#[derive(Debug, Clone)]
pub struct TrialSet {
    /// Per-trial sensor-by-sample matrices, all the same shape.
    pub trials: Vec<Mat>,
    /// Number of leading columns that form the pre-stimulus baseline.
    pub baseline_samples: usize,
    /// Sampling rate in Hz.
    pub sampling_rate_hz: f64,
}

impl TrialSet {
    /// Validate shape consistency and window bounds.
    pub fn validate(&self) -> Result<()> {
        if self.trials.is_empty() {
            return Err(Error::InvalidInput("trial set is empty".into()));
        }
        let (m, n) = self.trials[0].shape();
        if m == 0 || n == 0 {
            return Err(Error::Dimension("trials must be non-empty matrices".into()));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.shape() != (m, n) {
                return Err(Error::Dimension(format!(
                    "trial {i} is {}x{}, expected {m}x{n}",
                    t.nrows(),
                    t.ncols()
                )));
            }
        }
        if self.baseline_samples == 0 || self.baseline_samples >= n {
            return Err(Error::InvalidInput(format!(
                "baseline window must satisfy 0 < B < {n}, got {}",
                self.baseline_samples
            )));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sampling rate must be positive and finite, got {}",
                self.sampling_rate_hz
            )));
        }
        Ok(())
    }

    /// Sensor count of the (validated) trials.
    pub fn m(&self) -> usize {
        self.trials[0].nrows()
    }

    /// Total samples per trial.
    pub fn n_total(&self) -> usize {
        self.trials[0].ncols()
    }
}

/// Result of the full two-step prewhitening pipeline.
#[derive(Debug, Clone)]
pub struct WhitenedAverage {
    /// Spatially and temporally whitened averaged post-stimulus data.
    pub data: Mat,
    /// Whitened averaged baseline (noise reference), warmup excluded.
    pub baseline: Mat,
    /// Spatial whitening matrix `W` with `W C_reg W^T = I`.
    pub whitener: Mat,
    /// Per-trial averaged LPC coefficients used for the temporal step.
    pub lpc: Vec<Vec<f64>>,
    /// Estimated SNR of the whitened averaged data, in dB.
    pub snr_db: f64,
    /// Total number of channel fits excluded across all trials.
    pub excluded_channels: usize,
    /// Sampling rate carried through from the trials, in Hz.
    pub sampling_rate_hz: f64,
}

/// Fit LPC coefficients of the given order to a baseline segment.
///
/// The autocorrelation of each centered channel (biased estimator, which
/// keeps the Toeplitz system positive semidefinite) yields per-channel
/// normal equations solved by Cholesky factorization. Channels whose system
/// is numerically singular (for example constant channels) are excluded with
/// a warning, and the surviving coefficient vectors are averaged. Returns
/// the averaged coefficients and the number of excluded channels.
pub fn fit_lpc(baseline: &Mat, order: usize) -> Result<(Vec<f64>, usize)> {
    let (m, b) = baseline.shape();
    if order == 0 {
        return Err(Error::InvalidInput("LPC order must be at least 1".into()));
    }
    if b < 10 * order {
        return Err(Error::InvalidInput(format!(
            "baseline of {b} samples is too short to fit {order} LPC coefficients \
             (need at least {})",
            10 * order
        )));
    }
    let mut avg = vec![0.0; order];
    let mut used = 0usize;
    for ch in 0..m {
        let mean = baseline.row(ch).sum() / b as f64;
        let x: Vec<f64> = baseline.row(ch).iter().map(|v| v - mean).collect();
        let mut r = vec![0.0; order + 1];
        for (k, rk) in r.iter_mut().enumerate() {
            let mut s = 0.0;
            for t in k..b {
                s += x[t] * x[t - k];
            }
            *rk = s / b as f64;
        }
        let toeplitz = Mat::from_fn(order, order, |i, j| r[i.abs_diff(j)]);
        let rhs = nalgebra::DVector::from_fn(order, |i, _| r[i + 1]);
        match Cholesky::new(toeplitz) {
            Some(chol) => {
                let c = chol.solve(&rhs);
                for (a, v) in avg.iter_mut().zip(c.iter()) {
                    *a += v;
                }
                used += 1;
            }
            None => {
                log::warn!("LPC fit excluded channel {ch}: singular autocorrelation system");
            }
        }
    }
    if used == 0 {
        return Err(Error::Degenerate(
            "LPC fit failed on every channel; baseline may be constant".into(),
        ));
    }
    for a in &mut avg {
        *a /= used as f64;
    }
    Ok((avg, m - used))
}

/// Apply the LPC prediction-error filter to every channel.
///
/// Output column `j` holds `x[t] - sum_i c[i] * x[t-1-i]` at `t = j + order`;
/// the first `order` samples have incomplete history and are dropped, so the
/// result has `n - order` columns.
pub fn apply_lpc(x: &Mat, coeffs: &[f64]) -> Result<Mat> {
    let (m, n) = x.shape();
    let order = coeffs.len();
    if order == 0 {
        return Err(Error::InvalidInput("LPC coefficients are empty".into()));
    }
    if n <= order {
        return Err(Error::InvalidInput(format!(
            "cannot filter {n} samples with an order-{order} model"
        )));
    }
    let mut out = Mat::zeros(m, n - order);
    for ch in 0..m {
        for t in order..n {
            let mut e = x[(ch, t)];
            for (i, c) in coeffs.iter().enumerate() {
                e -= c * x[(ch, t - 1 - i)];
            }
            out[(ch, t - order)] = e;
        }
    }
    Ok(out)
}

/// Temporally filter each trial with its own baseline LPC fit and average.
///
/// Returns the averaged filtered post-stimulus data, the averaged filtered
/// baseline (both with the `order`-sample warmup removed), the per-trial
/// coefficient vectors, and the total count of excluded channel fits.
pub fn average_trials(trials: &TrialSet, order: usize) -> Result<(Mat, Mat, Vec<Vec<f64>>, usize)> {
    trials.validate()?;
    let m = trials.m();
    let n = trials.n_total();
    let b = trials.baseline_samples;
    if b <= order {
        return Err(Error::InvalidInput(format!(
            "baseline of {b} samples leaves nothing after an order-{order} warmup"
        )));
    }
    let t_count = trials.trials.len() as f64;
    let mut avg_post = Mat::zeros(m, n - b);
    let mut avg_base = Mat::zeros(m, b - order);
    let mut lpc = Vec::with_capacity(trials.trials.len());
    let mut excluded = 0usize;
    for trial in &trials.trials {
        let baseline = trial.columns(0, b).clone_owned();
        let (coeffs, skipped) = fit_lpc(&baseline, order)?;
        excluded += skipped;
        let filtered = apply_lpc(trial, &coeffs)?;
        // Filtered column j corresponds to original sample j + order.
        avg_base += filtered.columns(0, b - order);
        avg_post += filtered.columns(b - order, n - b);
        lpc.push(coeffs);
    }
    avg_post /= t_count;
    avg_base /= t_count;
    Ok((avg_post, avg_base, lpc, excluded))
}

/// Build the inverse-square-root whitener of a ridge-regularized covariance.
///
/// The input must be symmetric and positive semidefinite up to roundoff
/// (eigenvalues above `-1e-12 * lambda_max`). A ridge of
/// `ridge_frac * lambda_max` is added before inversion, so rank-deficient
/// covariances (short baselines) remain usable. Returns `W` such that
/// `W (C + ridge I) W^T = I`.
pub fn build_spatial_whitener(cov: &Mat, ridge_frac: f64) -> Result<Mat> {
    let m = cov.nrows();
    if cov.ncols() != m || m == 0 {
        return Err(Error::Dimension(format!(
            "covariance must be square and non-empty, got {}x{}",
            m,
            cov.ncols()
        )));
    }
    if !(ridge_frac.is_finite() && ridge_frac >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "ridge fraction must be a non-negative finite number, got {ridge_frac}"
        )));
    }
    let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for i in 0..m {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidInput(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    // Symmetrize exactly before the eigendecomposition.
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lambda_max = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    if !(lambda_max.is_finite()) {
        return Err(Error::Numerical("covariance eigenvalues are not finite".into()));
    }
    if lambda_max <= 0.0 {
        return Err(Error::Degenerate(
            "covariance has no positive eigenvalue; the noise reference is empty".into(),
        ));
    }
    let floor = -1e-12 * lambda_max;
    let ridge = ridge_frac * lambda_max;
    let mut inv_sqrt = nalgebra::DVector::zeros(m);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < floor {
            return Err(Error::Numerical(format!(
                "covariance eigenvalue {lam:.3e} is significantly negative"
            )));
        }
        let lam_reg = lam.max(0.0) + ridge;
        if lam_reg <= 0.0 {
            return Err(Error::Degenerate(format!(
                "regularized eigenvalue {i} is not positive; increase the ridge fraction"
            )));
        }
        inv_sqrt[i] = 1.0 / lam_reg.sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * Mat::from_diagonal(&inv_sqrt) * v.transpose())
}

/// Sample covariance of the columns of `x` after removing each row's mean.
pub fn sample_covariance(x: &Mat) -> Result<Mat> {
    let (m, n) = x.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 columns for a sample covariance, got {n}"
        )));
    }
    let mut c = x.clone();
    for r in 0..m {
        let mean = c.row(r).sum() / n as f64;
        for t in 0..n {
            c[(r, t)] -= mean;
        }
    }
    Ok((&c * c.transpose()) / (n as f64 - 1.0))
}

/// Estimate the SNR in dB of `data` using `baseline` as the noise reference.
///
/// The per-sample noise power (summed over channels) comes from the raw
/// baseline energy; the signal energy is the data energy minus the expected
/// noise energy for its duration, clamped at zero. The estimate is floored
/// at -40 dB, and the convention matches the generator:
/// `20 log10(|signal|_F / |noise|_F)`.
pub fn estimate_snr(data: &Mat, baseline: &Mat) -> Result<f64> {
    if data.nrows() != baseline.nrows() {
        return Err(Error::Dimension(format!(
            "data has {} channels but baseline has {}",
            data.nrows(),
            baseline.nrows()
        )));
    }
    if data.ncols() == 0 || baseline.ncols() == 0 {
        return Err(Error::InvalidInput("data and baseline must be non-empty".into()));
    }
    let noise_per_sample = baseline.norm_squared() / baseline.ncols() as f64;
    if noise_per_sample <= 0.0 {
        return Err(Error::Degenerate(
            "baseline is identically zero; cannot estimate noise power".into(),
        ));
    }
    let noise_energy = noise_per_sample * data.ncols() as f64;
    let signal_energy = (data.norm_squared() - noise_energy).max(0.0);
    let ratio = (signal_energy / noise_energy).max(1e-4);
    Ok(10.0 * ratio.log10())
}

/// Run the full two-step pipeline on a trial set.
///
/// Per trial: fit an LPC model of the given order to the baseline and apply
/// its prediction-error filter. Average the filtered trials, estimate the
/// noise covariance from the averaged filtered baseline, build the
/// ridge-regularized spatial whitener, and whiten the averaged data. The SNR
/// is estimated on the whitened output.
pub fn whiten_pipeline(trials: &TrialSet, order: usize, ridge_frac: f64) -> Result<WhitenedAverage> {
    let (avg_post, avg_base, lpc, excluded) = average_trials(trials, order)?;
    if avg_base.ncols() < 2 {
        return Err(Error::InvalidInput(format!(
            "filtered baseline has {} columns; need at least 2 for a covariance",
            avg_base.ncols()
        )));
    }
    let cov = sample_covariance(&avg_base)?;
    let w = build_spatial_whitener(&cov, ridge_frac)?;
    let data = &w * avg_post;
    let baseline = &w * avg_base;
    let snr_db = estimate_snr(&data, &baseline)?;
    Ok(WhitenedAverage {
        data,
        baseline,
        whitener: w,
        lpc,
        snr_db,
        excluded_channels: excluded,
        sampling_rate_hz: trials.sampling_rate_hz,
    })
}
