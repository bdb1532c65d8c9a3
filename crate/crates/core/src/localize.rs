//! Alternating-projections dipole localization on a fixed source grid.
//!
//! Sources are found one at a time: each new source maximizes the data
//! energy it explains after the topographies of the already-selected sources
//! are projected out (phase one), and the selection is then refined by
//! cyclically re-scanning every source with the others held fixed until no
//! index changes (phase two). Scanning works on precomputed grid
//! topographies, so one pass over all candidates costs a couple of matrix
//! products rather than a per-candidate least-squares solve. In
//! free-orientation mode each candidate solves a small generalized
//! eigenproblem in the non-silent subspace of its gain matrix.

use nalgebra::linalg::SymmetricEigen;
use nalgebra::DVector;

use crate::forward::LeadFieldSet;
use crate::{Error, Mat, Result, Vec3};

/// Default cap on phase-two refinement passes.
pub const DEFAULT_MAX_PASSES: usize = 10;

/// Candidates whose deflated energy denominator falls below this fraction of
/// its undeflated value are skipped as collinear with the current selection
/// (ratio of squared norms, so this tolerates conditioning up to ~1e8).
const COLLINEAR_TOL: f64 = 1e-16;

/// Relative eigenvalue floor that separates a gain's active subspace from
/// its numerically silent directions (e.g. the radial direction in a
/// spherical head model).
const RANK_TOL: f64 = 1e-12;

/// Largest acceptable condition number for the final joint amplitude solve.
const MAX_COND: f64 = 1e8;

/// Whether dipole orientations are taken from the grid or optimized freely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationMode {
    /// Orientation fixed to the grid's stored tangential direction.
    Fixed,
    /// Orientation optimized per source during scanning.
    Free,
}

impl std::fmt::Display for OrientationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrientationMode::Fixed => write!(f, "fixed"),
            OrientationMode::Free => write!(f, "free"),
        }
    }
}

impl std::str::FromStr for OrientationMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "fixed" => Ok(OrientationMode::Fixed),
            "free" => Ok(OrientationMode::Free),
            other => Err(crate::Error::InvalidInput(format!(
                "unknown orientation mode '{other}' (expected 'fixed' or 'free')"
            ))),
        }
    }
}

/// Diagnostic flags raised while fitting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitFlags {
    /// Some candidates were skipped because their topography was (nearly)
    /// inside the span of the current selection.
    pub collinear_skipped: bool,
    /// Some candidates had no usable gain direction at all.
    pub silent_source: bool,
    /// Phase two was still changing indices when the pass cap was reached.
    pub max_passes_reached: bool,
}

/// A k-dipole fit: locations, orientations, amplitudes, and the residual.
#[derive(Debug, Clone)]
pub struct DipoleFit {
    /// Selected grid point per source.
    pub point_indices: Vec<usize>,
    /// Unit moment orientation per source (sign-canonicalized in free mode).
    pub orientations: Vec<Vec3>,
    /// Jointly fitted amplitude time courses, one row per source (k-by-n).
    pub amplitudes: Mat,
    /// Squared Frobenius norm of the residual after the joint fit.
    pub residual_ss: f64,
    /// Squared Frobenius norm of the data.
    pub total_ss: f64,
    /// Number of phase-two passes executed.
    pub passes_used: usize,
    /// Explained energy after each phase-one step and each phase-two pass.
    pub objective_trace: Vec<f64>,
    /// Diagnostics accumulated over all scans of this fit.
    pub flags: FitFlags,
}

impl DipoleFit {
    /// Number of fitted sources.
    pub fn k(&self) -> usize {
        self.point_indices.len()
    }

    /// Data energy explained by the fit.
    pub fn explained_ss(&self) -> f64 {
        self.total_ss - self.residual_ss
    }
}

/// Result of a standalone orientation optimization.
#[derive(Debug, Clone)]
pub struct OrientationFit {
    /// Optimal unit orientation, sign-canonicalized; zero when silent.
    pub orientation: Vec3,
    /// Explained energy per unit topography norm at the optimum.
    pub objective: f64,
    /// True when the gain matrix has no usable direction.
    pub silent: bool,
}

/// Fit amplitudes for a fixed set of topographies by least squares.
///
/// Returns the k-by-n amplitude matrix and the squared residual norm,
/// computed from the explicit residual matrix so that exact fits report a
/// residual at rounding level. Rejects topography sets whose condition
/// number exceeds 1e8, naming the most redundant column.
pub fn subspace_fit(topographies: &Mat, y: &Mat) -> Result<(Mat, f64)> {
    let (m, k) = topographies.shape();
    if y.nrows() != m {
        return Err(Error::Dimension(format!(
            "topographies have {m} rows but data has {}",
            y.nrows()
        )));
    }
    let n = y.ncols();
    if k == 0 {
        return Ok((Mat::zeros(0, n), y.norm_squared()));
    }
    if k > m {
        return Err(Error::InvalidInput(format!(
            "cannot fit {k} sources with only {m} sensors"
        )));
    }
    let svd = topographies.clone().svd(true, true);
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[k - 1];
    if !(smin > 0.0) || smax / smin > MAX_COND {
        // The right singular vector of the smallest singular value says
        // which columns participate in the near-dependency.
        let vt = svd.v_t.as_ref().expect("svd computed with vectors");
        let null_row = vt.row(k - 1);
        let mut worst = 0;
        for i in 1..k {
            if null_row[i].abs() > null_row[worst].abs() {
                worst = i;
            }
        }
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        return Err(Error::Degenerate(format!(
            "topography column {worst} is nearly a linear combination of the \
             others (condition number {cond:.2e})"
        )));
    }
    let amplitudes = svd
        .solve(y, 0.0)
        .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))?;
    let residual = y - topographies * &amplitudes;
    let residual_ss = residual.norm_squared().min(y.norm_squared());
    Ok((amplitudes, residual_ss))
}

/// Flip the sign so the largest-magnitude component is positive.
fn canonical_sign(v: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Row-wise squared norms, accumulated down columns for cache friendliness.
fn row_norms_squared(x: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; x.nrows()];
    for c in 0..x.ncols() {
        for (r, v) in x.column(c).iter().enumerate() {
            out[r] += v * v;
        }
    }
    out
}

/// Row Grams of consecutive row blocks, packed `[g00, g01, g11]` per block.
///
/// `offsets[i]..offsets[i+1]` delimits block `i`'s rows. Blocks wider than
/// two rows are left zeroed; their callers recompute directly. Accumulation
/// runs column-major to match the storage order.
fn row_block_grams(x: &Mat, offsets: &[usize]) -> Vec<[f64; 3]> {
    let p = offsets.len() - 1;
    let mut out = vec![[0.0; 3]; p];
    for c in 0..x.ncols() {
        let col = x.column(c);
        for (i, acc) in out.iter_mut().enumerate() {
            let off = offsets[i];
            match offsets[i + 1] - off {
                1 => {
                    let v0 = col[off];
                    acc[0] += v0 * v0;
                }
                2 => {
                    let v0 = col[off];
                    let v1 = col[off + 1];
                    acc[0] += v0 * v0;
                    acc[1] += v0 * v1;
                    acc[2] += v1 * v1;
                }
                _ => {}
            }
        }
    }
    out
}

/// Eigen-decomposition of a symmetric 2-by-2 `[a00 a01; a01 a11]`.
///
/// Returns eigenvalues descending and the unit eigenvector of the larger
/// one; the other eigenvector is its perpendicular.
fn sym_eig2(a00: f64, a01: f64, a11: f64) -> ([f64; 2], [f64; 2]) {
    let mean = 0.5 * (a00 + a11);
    let half_gap = 0.5 * (a00 - a11);
    let disc = half_gap.hypot(a01);
    let l0 = mean + disc;
    let l1 = mean - disc;
    // Pick whichever residual form is better conditioned for the top vector.
    let (vx, vy) = if half_gap >= 0.0 {
        (l0 - a11, a01)
    } else {
        (a01, l0 - a00)
    };
    let n = vx.hypot(vy);
    if n == 0.0 {
        // Isotropic block: any direction is an eigenvector.
        ([l0, l1], [1.0, 0.0])
    } else {
        ([l0, l1], [vx / n, vy / n])
    }
}

/// Scalar form of [`max_generalized_pair`] for 2-by-2 symmetric pairs,
/// with `a = [a00, a01, a11]` and `b` packed the same way.
///
/// Returns the maximal ratio and an unnormalized direction `(w0, w1)`;
/// mirrors the generic routine's collinearity and rank handling exactly.
fn max_pair_2(a: &[f64; 3], b: &[f64; 3], scale: f64) -> Option<(f64, f64, f64)> {
    let ([lb0, lb1], v0) = sym_eig2(b[0], b[1], b[2]);
    if !(lb0 > COLLINEAR_TOL * scale) || !lb0.is_finite() {
        return None;
    }
    let v1 = [-v0[1], v0[0]];
    let av0 = [a[0] * v0[0] + a[1] * v0[1], a[1] * v0[0] + a[2] * v0[1]];
    let q00 = v0[0] * av0[0] + v0[1] * av0[1];
    if lb1 > RANK_TOL * lb0 {
        let s0 = 1.0 / lb0.sqrt();
        let s1 = 1.0 / lb1.sqrt();
        let av1 = [a[0] * v1[0] + a[1] * v1[1], a[1] * v1[0] + a[2] * v1[1]];
        let m00 = s0 * s0 * q00;
        let m01 = s0 * s1 * (v0[0] * av1[0] + v0[1] * av1[1]);
        let m11 = s1 * s1 * (v1[0] * av1[0] + v1[1] * av1[1]);
        let ([me0, _], w) = sym_eig2(m00, m01, m11);
        let u0 = s0 * w[0];
        let u1 = s1 * w[1];
        Some((
            me0.max(0.0),
            v0[0] * u0 + v1[0] * u1,
            v0[1] * u0 + v1[1] * u1,
        ))
    } else {
        let s0 = 1.0 / lb0.sqrt();
        Some(((q00 / lb0).max(0.0), v0[0] * s0, v0[1] * s0))
    }
}

/// Thin orthonormal basis for the column span of `t`.
fn thin_q(t: &Mat) -> Mat {
    if t.ncols() == 0 {
        return Mat::zeros(t.nrows(), 0);
    }
    t.clone().qr().q()
}

/// Maximize `v' A v / v' B v` over the usable subspace of PSD `B`.
///
/// Directions of `B` below `RANK_TOL` of its largest eigenvalue are treated
/// as silent. Returns `None` when `B` has no eigenvalue above
/// `COLLINEAR_TOL * scale`, i.e. the candidate is fully explained by (or
/// collinear with) whatever was projected out. Otherwise returns the maximal
/// ratio and an unnormalized direction attaining it.
fn max_generalized_pair(a: &Mat, b: &Mat, scale: f64) -> Option<(f64, DVector<f64>)> {
    let d = b.nrows();
    let eig = SymmetricEigen::new(b.clone());
    let lb_max = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(lb_max > COLLINEAR_TOL * scale) || !lb_max.is_finite() {
        return None;
    }
    let floor = RANK_TOL * lb_max;
    let kept: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > floor).collect();
    let r = kept.len();
    // Whitened projection M = S^{-1/2} V' A V S^{-1/2} on the kept subspace.
    let mut vk = Mat::zeros(d, r);
    let mut inv_sqrt = DVector::zeros(r);
    for (c, &i) in kept.iter().enumerate() {
        vk.set_column(c, &eig.eigenvectors.column(i));
        inv_sqrt[c] = 1.0 / eig.eigenvalues[i].sqrt();
    }
    let mut msmall = vk.transpose() * a * &vk;
    for i in 0..r {
        for j in 0..r {
            msmall[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let eig2 = SymmetricEigen::new(msmall);
    let mut top = 0;
    for i in 1..r {
        if eig2.eigenvalues[i] > eig2.eigenvalues[top] {
            top = i;
        }
    }
    let e = eig2.eigenvalues[top].max(0.0);
    let w = eig2.eigenvectors.column(top);
    let mut v = DVector::zeros(d);
    for (c, _) in kept.iter().enumerate() {
        v += vk.column(c) * (inv_sqrt[c] * w[c]);
    }
    Some((e, v))
}

/// Find the unit orientation maximizing the energy a dipole at a fixed
/// location explains in `y`, per unit topography norm.
///
/// `gain` is the m-by-3 gain matrix of the location. Rank-deficient gains
/// (spherical models silence the radial direction) are handled by searching
/// only the active subspace. A gain with no usable direction yields a zero
/// orientation with the `silent` flag set.
pub fn best_orientation(gain: &Mat, y: &Mat) -> Result<OrientationFit> {
    if gain.ncols() != 3 {
        return Err(Error::Dimension(format!(
            "gain matrix must have 3 columns, got {}",
            gain.ncols()
        )));
    }
    if gain.nrows() != y.nrows() {
        return Err(Error::Dimension(format!(
            "gain has {} rows but data has {}",
            gain.nrows(),
            y.nrows()
        )));
    }
    let gty = gain.transpose() * y;
    let a = &gty * gty.transpose();
    let b = gain.transpose() * gain;
    let scale = gain.norm_squared().max(f64::MIN_POSITIVE);
    match max_generalized_pair(&a, &b, scale) {
        None => Ok(OrientationFit {
            orientation: Vec3::zeros(),
            objective: 0.0,
            silent: true,
        }),
        Some((e, v)) => {
            let o = Vec3::new(v[0], v[1], v[2]);
            let norm = o.norm();
            if norm == 0.0 {
                return Ok(OrientationFit {
                    orientation: Vec3::zeros(),
                    objective: 0.0,
                    silent: true,
                });
            }
            Ok(OrientationFit {
                orientation: canonical_sign(o / norm),
                objective: e,
                silent: false,
            })
        }
    }
}

/// Precomputed per-grid-point topographies in fixed-orientation mode.
struct FixedBasis {
    /// p-by-m matrix whose row p is the gain times the stored orientation,
    /// transposed; row-major storage keeps the hot products on the
    /// gemm-accelerated path.
    topo_t: Mat,
    /// Squared topography norms.
    norms: Vec<f64>,
    /// Stored grid orientations, for reporting.
    orients: Vec<Vec3>,
}

/// Precomputed per-grid-point reduced gains in free-orientation mode.
struct FreeBasis {
    /// (sum of active dims)-by-m matrix of gains projected onto each
    /// point's active subspace, transposed for gemm-friendly products.
    gains_t: Mat,
    /// Prefix offsets into the columns of `gains`, length p+1.
    offsets: Vec<usize>,
    /// 3-by-d active-subspace basis per point.
    bases: Vec<Mat>,
    /// d-by-d reduced Gram matrix per point.
    grams: Vec<Mat>,
    /// Largest Gram eigenvalue per point (collinearity scale).
    scales: Vec<f64>,
}

enum ScanBasis {
    Fixed(FixedBasis),
    Free(FreeBasis),
}

/// Reusable scanning tables for one lead-field set and orientation mode.
///
/// Building the scanner does all data-independent work (topography matrix or
/// per-point active-subspace reduction); a [`ApScanner::session`] then binds
/// it to one data matrix for any number of fits.
pub struct ApScanner {
    basis: ScanBasis,
    m: usize,
    p: usize,
    mode: OrientationMode,
    any_silent: bool,
}

impl ApScanner {
    /// Precompute scanning tables for a lead-field set.
    pub fn new(lfs: &LeadFieldSet, mode: OrientationMode) -> Result<ApScanner> {
        let m = lfs.sensor_count();
        let p = lfs.len();
        if p == 0 {
            return Err(Error::InvalidInput("lead-field set has no grid points".into()));
        }
        let mut any_silent = false;
        let basis = match mode {
            OrientationMode::Fixed => {
                let mut topo = Mat::zeros(m, p);
                let mut orients = Vec::with_capacity(p);
                for q in 0..p {
                    let t = lfs.fixed_topography(q)?;
                    topo.set_column(q, &t);
                    orients.push(
                        lfs.grid()
                            .fixed_orientations()
                            .expect("fixed topography implies stored orientations")[q],
                    );
                }
                let norms: Vec<f64> = (0..p).map(|q| topo.column(q).norm_squared()).collect();
                any_silent = norms.iter().any(|&n| n <= 0.0);
                ScanBasis::Fixed(FixedBasis {
                    topo_t: topo.transpose(),
                    norms,
                    orients,
                })
            }
            OrientationMode::Free => {
                let mut offsets = Vec::with_capacity(p + 1);
                offsets.push(0usize);
                let mut bases = Vec::with_capacity(p);
                let mut grams = Vec::with_capacity(p);
                let mut scales = Vec::with_capacity(p);
                let mut cols: Vec<Mat> = Vec::with_capacity(p);
                for q in 0..p {
                    let gain = lfs.gain(q)?;
                    let gram3 = gain.transpose() * gain;
                    let eig = SymmetricEigen::new(gram3);
                    let mut order: Vec<usize> = (0..3).collect();
                    order.sort_by(|&i, &j| {
                        eig.eigenvalues[j]
                            .partial_cmp(&eig.eigenvalues[i])
                            .expect("finite eigenvalues")
                    });
                    let lmax = eig.eigenvalues[order[0]];
                    let d = if lmax > 0.0 {
                        order
                            .iter()
                            .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * lmax)
                            .count()
                    } else {
                        0
                    };
                    if d == 0 {
                        any_silent = true;
                    }
                    let mut basis = Mat::zeros(3, d);
                    for c in 0..d {
                        basis.set_column(c, &eig.eigenvectors.column(order[c]));
                    }
                    let reduced = gain * &basis;
                    grams.push(reduced.transpose() * &reduced);
                    scales.push(lmax.max(0.0));
                    offsets.push(offsets[q] + d);
                    bases.push(basis);
                    cols.push(reduced);
                }
                let total = *offsets.last().expect("nonempty offsets");
                let mut gains = Mat::zeros(m, total);
                for (q, red) in cols.iter().enumerate() {
                    gains
                        .columns_mut(offsets[q], offsets[q + 1] - offsets[q])
                        .copy_from(red);
                }
                ScanBasis::Free(FreeBasis {
                    gains_t: gains.transpose(),
                    offsets,
                    bases,
                    grams,
                    scales,
                })
            }
        };
        Ok(ApScanner {
            basis,
            m,
            p,
            mode,
            any_silent,
        })
    }

    /// Orientation mode this scanner was built for.
    pub fn mode(&self) -> OrientationMode {
        self.mode
    }

    /// Number of candidate grid points.
    pub fn candidate_count(&self) -> usize {
        self.p
    }

    /// Bind the scanner to one data matrix.
    pub fn session<'a>(&'a self, y: &'a Mat) -> Result<ApSession<'a>> {
        if y.nrows() != self.m {
            return Err(Error::Dimension(format!(
                "data has {} rows but the scanner expects {}",
                y.nrows(),
                self.m
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::InvalidInput("data has no samples".into()));
        }
        let (g0, cache) = match &self.basis {
            ScanBasis::Fixed(fb) => {
                let g0 = &fb.topo_t * y;
                let cache = SessionCache::Fixed(row_norms_squared(&g0));
                (g0, cache)
            }
            ScanBasis::Free(fr) => {
                let g0 = &fr.gains_t * y;
                let cache = SessionCache::Free(row_block_grams(&g0, &fr.offsets));
                (g0, cache)
            }
        };
        Ok(ApSession {
            scanner: self,
            y,
            g0,
            cache,
            total_ss: y.norm_squared(),
        })
    }
}

/// One selected source during scanning.
#[derive(Clone)]
struct Sel {
    idx: usize,
    orient: Vec3,
    /// Coordinates in the candidate's active subspace (free mode only).
    w: DVector<f64>,
}

/// Winner of one scan.
struct ScanHit {
    index: usize,
    energy: f64,
    w: DVector<f64>,
}

struct ScanOutcome {
    energies: Vec<f64>,
    best: Option<ScanHit>,
    skipped_collinear: bool,
}

/// Per-candidate summaries of `g0`, fixed at session bind time.
enum SessionCache {
    /// Row norms of `g0`, one per candidate.
    Fixed(Vec<f64>),
    /// Row-block Grams of `g0`, one per candidate.
    Free(Vec<[f64; 3]>),
}

/// A scanner bound to one data matrix, with the candidate-data products
/// precomputed. All fits for different source counts reuse this state.
pub struct ApSession<'a> {
    scanner: &'a ApScanner,
    y: &'a Mat,
    /// Candidate basis transposed times data (p-by-n or sum-d-by-n).
    g0: Mat,
    cache: SessionCache,
    total_ss: f64,
}

impl ApSession<'_> {
    /// Squared Frobenius norm of the bound data.
    pub fn total_ss(&self) -> f64 {
        self.total_ss
    }

    /// Number of sensors in the bound data.
    pub fn m(&self) -> usize {
        self.scanner.m
    }

    /// Number of time samples in the bound data.
    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    /// Orientation mode of the underlying scanner.
    pub fn mode(&self) -> OrientationMode {
        self.scanner.mode
    }

    /// Scan all candidates with the span of `q` projected out.
    ///
    /// The deflated product table `G0 - D C` is never materialized: its row
    /// norms (and in free mode, row-block Grams) expand into low-rank cross
    /// terms through `H = G0 C'` and `T = D (C C')`, which cost `p * k`
    /// instead of `p * n` per scan.
    fn scan(&self, q: &Mat, excluded: &[bool]) -> ScanOutcome {
        let p = self.scanner.p;
        let mut energies = vec![f64::NEG_INFINITY; p];
        let mut best: Option<ScanHit> = None;
        let mut skipped = false;
        let c = q.tr_mul(self.y);
        let h = &self.g0 * c.transpose();
        match &self.scanner.basis {
            ScanBasis::Fixed(fb) => {
                let d = &fb.topo_t * q;
                let t = &d * (&c * c.transpose());
                let dnorm = row_norms_squared(&d);
                let SessionCache::Fixed(g0_norms) = &self.cache else {
                    unreachable!("fixed basis binds a fixed cache");
                };
                let mut gnorm = g0_norms.clone();
                for j in 0..d.ncols() {
                    let dc = d.column(j);
                    let hc = h.column(j);
                    let tc = t.column(j);
                    for (r, g) in gnorm.iter_mut().enumerate() {
                        *g += dc[r] * (tc[r] - 2.0 * hc[r]);
                    }
                }
                for i in 0..p {
                    if excluded[i] {
                        continue;
                    }
                    let den = fb.norms[i] - dnorm[i];
                    if !(den > COLLINEAR_TOL * fb.norms[i]) {
                        skipped = true;
                        continue;
                    }
                    let e = gnorm[i] / den;
                    energies[i] = e;
                    if best.as_ref().map_or(true, |b| e > b.energy) {
                        best = Some(ScanHit {
                            index: i,
                            energy: e,
                            w: DVector::zeros(0),
                        });
                    }
                }
            }
            ScanBasis::Free(fr) => {
                let d = &fr.gains_t * q;
                let t = &d * (&c * c.transpose());
                let b_acc = row_block_grams(&d, &fr.offsets);
                let SessionCache::Free(g0_grams) = &self.cache else {
                    unreachable!("free basis binds a free cache");
                };
                let mut a_acc = g0_grams.clone();
                for j in 0..d.ncols() {
                    let dc = d.column(j);
                    let hc = h.column(j);
                    let tc = t.column(j);
                    for (i, acc) in a_acc.iter_mut().enumerate() {
                        let off = fr.offsets[i];
                        match fr.offsets[i + 1] - off {
                            1 => {
                                acc[0] += dc[off] * (tc[off] - 2.0 * hc[off]);
                            }
                            2 => {
                                let (d0, d1) = (dc[off], dc[off + 1]);
                                let (h0, h1) = (hc[off], hc[off + 1]);
                                let (t0, t1) = (tc[off], tc[off + 1]);
                                acc[0] += d0 * (t0 - 2.0 * h0);
                                acc[1] += d0 * t1 - h0 * d1 - d0 * h1;
                                acc[2] += d1 * (t1 - 2.0 * h1);
                            }
                            _ => {}
                        }
                    }
                }
                for i in 0..p {
                    if excluded[i] {
                        continue;
                    }
                    let off = fr.offsets[i];
                    let dim = fr.offsets[i + 1] - off;
                    // Direction coordinates are materialized only when the
                    // candidate takes the lead, keeping the common rank-1 and
                    // rank-2 cases allocation free.
                    let hit: Option<(f64, DVector<f64>)> = match dim {
                        0 => None,
                        1 => {
                            let b00 = fr.grams[i][(0, 0)] - b_acc[i][0];
                            if b00.is_finite() && b00 > COLLINEAR_TOL * fr.scales[i] {
                                let e = (a_acc[i][0] / b00).max(0.0);
                                if best.as_ref().map_or(true, |bst| e > bst.energy) {
                                    Some((e, DVector::from_column_slice(&[1.0 / b00.sqrt()])))
                                } else {
                                    energies[i] = e;
                                    continue;
                                }
                            } else {
                                None
                            }
                        }
                        2 => {
                            let b = [
                                fr.grams[i][(0, 0)] - b_acc[i][0],
                                fr.grams[i][(0, 1)] - b_acc[i][1],
                                fr.grams[i][(1, 1)] - b_acc[i][2],
                            ];
                            match max_pair_2(&a_acc[i], &b, fr.scales[i]) {
                                None => None,
                                Some((e, w0, w1)) => {
                                    if best.as_ref().map_or(true, |bst| e > bst.energy) {
                                        Some((e, DVector::from_column_slice(&[w0, w1])))
                                    } else {
                                        energies[i] = e;
                                        continue;
                                    }
                                }
                            }
                        }
                        _ => {
                            let dp = d.rows(off, dim);
                            let gp = self.g0.rows(off, dim) - &dp * &c;
                            let b = &fr.grams[i] - &dp * dp.transpose();
                            let a = &gp * gp.transpose();
                            max_generalized_pair(&a, &b, fr.scales[i])
                        }
                    };
                    match hit {
                        None => {
                            skipped = true;
                        }
                        Some((e, w)) => {
                            energies[i] = e;
                            if best.as_ref().map_or(true, |bst| e > bst.energy) {
                                best = Some(ScanHit {
                                    index: i,
                                    energy: e,
                                    w,
                                });
                            }
                        }
                    }
                }
            }
        }
        ScanOutcome {
            energies,
            best,
            skipped_collinear: skipped,
        }
    }

    /// Turn a scan hit into a selected source with a canonical orientation.
    fn make_sel(&self, hit: ScanHit) -> Sel {
        match &self.scanner.basis {
            ScanBasis::Fixed(fb) => Sel {
                idx: hit.index,
                orient: fb.orients[hit.index],
                w: DVector::zeros(0),
            },
            ScanBasis::Free(fr) => {
                let w = &hit.w / hit.w.norm();
                let full = &fr.bases[hit.index] * &w;
                let o = Vec3::new(full[0], full[1], full[2]);
                let o = o / o.norm();
                let canon = canonical_sign(o);
                // Keep the reduced coordinates consistent with the
                // canonicalized full orientation.
                let sign = if (canon - o).norm() > 1.0 { -1.0 } else { 1.0 };
                Sel {
                    idx: hit.index,
                    orient: canon,
                    w: w * sign,
                }
            }
        }
    }

    /// Topography column of a selected source.
    fn sel_topography(&self, sel: &Sel) -> DVector<f64> {
        match &self.scanner.basis {
            ScanBasis::Fixed(fb) => fb.topo_t.row(sel.idx).transpose(),
            ScanBasis::Free(fr) => {
                let off = fr.offsets[sel.idx];
                let dim = fr.offsets[sel.idx + 1] - off;
                fr.gains_t.rows(off, dim).tr_mul(&sel.w)
            }
        }
    }

    fn sel_matrix(&self, sels: &[Sel]) -> Mat {
        let mut t = Mat::zeros(self.scanner.m, sels.len());
        for (c, s) in sels.iter().enumerate() {
            t.set_column(c, &self.sel_topography(s));
        }
        t
    }

    /// Fit `k` dipoles by alternating projections.
    ///
    /// Phase one greedily adds the candidate explaining the most deflated
    /// energy; phase two cyclically re-localizes each source with the others
    /// projected out, replacing it only on strict improvement, until a full
    /// pass changes no index or `max_passes` is reached. Ties in a scan go
    /// to the lowest grid index, making the fit deterministic.
    pub fn fit(&self, k: usize, max_passes: usize) -> Result<DipoleFit> {
        let n = self.y.ncols();
        if k >= self.scanner.m {
            return Err(Error::InvalidInput(format!(
                "cannot fit {k} sources with {} sensors",
                self.scanner.m
            )));
        }
        let mut flags = FitFlags {
            silent_source: self.scanner.any_silent,
            ..FitFlags::default()
        };
        if k == 0 {
            return Ok(DipoleFit {
                point_indices: Vec::new(),
                orientations: Vec::new(),
                amplitudes: Mat::zeros(0, n),
                residual_ss: self.total_ss,
                total_ss: self.total_ss,
                passes_used: 0,
                objective_trace: Vec::new(),
                flags,
            });
        }
        if k > self.scanner.p {
            return Err(Error::InvalidInput(format!(
                "cannot fit {k} sources on a {}-point grid",
                self.scanner.p
            )));
        }

        let mut selected: Vec<Sel> = Vec::with_capacity(k);
        let mut excluded = vec![false; self.scanner.p];
        let mut trace = Vec::new();
        let mut explained = 0.0;

        // Phase one: greedy sequential selection under deflation.
        for step in 0..k {
            let q = thin_q(&self.sel_matrix(&selected));
            let outcome = self.scan(&q, &excluded);
            flags.collinear_skipped |= outcome.skipped_collinear;
            let hit = outcome.best.ok_or_else(|| {
                Error::Degenerate(format!(
                    "no admissible candidate at selection step {step}: every grid \
                     point is collinear with the current sources"
                ))
            })?;
            explained += hit.energy;
            trace.push(explained);
            let sel = self.make_sel(hit);
            excluded[sel.idx] = true;
            selected.push(sel);
        }

        // Phase two: cyclic re-localization with the others projected out.
        let passes_used =
            self.cyclic_refine(&mut selected, &mut excluded, &mut trace, &mut flags, max_passes);

        let t_final = self.sel_matrix(&selected);
        let (amplitudes, residual_ss) = subspace_fit(&t_final, self.y)?;
        Ok(DipoleFit {
            point_indices: selected.iter().map(|s| s.idx).collect(),
            orientations: selected.iter().map(|s| s.orient).collect(),
            amplitudes,
            residual_ss,
            total_ss: self.total_ss,
            passes_used,
            objective_trace: trace,
            flags,
        })
    }

    /// Fit `indices.len()` dipoles starting from an explicit location set.
    ///
    /// Each starting source first gets its best undeflated orientation, then
    /// the usual cyclic re-localization runs, so sources are free to move off
    /// the starting set. Useful as a warm start, and the sequential cascade
    /// uses it to check whether a subset of a perfectly fitting larger model
    /// already explains the data.
    pub fn refit(&self, indices: &[usize], max_passes: usize) -> Result<DipoleFit> {
        let n = self.y.ncols();
        let k = indices.len();
        if k >= self.scanner.m {
            return Err(Error::InvalidInput(format!(
                "cannot fit {k} sources with {} sensors",
                self.scanner.m
            )));
        }
        if k > self.scanner.p {
            return Err(Error::InvalidInput(format!(
                "cannot fit {k} sources on a {}-point grid",
                self.scanner.p
            )));
        }
        let mut flags = FitFlags {
            silent_source: self.scanner.any_silent,
            ..FitFlags::default()
        };
        if k == 0 {
            return Ok(DipoleFit {
                point_indices: Vec::new(),
                orientations: Vec::new(),
                amplitudes: Mat::zeros(0, n),
                residual_ss: self.total_ss,
                total_ss: self.total_ss,
                passes_used: 0,
                objective_trace: Vec::new(),
                flags,
            });
        }
        let mut excluded = vec![false; self.scanner.p];
        for &i in indices {
            if i >= self.scanner.p {
                return Err(Error::InvalidInput(format!(
                    "start index {i} is outside the {}-point grid",
                    self.scanner.p
                )));
            }
            if excluded[i] {
                return Err(Error::InvalidInput(format!("start index {i} repeats")));
            }
            excluded[i] = true;
        }

        // Seed each source with its undeflated best orientation; the first
        // refinement pass re-derives orientations under deflation anyway.
        let no_deflation = Mat::zeros(self.scanner.m, 0);
        let mut selected = Vec::with_capacity(k);
        let mut all_but_one = vec![true; self.scanner.p];
        for &i in indices {
            all_but_one[i] = false;
            let outcome = self.scan(&no_deflation, &all_but_one);
            all_but_one[i] = true;
            let hit = outcome.best.ok_or_else(|| {
                Error::Degenerate(format!("start index {i} has no usable gain direction"))
            })?;
            selected.push(self.make_sel(hit));
        }

        let q = thin_q(&self.sel_matrix(&selected));
        let mut trace = vec![(q.transpose() * self.y).norm_squared()];
        let passes_used =
            self.cyclic_refine(&mut selected, &mut excluded, &mut trace, &mut flags, max_passes);

        let t_final = self.sel_matrix(&selected);
        let (amplitudes, residual_ss) = subspace_fit(&t_final, self.y)?;
        Ok(DipoleFit {
            point_indices: selected.iter().map(|s| s.idx).collect(),
            orientations: selected.iter().map(|s| s.orient).collect(),
            amplitudes,
            residual_ss,
            total_ss: self.total_ss,
            passes_used,
            objective_trace: trace,
            flags,
        })
    }

    /// Cyclically re-localize each source with the others projected out,
    /// replacing it only on strict improvement, until a full pass changes no
    /// index or `max_passes` is reached. Pushes the jointly explained energy
    /// once per pass and returns the number of passes used.
    fn cyclic_refine(
        &self,
        selected: &mut Vec<Sel>,
        excluded: &mut [bool],
        trace: &mut Vec<f64>,
        flags: &mut FitFlags,
        max_passes: usize,
    ) -> usize {
        let k = selected.len();
        let mut passes_used = 0;
        if k >= 1 {
            for pass in 1..=max_passes {
                passes_used = pass;
                let mut changed = false;
                for s in 0..k {
                    let mut others = selected.clone();
                    let current = others.remove(s);
                    let q = thin_q(&self.sel_matrix(&others));
                    let mut ex = vec![false; self.scanner.p];
                    for o in &others {
                        ex[o.idx] = true;
                    }
                    let outcome = self.scan(&q, &ex);
                    flags.collinear_skipped |= outcome.skipped_collinear;
                    let Some(hit) = outcome.best else { continue };
                    let e_current = outcome.energies[current.idx];
                    if hit.index != current.idx && hit.energy > e_current {
                        excluded[current.idx] = false;
                        excluded[hit.index] = true;
                        selected[s] = self.make_sel(hit);
                        changed = true;
                    } else if hit.index == current.idx {
                        // Same location: refresh the orientation (free mode).
                        selected[s] = self.make_sel(hit);
                    } else if e_current.is_finite() {
                        // Keep the current source; restore it unchanged.
                        selected[s] = current;
                    }
                }
                let q = thin_q(&self.sel_matrix(selected));
                trace.push((q.transpose() * self.y).norm_squared());
                if !changed {
                    break;
                }
                if pass == max_passes {
                    flags.max_passes_reached = true;
                }
            }
        }
        passes_used
    }
}

/// Convenience wrapper: build a scanner, bind the data, and fit `k` dipoles.
pub fn ap_localize(lfs: &LeadFieldSet, y: &Mat, k: usize, mode: OrientationMode) -> Result<DipoleFit> {
    let scanner = ApScanner::new(lfs, mode)?;
    let session = scanner.session(y)?;
    session.fit(k, DEFAULT_MAX_PASSES)
}
