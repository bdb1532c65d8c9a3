//! Plain-text formats for the pipeline's inputs and outputs: geometry and
//! grid CSVs, matrix-shaped measurement and trial files, key-value scenario
//! and calibration configs, threshold and accuracy tables, and structured
//! fit/estimate reports.
//!
//! Readers parse strings and report failures with 1-based line numbers;
//! writers return strings built from the shortest decimal representations
//! that parse back to bit-identical floating-point values, so every
//! write-read round trip is exact. File placement, atomicity, and manifests
//! belong to the caller.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::calibrate::{log_spaced, AccuracyCurve, CalibratedCell, CalibrationGrid};
use crate::enumerate::{EnumerationResult, ThresholdRow, ThresholdTable};
use crate::error::{Error, Result};
use crate::forward::{GridLabel, SensorArray, SourceGrid, SphereHeadModel};
use crate::localize::{DipoleFit, OrientationMode};
use crate::simulate::{CorrelationSpec, MeasurementSet, ScenarioSpec};
use crate::whiten::TrialSet;
use crate::{Mat, Vec3};

// ---------------------------------------------------------------------------
// Key-value configs
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    used: bool,
}

/// A parsed `key = value` file.
///
/// Blank lines and `#` comments are skipped; keys must be unique. Values are
/// consumed with [`KeyValueFile::take`]; [`KeyValueFile::finish`] rejects any
/// key nobody consumed, so misspelled keys fail loudly instead of silently
/// falling back to defaults.
#[derive(Debug)]
pub struct KeyValueFile {
    entries: Vec<Entry>,
}

impl KeyValueFile {
    /// Parse the text of a config file.
    pub fn parse(text: &str) -> Result<KeyValueFile> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::parse(line, format!("expected `key = value`, got '{content}'")));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::parse(line, "empty key before '='"));
            }
            if value.is_empty() {
                return Err(Error::parse(line, format!("key '{key}' has no value")));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(Error::parse(
                    line,
                    format!("duplicate key '{key}' (first set at line {})", prev.line),
                ));
            }
            entries.push(Entry { key: key.to_string(), value: value.to_string(), line, used: false });
        }
        Ok(KeyValueFile { entries })
    }

    /// Consume a key's value, if present, with its line number.
    pub fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let e = self.entries.iter_mut().find(|e| e.key == key)?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    /// Reject any key that was never consumed.
    pub fn finish(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.used) {
            Some(e) => Err(Error::parse(e.line, format!("unknown key '{}'", e.key))),
            None => Ok(()),
        }
    }

    /// Whitespace-separated list under `key`, absent or empty -> `None`.
    pub fn numbers<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<Vec<T>>> {
        let Some((value, line)) = self.take(key) else {
            return Ok(None);
        };
        let parsed = value
            .split_whitespace()
            .map(|tok| {
                tok.parse::<T>()
                    .map_err(|_| Error::parse(line, format!("key '{key}': '{tok}' is not {what}")))
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(Some((parsed, line)).map(|(v, _)| v).filter(|v| !v.is_empty()))
    }

    /// Single value under `key`, falling back to `default` when absent.
    pub fn one<T: FromStr + Copy>(&mut self, key: &str, what: &str, default: T) -> Result<T> {
        match self.numbers::<T>(key, what)? {
            None => Ok(default),
            Some(v) if v.len() == 1 => Ok(v[0]),
            Some(v) => Err(Error::InvalidInput(format!(
                "key '{key}' expects one value, got {}",
                v.len()
            ))),
        }
    }

    /// `(lo, hi)` pair under `key`, absent -> `None`.
    pub fn pair(&mut self, key: &str) -> Result<Option<(f64, f64)>> {
        match self.numbers::<f64>(key, "a number")? {
            None => Ok(None),
            Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
            Some(v) => Err(Error::InvalidInput(format!(
                "key '{key}' expects two values, got {}",
                v.len()
            ))),
        }
    }

    /// `x y z` triple under `key`, falling back to `default` when absent.
    pub fn triple(&mut self, key: &str, default: Vec3) -> Result<Vec3> {
        match self.numbers::<f64>(key, "a number")? {
            None => Ok(default),
            Some(v) if v.len() == 3 => Ok(Vec3::new(v[0], v[1], v[2])),
            Some(v) => Err(Error::InvalidInput(format!(
                "key '{key}' expects three values, got {}",
                v.len()
            ))),
        }
    }

    /// Orientation mode (`fixed` / `free`) under `key`.
    pub fn mode(&mut self, key: &str, default: OrientationMode) -> Result<OrientationMode> {
        match self.take(key) {
            None => Ok(default),
            Some((value, line)) => value
                .parse::<OrientationMode>()
                .map_err(|e| Error::parse(line, e.to_string())),
        }
    }
}

/// A scenario config: the simulation recipe plus the forward-model
/// registration error the estimation side should suffer.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// The simulation recipe.
    pub spec: ScenarioSpec,
    /// Rigid translation of the reconstruction grid, millimeters.
    pub model_error_mm: Vec3,
}

/// Parse a scenario config.
///
/// `q_true` is required; every other key falls back to the common defaults
/// (100 samples, 0 dB, correlation 0.5, 10-30 Hz at 1000 Hz, fixed
/// orientations, no delays, zero model error, seed 0).
pub fn scenario_from_text(text: &str) -> Result<ScenarioConfig> {
    let mut kv = KeyValueFile::parse(text)?;
    let q_true = match kv.one::<usize>("q_true", "a non-negative integer", usize::MAX)? {
        usize::MAX => return Err(Error::InvalidInput("missing required key 'q_true'".into())),
        q => q,
    };
    let spec = ScenarioSpec {
        q_true,
        n_samples: kv.one("n_samples", "a positive integer", 100)?,
        snr_db: kv.one("snr_db", "a number", 0.0)?,
        correlation: CorrelationSpec::Uniform(kv.one("rho", "a number", 0.5)?),
        freq_range_hz: kv.pair("freq_range_hz")?.unwrap_or((10.0, 30.0)),
        sampling_rate_hz: kv.one("sampling_rate_hz", "a number", 1_000.0)?,
        orientation_mode: kv.mode("orientation_mode", OrientationMode::Fixed)?,
        delay_range_ms: kv.pair("delay_range_ms")?,
        seed: kv.one("seed", "an unsigned integer", 0)?,
    };
    let model_error_mm = kv.triple("model_error_mm", Vec3::zeros())?;
    kv.finish()?;
    Ok(ScenarioConfig { spec, model_error_mm })
}

/// Render a scenario config; [`scenario_from_text`] restores it exactly.
pub fn scenario_to_text(config: &ScenarioConfig) -> Result<String> {
    let spec = &config.spec;
    let rho = match &spec.correlation {
        CorrelationSpec::Uniform(rho) => *rho,
        CorrelationSpec::Matrix(_) => {
            return Err(Error::InvalidInput(
                "scenario files carry a single correlation coefficient, not a matrix".into(),
            ))
        }
    };
    let mut s = String::new();
    let _ = writeln!(s, "q_true = {}", spec.q_true);
    let _ = writeln!(s, "n_samples = {}", spec.n_samples);
    let _ = writeln!(s, "snr_db = {}", spec.snr_db);
    let _ = writeln!(s, "rho = {rho}");
    let _ = writeln!(s, "freq_range_hz = {} {}", spec.freq_range_hz.0, spec.freq_range_hz.1);
    let _ = writeln!(s, "sampling_rate_hz = {}", spec.sampling_rate_hz);
    let _ = writeln!(s, "orientation_mode = {}", spec.orientation_mode);
    if let Some((lo, hi)) = spec.delay_range_ms {
        let _ = writeln!(s, "delay_range_ms = {lo} {hi}");
    }
    let _ = writeln!(s, "seed = {}", spec.seed);
    let e = &config.model_error_mm;
    let _ = writeln!(s, "model_error_mm = {} {} {}", e.x, e.y, e.z);
    Ok(s)
}

/// Parse a calibration config on top of an optional preset.
///
/// With a preset, every key is optional and overrides the preset's value.
/// Without one, the sweep bounds `threshold_lo` and `threshold_hi` are
/// required (`threshold_points` defaults to 40); alternatively a preset
/// supplies the whole sweep.
pub fn calibration_grid_from_text(
    text: &str,
    preset: Option<CalibrationGrid>,
) -> Result<CalibrationGrid> {
    let mut kv = KeyValueFile::parse(text)?;
    let has_preset = preset.is_some();
    let mut grid = preset.unwrap_or_default();
    if let Some(v) = kv.numbers::<f64>("snr_levels_db", "a number")? {
        grid.snr_levels_db = v;
    }
    if let Some(v) = kv.numbers::<usize>("q_levels", "a non-negative integer")? {
        grid.q_levels = v;
    }
    if let Some(v) = kv.numbers::<f64>("rho_levels", "a number")? {
        grid.rho_levels = v;
    }
    if let Some((value, line)) = kv.take("model_errors_mm") {
        let nums = value
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(line, format!("'{tok}' is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if nums.is_empty() || nums.len() % 3 != 0 {
            return Err(Error::parse(
                line,
                format!(
                    "model_errors_mm lists x y z triples; got {} numbers",
                    nums.len()
                ),
            ));
        }
        grid.model_errors_mm = nums.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    }
    grid.reps = kv.one("reps", "a positive integer", grid.reps)?;
    grid.n_samples = kv.one("n_samples", "a positive integer", grid.n_samples)?;
    grid.base_seed = kv.one("base_seed", "an unsigned integer", grid.base_seed)?;
    grid.orientation_mode = kv.mode("orientation_mode", grid.orientation_mode)?;
    grid.k_max = kv.one("k_max", "a positive integer", grid.k_max)?;

    let lo = kv.one("threshold_lo", "a number", f64::NAN)?;
    let hi = kv.one("threshold_hi", "a number", f64::NAN)?;
    let points = kv.one("threshold_points", "a positive integer", 40usize)?;
    match (lo.is_nan(), hi.is_nan()) {
        (false, false) => {
            if !(lo > 0.0 && hi > lo) || points < 2 {
                return Err(Error::InvalidInput(format!(
                    "threshold sweep needs 0 < threshold_lo < threshold_hi and at least \
                     2 points, got lo={lo} hi={hi} points={points}"
                )));
            }
            grid.threshold_sweep = log_spaced(lo, hi, points);
        }
        (true, true) if has_preset => {}
        _ => {
            return Err(Error::InvalidInput(
                "calibration sweep is undefined: set both threshold_lo and threshold_hi \
                 (threshold_points is optional), or start from a preset"
                    .into(),
            ))
        }
    }
    kv.finish()?;
    grid.validate()?;
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Geometry CSVs
// ---------------------------------------------------------------------------

fn split_csv_row(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::parse(line, format!("'{tok}' is not a number")))
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::parse(line, format!("'{tok}' is not a non-negative integer")))
}

/// Non-blank lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

const SENSOR_HEADER: &str = "x,y,z,ox,oy,oz";

/// Render a sensor array as CSV (`x,y,z,ox,oy,oz`, SI meters).
pub fn sensors_to_csv(sensors: &SensorArray) -> String {
    let mut s = String::from(SENSOR_HEADER);
    s.push('\n');
    for (p, o) in sensors.positions().iter().zip(sensors.orientations()) {
        let _ = writeln!(s, "{},{},{},{},{},{}", p.x, p.y, p.z, o.x, o.y, o.z);
    }
    s
}

/// Parse a sensor CSV and validate it against the head model.
pub fn sensors_from_csv(text: &str, head: &SphereHeadModel) -> Result<SensorArray> {
    let mut lines = content_lines(text);
    match lines.next() {
        Some((_, h)) if split_csv_row(h) == split_csv_row(SENSOR_HEADER) => {}
        Some((n, h)) => {
            return Err(Error::parse(n, format!("expected header '{SENSOR_HEADER}', got '{h}'")))
        }
        None => return Err(Error::parse(1, "empty sensor file")),
    }
    let mut positions = Vec::new();
    let mut orientations = Vec::new();
    for (n, row) in lines {
        let f = split_csv_row(row);
        if f.len() != 6 {
            return Err(Error::parse(n, format!("expected 6 fields, got {}", f.len())));
        }
        let v: Vec<f64> = f.iter().map(|t| parse_f64(t, n)).collect::<Result<_>>()?;
        positions.push(Vec3::new(v[0], v[1], v[2]));
        orientations.push(Vec3::new(v[3], v[4], v[5]));
    }
    SensorArray::new(positions, orientations, head)
}

const GRID_HEADER_FIXED: &str = "x,y,z,ox,oy,oz";
const GRID_HEADER_FREE: &str = "x,y,z";

/// Render a source grid as CSV; orientation columns appear only when the
/// grid carries fixed orientations.
pub fn grid_to_csv(grid: &SourceGrid) -> String {
    let mut s = String::new();
    match grid.fixed_orientations() {
        Some(orients) => {
            s.push_str(GRID_HEADER_FIXED);
            s.push('\n');
            for (p, o) in grid.points().iter().zip(orients) {
                let _ = writeln!(s, "{},{},{},{},{},{}", p.x, p.y, p.z, o.x, o.y, o.z);
            }
        }
        None => {
            s.push_str(GRID_HEADER_FREE);
            s.push('\n');
            for p in grid.points() {
                let _ = writeln!(s, "{},{},{}", p.x, p.y, p.z);
            }
        }
    }
    s
}

/// Parse a grid CSV; the header decides whether the grid is fixed-orientation.
pub fn grid_from_csv(text: &str, label: GridLabel, head: &SphereHeadModel) -> Result<SourceGrid> {
    let mut lines = content_lines(text);
    let with_orients = match lines.next() {
        Some((_, h)) if split_csv_row(h) == split_csv_row(GRID_HEADER_FIXED) => true,
        Some((_, h)) if split_csv_row(h) == split_csv_row(GRID_HEADER_FREE) => false,
        Some((n, h)) => {
            return Err(Error::parse(
                n,
                format!("expected header '{GRID_HEADER_FREE}' or '{GRID_HEADER_FIXED}', got '{h}'"),
            ))
        }
        None => return Err(Error::parse(1, "empty grid file")),
    };
    let want = if with_orients { 6 } else { 3 };
    let mut points = Vec::new();
    let mut orients = Vec::new();
    for (n, row) in lines {
        let f = split_csv_row(row);
        if f.len() != want {
            return Err(Error::parse(n, format!("expected {want} fields, got {}", f.len())));
        }
        let v: Vec<f64> = f.iter().map(|t| parse_f64(t, n)).collect::<Result<_>>()?;
        points.push(Vec3::new(v[0], v[1], v[2]));
        if with_orients {
            orients.push(Vec3::new(v[3], v[4], v[5]));
        }
    }
    SourceGrid::new(points, with_orients.then_some(orients), label, head)
}

// ---------------------------------------------------------------------------
// Matrix-shaped files
// ---------------------------------------------------------------------------

/// Append a matrix as whitespace-separated scientific-notation rows, which
/// keeps tesla-scale magnitudes compact while preserving exact values.
fn push_matrix(s: &mut String, x: &Mat) {
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if j > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:e}", x[(i, j)]);
        }
        s.push('\n');
    }
}

fn parse_matrix_rows<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    m: usize,
    n: usize,
    what: &str,
) -> Result<Mat> {
    let mut x = Mat::zeros(m, n);
    for i in 0..m {
        let Some((ln, row)) = lines.next() else {
            return Err(Error::InvalidInput(format!(
                "{what} ended early: expected {m} rows, got {i}"
            )));
        };
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() != n {
            return Err(Error::parse(ln, format!("expected {n} values, got {}", toks.len())));
        }
        for (j, tok) in toks.iter().enumerate() {
            x[(i, j)] = parse_f64(tok, ln)?;
        }
    }
    Ok(x)
}

/// Render a measurement: header `M N sampling_rate_hz`, then the data matrix.
pub fn measurement_to_text(ms: &MeasurementSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {} {}", ms.m(), ms.n(), ms.sampling_rate_hz);
    push_matrix(&mut s, &ms.data);
    s
}

/// Parse a measurement file. The file stores observed data only, so the
/// result has no clean field and no recorded noise level.
pub fn measurement_from_text(text: &str) -> Result<MeasurementSet> {
    let mut lines = content_lines(text);
    let Some((ln, header)) = lines.next() else {
        return Err(Error::parse(1, "empty measurement file"));
    };
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(Error::parse(
            ln,
            format!("expected header 'M N sampling_rate_hz', got '{header}'"),
        ));
    }
    let m = parse_usize(toks[0], ln)?;
    let n = parse_usize(toks[1], ln)?;
    let fs = parse_f64(toks[2], ln)?;
    if m == 0 || n == 0 || !(fs.is_finite() && fs > 0.0) {
        return Err(Error::parse(ln, format!("degenerate measurement header '{header}'")));
    }
    let data = parse_matrix_rows(&mut lines, m, n, "measurement")?;
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(ln, format!("trailing content after {m} data rows")));
    }
    Ok(MeasurementSet { data, sampling_rate_hz: fs, noise_sigma: 0.0, clean: None })
}

/// Render a trial set: header `T M N_total baseline_samples`, then T
/// concatenated data matrices.
pub fn trials_to_text(trials: &TrialSet) -> String {
    let mut s = String::new();
    let (m, n) = trials.trials.first().map(|t| t.shape()).unwrap_or((0, 0));
    let _ = writeln!(s, "{} {} {} {}", trials.trials.len(), m, n, trials.baseline_samples);
    for t in &trials.trials {
        push_matrix(&mut s, t);
    }
    s
}

/// Parse a trial-set file. The format does not carry a sampling rate, so the
/// caller supplies one.
pub fn trials_from_text(text: &str, sampling_rate_hz: f64) -> Result<TrialSet> {
    let mut lines = content_lines(text);
    let Some((ln, header)) = lines.next() else {
        return Err(Error::parse(1, "empty trial file"));
    };
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 4 {
        return Err(Error::parse(
            ln,
            format!("expected header 'T M N_total baseline_samples', got '{header}'"),
        ));
    }
    let t = parse_usize(toks[0], ln)?;
    let m = parse_usize(toks[1], ln)?;
    let n = parse_usize(toks[2], ln)?;
    let baseline = parse_usize(toks[3], ln)?;
    if t == 0 || m == 0 || n == 0 {
        return Err(Error::parse(ln, format!("degenerate trial header '{header}'")));
    }
    let mut blocks = Vec::with_capacity(t);
    for k in 0..t {
        blocks.push(parse_matrix_rows(&mut lines, m, n, &format!("trial {k}"))?);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(ln, format!("trailing content after {t} trials")));
    }
    let set = TrialSet { trials: blocks, baseline_samples: baseline, sampling_rate_hz };
    set.validate()?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// Threshold and accuracy tables
// ---------------------------------------------------------------------------

const THRESHOLD_HEADER: &str = "snr_db,k_reduced,threshold";
const CALIBRATED_HEADER: &str = "snr_db,k_reduced,threshold,mean_accuracy";
const CURVES_HEADER: &str = "snr_db,q_true,threshold,accuracy";

/// Render a threshold table (`snr_db,k_reduced,threshold`).
pub fn threshold_table_to_csv(table: &ThresholdTable) -> String {
    let mut s = String::from(THRESHOLD_HEADER);
    s.push('\n');
    for row in table.rows() {
        let _ = writeln!(s, "{},{},{}", row.snr_db, row.k, row.threshold);
    }
    s
}

/// Render a calibrated table with each row's mean accuracy
/// (`snr_db,k_reduced,threshold,mean_accuracy`).
///
/// A row's accuracy comes from the cell calibrated at its order; rows below
/// a bin's smallest calibrated order inherited that cell's threshold, so
/// they carry its accuracy too.
pub fn calibrated_table_to_csv(table: &ThresholdTable, cells: &[CalibratedCell]) -> Result<String> {
    let mut s = String::from(CALIBRATED_HEADER);
    s.push('\n');
    for row in table.rows() {
        let exact = cells.iter().find(|c| c.snr_db == row.snr_db && c.q_true == row.k);
        let donor = exact.or_else(|| {
            cells
                .iter()
                .filter(|c| c.snr_db == row.snr_db && c.q_true > row.k)
                .min_by_key(|c| c.q_true)
        });
        let Some(cell) = donor else {
            return Err(Error::InvalidInput(format!(
                "no calibrated cell covers table row (snr {} dB, order {})",
                row.snr_db, row.k
            )));
        };
        let _ = writeln!(s, "{},{},{},{}", row.snr_db, row.k, row.threshold, cell.mean_accuracy);
    }
    Ok(s)
}

/// Parse a threshold table CSV, with or without the accuracy column.
pub fn threshold_table_from_csv(text: &str) -> Result<ThresholdTable> {
    let mut lines = content_lines(text);
    let with_accuracy = match lines.next() {
        Some((_, h)) if split_csv_row(h) == split_csv_row(THRESHOLD_HEADER) => false,
        Some((_, h)) if split_csv_row(h) == split_csv_row(CALIBRATED_HEADER) => true,
        Some((n, h)) => {
            return Err(Error::parse(
                n,
                format!("expected header '{THRESHOLD_HEADER}[,mean_accuracy]', got '{h}'"),
            ))
        }
        None => return Err(Error::parse(1, "empty threshold file")),
    };
    let want = if with_accuracy { 4 } else { 3 };
    let mut rows = Vec::new();
    for (n, row) in lines {
        let f = split_csv_row(row);
        if f.len() != want {
            return Err(Error::parse(n, format!("expected {want} fields, got {}", f.len())));
        }
        rows.push(ThresholdRow {
            snr_db: parse_f64(f[0], n)?,
            k: parse_usize(f[1], n)?,
            threshold: parse_f64(f[2], n)?,
        });
        if with_accuracy {
            parse_f64(f[3], n)?;
        }
    }
    ThresholdTable::new(&rows)
}

/// Render accuracy-versus-threshold curves
/// (`snr_db,q_true,threshold,accuracy`, one row per candidate per cell).
pub fn curves_to_csv(curves: &[AccuracyCurve]) -> String {
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for c in curves {
        for (threshold, accuracy) in &c.points {
            let _ = writeln!(s, "{},{},{},{}", c.snr_db, c.q_true, threshold, accuracy);
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Structured reports
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct FitReport {
    point_indices: Vec<usize>,
    locations_m: Vec<[f64; 3]>,
    orientations: Vec<[f64; 3]>,
    residual_ss: f64,
    total_ss: f64,
    passes_used: usize,
    collinear_skipped: bool,
    silent_source: bool,
    max_passes_reached: bool,
}

/// Render a dipole fit as a JSON report, resolving grid indices to meters.
pub fn fit_report_json(fit: &DipoleFit, grid: &SourceGrid) -> Result<String> {
    let locations_m = fit
        .point_indices
        .iter()
        .map(|&i| {
            grid.points().get(i).map(|p| [p.x, p.y, p.z]).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "fit references grid point {i} but the grid has {} points",
                    grid.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = FitReport {
        point_indices: fit.point_indices.clone(),
        locations_m,
        orientations: fit.orientations.iter().map(|o| [o.x, o.y, o.z]).collect(),
        residual_ss: fit.residual_ss,
        total_ss: fit.total_ss,
        passes_used: fit.passes_used,
        collinear_skipped: fit.flags.collinear_skipped,
        silent_source: fit.flags.silent_source,
        max_passes_reached: fit.flags.max_passes_reached,
    };
    serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("fit report serialization failed: {e}")))
}

#[derive(serde::Serialize)]
struct StepReport {
    k: usize,
    f: f64,
    threshold: f64,
    continued: bool,
    ss_reduced: f64,
    ss_full: f64,
    dof_reduced: usize,
    dof_full: usize,
    perfect_reduced: bool,
    perfect_full: bool,
    residual_increased: bool,
}

#[derive(serde::Serialize)]
struct EnumerationReport {
    q_hat: usize,
    saturated: bool,
    steps: Vec<StepReport>,
}

/// Render a sequential estimate as a JSON report with every comparison.
pub fn enumeration_report_json(result: &EnumerationResult) -> Result<String> {
    let report = EnumerationReport {
        q_hat: result.q_hat,
        saturated: result.saturated,
        steps: result
            .steps
            .iter()
            .map(|d| StepReport {
                k: d.step.k,
                f: d.step.f,
                threshold: d.threshold,
                continued: d.continued,
                ss_reduced: d.step.ss_reduced,
                ss_full: d.step.ss_full,
                dof_reduced: d.step.dof_reduced,
                dof_full: d.step.dof_full,
                perfect_reduced: d.step.perfect_reduced,
                perfect_full: d.step.perfect_full,
                residual_increased: d.step.residual_increased,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("estimate report serialization failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumerate::{DecisionStep, FStep};
    use crate::forward::{shell_grid, OrientationField};

    fn head() -> SphereHeadModel {
        SphereHeadModel::new(Vec3::zeros(), 0.09).unwrap()
    }

    #[test]
    fn key_value_parser_reports_malformed_lines() {
        let mut kv = KeyValueFile::parse("# comment\n\n a = 1 \nb = 2\n").unwrap();
        assert_eq!(kv.take("a"), Some(("1".into(), 3)));
        assert_eq!(kv.take("b"), Some(("2".into(), 4)));
        kv.finish().unwrap();

        match KeyValueFile::parse("a = 1\na = 2\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("duplicate key not caught: {other:?}"),
        }
        match KeyValueFile::parse("just words\n") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("missing '=' not caught: {other:?}"),
        }
        let kv = KeyValueFile::parse("typo_key = 3\n").unwrap();
        match kv.finish() {
            Err(Error::Parse { line: 1, msg }) => assert!(msg.contains("typo_key")),
            other => panic!("unknown key not caught: {other:?}"),
        }
    }

    #[test]
    fn scenario_config_round_trips_exactly() {
        let config = ScenarioConfig {
            spec: ScenarioSpec {
                q_true: 3,
                n_samples: 250,
                snr_db: f64::INFINITY,
                correlation: CorrelationSpec::Uniform(0.7),
                freq_range_hz: (12.5, 27.25),
                sampling_rate_hz: 1_250.0,
                orientation_mode: OrientationMode::Free,
                delay_range_ms: Some((0.0, 50.0)),
                seed: u64::MAX,
            },
            model_error_mm: Vec3::new(1.0, -0.5, 0.25),
        };
        let text = scenario_to_text(&config).unwrap();
        let back = scenario_from_text(&text).unwrap();
        assert_eq!(back.spec.q_true, 3);
        assert_eq!(back.spec.n_samples, 250);
        assert_eq!(back.spec.snr_db, f64::INFINITY);
        match back.spec.correlation {
            CorrelationSpec::Uniform(rho) => assert_eq!(rho, 0.7),
            _ => panic!("expected uniform correlation"),
        }
        assert_eq!(back.spec.freq_range_hz, (12.5, 27.25));
        assert_eq!(back.spec.sampling_rate_hz, 1_250.0);
        assert_eq!(back.spec.orientation_mode, OrientationMode::Free);
        assert_eq!(back.spec.delay_range_ms, Some((0.0, 50.0)));
        assert_eq!(back.spec.seed, u64::MAX);
        assert_eq!(back.model_error_mm, config.model_error_mm);
    }

    #[test]
    fn scenario_defaults_fill_everything_but_the_count() {
        let config = scenario_from_text("q_true = 2\n").unwrap();
        assert_eq!(config.spec.q_true, 2);
        assert_eq!(config.spec.n_samples, 100);
        assert_eq!(config.spec.snr_db, 0.0);
        assert_eq!(config.spec.orientation_mode, OrientationMode::Fixed);
        assert_eq!(config.spec.delay_range_ms, None);
        assert_eq!(config.model_error_mm, Vec3::zeros());

        assert!(scenario_from_text("snr_db = 4\n").is_err());
        assert!(scenario_from_text("q_true = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn sensor_csv_round_trips_bitwise() {
        let head = head();
        let sensors = SensorArray::fibonacci_hemisphere(16, 0.12, &head).unwrap();
        let text = sensors_to_csv(&sensors);
        let back = sensors_from_csv(&text, &head).unwrap();
        assert_eq!(back.positions(), sensors.positions());
        assert_eq!(back.orientations(), sensors.orientations());

        match sensors_from_csv("x,y,z\n", &head) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("bad header not caught: {other:?}"),
        }
    }

    #[test]
    fn grid_csv_round_trips_with_and_without_orientations() {
        let head = head();
        let field = OrientationField::from_seed(7);
        let fixed = shell_grid(40, &head, 0.35, 0.85, 0, GridLabel::Simulation, Some(&field)).unwrap();
        let back = grid_from_csv(&grid_to_csv(&fixed), GridLabel::Simulation, &head).unwrap();
        assert_eq!(back.points(), fixed.points());
        assert_eq!(back.fixed_orientations().unwrap(), fixed.fixed_orientations().unwrap());

        let free = shell_grid(40, &head, 0.35, 0.85, 0, GridLabel::Reconstruction, None).unwrap();
        let back = grid_from_csv(&grid_to_csv(&free), GridLabel::Reconstruction, &head).unwrap();
        assert_eq!(back.points(), free.points());
        assert!(back.fixed_orientations().is_none());
    }

    #[test]
    fn measurement_file_round_trips_bitwise() {
        let data = Mat::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 - 7.3) * 1.7e-13);
        let ms = MeasurementSet { data, sampling_rate_hz: 1_000.0, noise_sigma: 0.1, clean: None };
        let back = measurement_from_text(&measurement_to_text(&ms)).unwrap();
        assert_eq!(back.data, ms.data);
        assert_eq!(back.sampling_rate_hz, 1_000.0);

        match measurement_from_text("3 5 1000\n1 2 3 4 5\n1 2 3\n1 2 3 4 5\n") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("short row not caught: {other:?}"),
        }
        assert!(measurement_from_text("2 2 1000\n1 2\n3 4\n5 6\n").is_err());
        assert!(measurement_from_text("").is_err());
    }

    #[test]
    fn trial_file_round_trips_and_validates_windows() {
        let trials = TrialSet {
            trials: (0..3)
                .map(|t| Mat::from_fn(2, 6, |i, j| (t * 100 + i * 10 + j) as f64 * 0.125))
                .collect(),
            baseline_samples: 2,
            sampling_rate_hz: 500.0,
        };
        let back = trials_from_text(&trials_to_text(&trials), 500.0).unwrap();
        assert_eq!(back.trials, trials.trials);
        assert_eq!(back.baseline_samples, 2);

        // Baseline swallowing the whole window fails the trial-set contract.
        assert!(trials_from_text("1 2 3 3\n1 2 3\n4 5 6\n", 500.0).is_err());
    }

    #[test]
    fn threshold_csv_round_trips_and_carries_accuracy() {
        let rows = vec![
            ThresholdRow { snr_db: -4.0, k: 0, threshold: 1.21 },
            ThresholdRow { snr_db: -4.0, k: 1, threshold: 1.21 },
            ThresholdRow { snr_db: -4.0, k: 2, threshold: 1.09 },
        ];
        let table = ThresholdTable::new(&rows).unwrap();
        let back = threshold_table_from_csv(&threshold_table_to_csv(&table)).unwrap();
        assert_eq!(back.rows(), table.rows());

        // Order 0 inherited order 1's threshold, so it reports that accuracy.
        let cells = vec![
            CalibratedCell { snr_db: -4.0, q_true: 1, threshold: 1.21, mean_accuracy: 0.75 },
            CalibratedCell { snr_db: -4.0, q_true: 2, threshold: 1.09, mean_accuracy: 0.5 },
        ];
        let text = calibrated_table_to_csv(&table, &cells).unwrap();
        assert_eq!(
            text,
            "snr_db,k_reduced,threshold,mean_accuracy\n\
             -4,0,1.21,0.75\n-4,1,1.21,0.75\n-4,2,1.09,0.5\n"
        );
        let back = threshold_table_from_csv(&text).unwrap();
        assert_eq!(back.rows(), table.rows());

        assert!(threshold_table_from_csv("snr,k,t\n").is_err());
    }

    #[test]
    fn curves_csv_lists_every_candidate_point() {
        let curves = vec![AccuracyCurve {
            snr_db: 0.0,
            q_true: 2,
            points: vec![(1.0, 0.25), (1.5, 0.75)],
            attempted: 4,
            failed: 0,
        }];
        assert_eq!(
            curves_to_csv(&curves),
            "snr_db,q_true,threshold,accuracy\n0,2,1,0.25\n0,2,1.5,0.75\n"
        );
    }

    #[test]
    fn calibration_text_needs_sweep_bounds_unless_preset() {
        let err = calibration_grid_from_text("reps = 2\n", None).unwrap_err();
        assert!(err.to_string().contains("threshold_lo"), "unhelpful error: {err}");

        let grid = calibration_grid_from_text(
            "snr_levels_db = -4 0 4\n\
             q_levels = 1 2\n\
             rho_levels = 0.5\n\
             model_errors_mm = 1 0 0  0 0 1\n\
             reps = 3\n\
             threshold_lo = 1.0\n\
             threshold_hi = 2.0\n\
             threshold_points = 10\n\
             orientation_mode = free\n",
            None,
        )
        .unwrap();
        assert_eq!(grid.snr_levels_db, vec![-4.0, 0.0, 4.0]);
        assert_eq!(grid.q_levels, vec![1, 2]);
        assert_eq!(grid.model_errors_mm.len(), 2);
        assert_eq!(grid.model_errors_mm[1], Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(grid.reps, 3);
        assert_eq!(grid.threshold_sweep.len(), 10);
        assert_eq!(grid.threshold_sweep[0], 1.0);
        assert!((grid.threshold_sweep[9] - 2.0).abs() < 1e-12);
        assert_eq!(grid.orientation_mode, OrientationMode::Free);

        // A preset supplies the sweep; keys still override scalars.
        let grid =
            calibration_grid_from_text("reps = 7\n", Some(CalibrationGrid::desk(1))).unwrap();
        assert_eq!(grid.reps, 7);
        assert_eq!(grid.threshold_sweep.len(), 40);

        assert!(calibration_grid_from_text("model_errors_mm = 1 0\nthreshold_lo = 1\nthreshold_hi = 2\n", None).is_err());
    }

    #[test]
    fn reports_serialize_fits_and_estimates() {
        let head = head();
        let grid = shell_grid(10, &head, 0.35, 0.85, 0, GridLabel::Reconstruction, None).unwrap();
        let fit = DipoleFit {
            point_indices: vec![4, 7],
            orientations: vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)],
            amplitudes: Mat::zeros(2, 6),
            residual_ss: 0.25,
            total_ss: 2.0,
            passes_used: 3,
            objective_trace: vec![1.0, 1.75],
            flags: Default::default(),
        };
        let report: serde_json::Value =
            serde_json::from_str(&fit_report_json(&fit, &grid).unwrap()).unwrap();
        assert_eq!(report["point_indices"][1], 7);
        assert_eq!(report["locations_m"][0][0], grid.points()[4].x);
        assert_eq!(report["residual_ss"], 0.25);
        assert_eq!(report["passes_used"], 3);
        assert_eq!(report["silent_source"], false);

        let bad = DipoleFit { point_indices: vec![99], ..fit };
        assert!(fit_report_json(&bad, &grid).is_err());

        let est = EnumerationResult {
            q_hat: 1,
            saturated: false,
            steps: vec![DecisionStep {
                step: FStep {
                    k: 0,
                    ss_reduced: 2.0,
                    ss_full: 1.0,
                    dof_reduced: 600,
                    dof_full: 594,
                    f: 99.0,
                    perfect_reduced: false,
                    perfect_full: false,
                    residual_increased: false,
                },
                threshold: 1.2,
                continued: true,
            }],
        };
        let report: serde_json::Value =
            serde_json::from_str(&enumeration_report_json(&est).unwrap()).unwrap();
        assert_eq!(report["q_hat"], 1);
        assert_eq!(report["steps"][0]["f"], 99.0);
        assert_eq!(report["steps"][0]["continued"], true);
    }
}
