//! Analytic single-sphere forward model.
//!
//! A current dipole inside a spherically symmetric conductor produces a
//! magnetic field outside it that depends only on the dipole moment, its
//! position relative to the sphere center, and the field point; the
//! conductivity profile and the sphere radius drop out. The closed form used
//! here writes the field as
//!
//! ```text
//! B(r) = mu0 / (4 pi F^2) * ( F (Q x r0) - ((Q x r0) . r) grad F )
//! F    = a (r a + r^2 - r0 . r),   a = |r - r0|
//! ```
//!
//! with `r` and `r0` taken relative to the sphere center. Radial dipoles are
//! magnetically silent (`Q x r0 = 0`), and a dipole at the center produces no
//! field at all, so both are rejected as source positions.
//!
//! Sensors are point magnetometers: the reading is the projection of `B`
//! onto the sensor orientation, and the gain of a source point is the `M x 3`
//! matrix mapping moment vectors to the `M` sensor readings.

use crate::error::{Error, Result};
use crate::{Mat, Vec3};
use rayon::prelude::*;

/// `mu0 / (4 pi)` in SI units (T m / A).
const MU0_OVER_4PI: f64 = 1.0e-7;

/// Unit-norm tolerance for orientation vectors.
const UNIT_TOL: f64 = 1.0e-9;

/// Minimum distance from the sphere center for a valid source (m).
const CENTER_TOL: f64 = 1.0e-12;

/// Spherical volume conductor.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereHeadModel {
    pub center: Vec3,
    pub radius: f64,
}

impl SphereHeadModel {
    pub fn new(center: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Geometry(format!(
                "head sphere radius must be positive and finite, got {radius}"
            )));
        }
        Ok(Self { center, radius })
    }
}

/// Array of point magnetometers with unit measurement orientations.
///
/// Every position lies strictly outside the head sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    positions: Vec<Vec3>,
    orientations: Vec<Vec3>,
}

impl SensorArray {
    pub fn new(positions: Vec<Vec3>, orientations: Vec<Vec3>, head: &SphereHeadModel) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("sensor array must contain at least one sensor".into()));
        }
        if positions.len() != orientations.len() {
            return Err(Error::Dimension(format!(
                "{} sensor positions but {} orientations",
                positions.len(),
                orientations.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if (p - head.center).norm() <= head.radius {
                return Err(Error::Geometry(format!(
                    "sensor {i} lies on or inside the head sphere"
                )));
            }
        }
        for (i, o) in orientations.iter().enumerate() {
            check_unit(o, &format!("sensor {i} orientation"))?;
        }
        Ok(Self { positions, orientations })
    }

    /// Quasi-uniform radial magnetometer array on the upper hemisphere of a
    /// measurement shell, laid out along a golden-angle spiral.
    pub fn fibonacci_hemisphere(m: usize, shell_radius: f64, head: &SphereHeadModel) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidInput("sensor count must be positive".into()));
        }
        if shell_radius <= head.radius {
            return Err(Error::Geometry(format!(
                "measurement shell radius {shell_radius} must exceed head radius {}",
                head.radius
            )));
        }
        let golden_angle = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let mut positions = Vec::with_capacity(m);
        let mut orientations = Vec::with_capacity(m);
        for i in 0..m {
            let z = (i as f64 + 0.5) / m as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden_angle * i as f64;
            let dir = Vec3::new(rho * phi.cos(), rho * phi.sin(), z);
            positions.push(head.center + shell_radius * dir);
            orientations.push(dir);
        }
        Self::new(positions, orientations, head)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn orientations(&self) -> &[Vec3] {
        &self.orientations
    }
}

/// Role of a source grid in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridLabel {
    Simulation,
    Reconstruction,
}

impl std::fmt::Display for GridLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridLabel::Simulation => write!(f, "simulation"),
            GridLabel::Reconstruction => write!(f, "reconstruction"),
        }
    }
}

/// Candidate source positions strictly inside the head sphere.
///
/// In fixed-orientation mode every point carries a unit tangential
/// orientation; the field of orientations is smooth in space so that nearby
/// points on different grid realizations agree, the way anatomical normals
/// would.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGrid {
    points: Vec<Vec3>,
    fixed_orientations: Option<Vec<Vec3>>,
    label: GridLabel,
}

impl SourceGrid {
    pub fn new(
        points: Vec<Vec3>,
        fixed_orientations: Option<Vec<Vec3>>,
        label: GridLabel,
        head: &SphereHeadModel,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("source grid must contain at least one point".into()));
        }
        for (i, p) in points.iter().enumerate() {
            let d = (p - head.center).norm();
            if d >= head.radius {
                return Err(Error::Geometry(format!(
                    "grid point {i} lies on or outside the head sphere"
                )));
            }
            if d <= CENTER_TOL {
                return Err(Error::Geometry(format!(
                    "grid point {i} coincides with the sphere center"
                )));
            }
        }
        if let Some(orients) = &fixed_orientations {
            if orients.len() != points.len() {
                return Err(Error::Dimension(format!(
                    "{} grid points but {} fixed orientations",
                    points.len(),
                    orients.len()
                )));
            }
            for (i, o) in orients.iter().enumerate() {
                check_unit(o, &format!("grid point {i} fixed orientation"))?;
            }
        }
        Ok(Self { points, fixed_orientations, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn fixed_orientations(&self) -> Option<&[Vec3]> {
        self.fixed_orientations.as_deref()
    }

    pub fn label(&self) -> GridLabel {
        self.label
    }
}

/// Translation applied to a grid, with any radially clamped points flagged.
#[derive(Debug, Clone)]
pub struct TranslatedGrid {
    pub grid: SourceGrid,
    /// Indices of points that were pulled back inside the sphere.
    pub clamped: Vec<usize>,
}

/// Rigidly translates a grid by an offset given in millimeters.
///
/// Points pushed onto or outside the head sphere are clamped radially to
/// 0.99 of the radius and flagged; fixed orientations travel with their
/// points unchanged, as under a registration error.
pub fn translate_grid(grid: &SourceGrid, offset_mm: Vec3, head: &SphereHeadModel) -> Result<TranslatedGrid> {
    let offset = offset_mm * 1.0e-3;
    let mut clamped = Vec::new();
    let mut points = Vec::with_capacity(grid.len());
    for (i, p) in grid.points().iter().enumerate() {
        let shifted = p + offset;
        let rel = shifted - head.center;
        let d = rel.norm();
        if d <= CENTER_TOL {
            return Err(Error::Geometry(format!(
                "translated grid point {i} coincides with the sphere center"
            )));
        }
        if d >= head.radius {
            clamped.push(i);
            points.push(head.center + rel * (0.99 * head.radius / d));
        } else {
            points.push(shifted);
        }
    }
    let grid = SourceGrid::new(points, grid.fixed_orientations.clone(), grid.label, head)?;
    Ok(TranslatedGrid { grid, clamped })
}

/// Smooth tangential unit-vector field used to assign fixed orientations.
///
/// Three low-frequency sinusoids (wavelengths well above the head scale)
/// define a vector that is projected onto the local tangent plane, so two
/// grids sampled from the same field agree to within a fraction of a degree
/// at millimeter separations.
#[derive(Debug, Clone)]
pub struct OrientationField {
    waves: [Vec3; 3],
    phases: [f64; 3],
}

impl OrientationField {
    pub fn from_seed(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let mut waves = [Vec3::zeros(); 3];
        let mut phases = [0.0; 3];
        for j in 0..3 {
            // Uniform direction times a fixed spatial frequency of 8 rad/m.
            let dir = loop {
                let v = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break v / n;
                }
            };
            waves[j] = 8.0 * dir;
            phases[j] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        Self { waves, phases }
    }

    /// Tangential unit vector at a position given relative to the sphere
    /// center. Falls back to an azimuthal direction where the field happens
    /// to align with the radius.
    pub fn orientation_at(&self, rel: Vec3) -> Vec3 {
        let radial = rel.normalize();
        let v = Vec3::new(
            (self.waves[0].dot(&rel) + self.phases[0]).sin(),
            (self.waves[1].dot(&rel) + self.phases[1]).sin(),
            (self.waves[2].dot(&rel) + self.phases[2]).sin(),
        );
        let mut t = v - radial * v.dot(&radial);
        if t.norm() < 1e-9 {
            t = Vec3::z().cross(&radial);
            if t.norm() < 1e-9 {
                t = Vec3::x().cross(&radial);
            }
        }
        t.normalize()
    }
}

/// Van der Corput radical inverse in the given base, for 1-based indices.
fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let b = base as f64;
    while index > 0 {
        f /= b;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Quasi-random source grid filling a shell of the upper half-ball.
///
/// Points come from the Halton (2, 3, 5) sequence starting at
/// `start_index + 1`; different start indices give disjoint point sets, which
/// is how independent simulation and reconstruction grids are drawn.
pub fn shell_grid(
    n_points: usize,
    head: &SphereHeadModel,
    inner_frac: f64,
    outer_frac: f64,
    start_index: u64,
    label: GridLabel,
    orientation_field: Option<&OrientationField>,
) -> Result<SourceGrid> {
    if n_points == 0 {
        return Err(Error::InvalidInput("grid point count must be positive".into()));
    }
    if !(0.0 <= inner_frac && inner_frac < outer_frac && outer_frac < 1.0) {
        return Err(Error::InvalidInput(format!(
            "shell fractions must satisfy 0 <= inner < outer < 1, got {inner_frac}, {outer_frac}"
        )));
    }
    let mut points = Vec::with_capacity(n_points);
    let mut orientations = orientation_field.map(|_| Vec::with_capacity(n_points));
    let mut index = start_index;
    while points.len() < n_points {
        index += 1;
        let x = 2.0 * halton(index, 2) - 1.0;
        let y = 2.0 * halton(index, 3) - 1.0;
        let z = halton(index, 5);
        let unit = Vec3::new(x, y, z);
        let n = unit.norm();
        if n < inner_frac || n > outer_frac || z <= 0.0 {
            continue;
        }
        let rel = unit * head.radius;
        if let (Some(field), Some(orients)) = (orientation_field, orientations.as_mut()) {
            orients.push(field.orientation_at(rel));
        }
        points.push(head.center + rel);
    }
    SourceGrid::new(points, orientations, label, head)
}

/// Per-point sensor gains for a whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadFieldSet {
    m: usize,
    gains: Vec<Mat>,
    grid: SourceGrid,
}

impl LeadFieldSet {
    /// Number of sensors.
    pub fn sensor_count(&self) -> usize {
        self.m
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// The `M x 3` gain of one grid point.
    pub fn gain(&self, point_index: usize) -> Result<&Mat> {
        self.gains.get(point_index).ok_or_else(|| {
            Error::InvalidInput(format!(
                "point index {point_index} out of range for grid of {}",
                self.gains.len()
            ))
        })
    }

    pub fn grid(&self) -> &SourceGrid {
        &self.grid
    }

    /// Sensor topography of a unit-moment dipole at a grid point.
    pub fn topography(&self, point_index: usize, orientation: &Vec3) -> Result<nalgebra::DVector<f64>> {
        check_unit(orientation, "topography orientation")?;
        let gain = self.gain(point_index)?;
        Ok(gain * orientation)
    }

    /// Topography along the grid's stored fixed orientation.
    pub fn fixed_topography(&self, point_index: usize) -> Result<nalgebra::DVector<f64>> {
        let orients = self.grid.fixed_orientations().ok_or_else(|| {
            Error::InvalidInput("grid carries no fixed orientations".into())
        })?;
        let gain = self.gain(point_index)?;
        Ok(gain * orients[point_index])
    }
}

/// Field projection of one dipole onto one sensor (teslas).
pub fn sphere_dipole_field(
    dipole_location: &Vec3,
    moment: &Vec3,
    sensor_position: &Vec3,
    sensor_orientation: &Vec3,
    head: &SphereHeadModel,
) -> Result<f64> {
    let r0 = dipole_location - head.center;
    let r = sensor_position - head.center;
    validate_source(&r0, head, "dipole")?;
    if r.norm() <= head.radius {
        return Err(Error::Geometry("sensor lies on or inside the head sphere".into()));
    }
    check_unit(sensor_orientation, "sensor orientation")?;
    let row = gain_row(&r0, &r, sensor_orientation)?;
    Ok(row.dot(moment))
}

/// Lead fields for every grid point against every sensor.
pub fn build_lead_fields(
    grid: &SourceGrid,
    sensors: &SensorArray,
    head: &SphereHeadModel,
) -> Result<LeadFieldSet> {
    for (i, p) in grid.points().iter().enumerate() {
        validate_source(&(p - head.center), head, &format!("grid point {i}"))?;
    }
    for (i, p) in sensors.positions().iter().enumerate() {
        if (p - head.center).norm() <= head.radius {
            return Err(Error::Geometry(format!("sensor {i} lies on or inside the head sphere")));
        }
    }
    let m = sensors.len();
    let gains: Vec<Result<Mat>> = grid
        .points()
        .par_iter()
        .map(|point| {
            let r0 = point - head.center;
            let mut gain = Mat::zeros(m, 3);
            for s in 0..m {
                let r = sensors.positions()[s] - head.center;
                let row = gain_row(&r0, &r, &sensors.orientations()[s])?;
                gain[(s, 0)] = row.x;
                gain[(s, 1)] = row.y;
                gain[(s, 2)] = row.z;
            }
            Ok(gain)
        })
        .collect();
    let gains = gains.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LeadFieldSet { m, gains, grid: grid.clone() })
}

/// Gain row `g` such that the sensor reading equals `g . Q` for moment `Q`.
///
/// `r0` and `r` are the dipole and sensor positions relative to the sphere
/// center; `orient` is the unit measurement direction.
fn gain_row(r0: &Vec3, r: &Vec3, orient: &Vec3) -> Result<Vec3> {
    let a_vec = r - r0;
    let a = a_vec.norm();
    let rn = r.norm();
    let adotr = a_vec.dot(r);
    let f = a * (rn * a + rn * rn - r0.dot(r));
    let grad_f = (a * a / rn + adotr / a + 2.0 * a + 2.0 * rn) * r
        - (a + 2.0 * rn + adotr / a) * r0;
    if !f.is_finite() || f.abs() < 1e-300 {
        return Err(Error::Numerical(
            "degenerate geometry in sphere field evaluation".into(),
        ));
    }
    // B(Q) = mu0/(4 pi F^2) (F (Q x r0) - ((Q x r0) . r) grad F); projecting
    // onto the sensor orientation and using the triple-product identity
    // w . (Q x r0) = Q . (r0 x w) turns the reading into a single row.
    let w = (MU0_OVER_4PI / (f * f)) * (f * orient - orient.dot(&grad_f) * r);
    Ok(r0.cross(&w))
}

fn validate_source(r0: &Vec3, head: &SphereHeadModel, what: &str) -> Result<()> {
    let d = r0.norm();
    if d >= head.radius {
        return Err(Error::Geometry(format!("{what} lies on or outside the head sphere")));
    }
    if d <= CENTER_TOL {
        return Err(Error::Geometry(format!("{what} coincides with the sphere center")));
    }
    Ok(())
}

fn check_unit(v: &Vec3, what: &str) -> Result<()> {
    if (v.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::Geometry(format!(
            "{what} must be a unit vector (|v| = {})",
            v.norm()
        )));
    }
    Ok(())
}
