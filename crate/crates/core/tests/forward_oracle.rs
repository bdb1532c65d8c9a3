//! Independent numerical oracle for the sphere forward model.
//!
//! Outside a spherically symmetric conductor the magnetic field is curl-free
//! and derives from a scalar potential, and the volume currents contribute
//! nothing to the radial field component, which therefore equals the radial
//! component of the primary (free-space Biot-Savart) dipole field. Those two
//! facts reconstruct the full field without touching the closed form under
//! test:
//!
//! 1. psi(r) = (1/mu0) * integral_{|r|}^{inf} B_primary(s r_hat) . r_hat ds
//! 2. B(r)   = -mu0 * grad psi(r), by central finite differences.
//!
//! The primary field is plain Biot-Savart, the integral is Gauss-Legendre
//! quadrature, and the gradient is numerical, so agreement validates the
//! analytic field including its volume-current contribution.

mod common;

use common::gauss_legendre;
use meg_enum_core::forward::{sphere_dipole_field, SphereHeadModel};
use meg_enum_core::Vec3;

const MU0: f64 = 4.0e-7 * std::f64::consts::PI;
const MU0_OVER_4PI: f64 = 1.0e-7;

/// Free-space field of a point current dipole (Biot-Savart).
fn primary_field(q: &Vec3, r0: &Vec3, at: &Vec3) -> Vec3 {
    let d = at - r0;
    let n = d.norm();
    MU0_OVER_4PI * q.cross(&d) / (n * n * n)
}

/// Magnetic scalar potential from the radial line integral of the primary
/// field, using the substitution s = |r| / u to map (|r|, inf) onto (0, 1].
fn potential(q: &Vec3, r0: &Vec3, at: &Vec3) -> f64 {
    let rn = at.norm();
    let rhat = at / rn;
    let (nodes, weights) = gauss_legendre(48, 0.0, 1.0);
    let mut total = 0.0;
    // 4 panels of 48 nodes keep the quadrature error near machine level.
    for panel in 0..4 {
        let lo = panel as f64 * 0.25;
        for (u, w) in nodes.iter().zip(&weights) {
            let u = lo + 0.25 * u;
            let w = 0.25 * w;
            if u <= 0.0 {
                continue;
            }
            let s = rn / u;
            let b_r = primary_field(q, r0, &(s * rhat)).dot(&rhat);
            total += w * b_r * rn / (u * u);
        }
    }
    total / MU0
}

/// Oracle field: -mu0 grad psi by central differences.
fn oracle_field(q: &Vec3, r0: &Vec3, at: &Vec3) -> Vec3 {
    let h = 2.0e-5;
    let mut grad = Vec3::zeros();
    for axis in 0..3 {
        let mut e = Vec3::zeros();
        e[axis] = h;
        grad[axis] = (potential(q, r0, &(at + e)) - potential(q, r0, &(at - e))) / (2.0 * h);
    }
    -MU0 * grad
}

/// Field vector from the implementation via its three axis projections.
fn implementation_field(head: &SphereHeadModel, dipole: &Vec3, q: &Vec3, at: &Vec3) -> Vec3 {
    Vec3::new(
        sphere_dipole_field(dipole, q, at, &Vec3::x(), head).unwrap(),
        sphere_dipole_field(dipole, q, at, &Vec3::y(), head).unwrap(),
        sphere_dipole_field(dipole, q, at, &Vec3::z(), head).unwrap(),
    )
}

#[test]
fn analytic_field_matches_potential_integral_oracle() {
    let head = SphereHeadModel::new(Vec3::zeros(), 0.09).unwrap();
    // Tangential dipole plus oblique moments, several depths, off-axis
    // sensors; every case compares the full field vector.
    let cases = [
        // (dipole position, moment, sensor position)
        (Vec3::new(0.0, 0.0, 0.05), Vec3::new(1e-8, 0.0, 0.0), Vec3::new(0.03, 0.02, 0.13)),
        (Vec3::new(0.02, -0.01, 0.04), Vec3::new(3e-9, -5e-9, 2e-9), Vec3::new(-0.05, 0.04, 0.11)),
        (Vec3::new(-0.03, 0.03, 0.02), Vec3::new(0.0, 2e-8, 1e-8), Vec3::new(0.1, -0.02, 0.07)),
        (Vec3::new(0.005, 0.006, 0.07), Vec3::new(-4e-9, 1e-9, 6e-9), Vec3::new(0.0, 0.0, 0.14)),
        (Vec3::new(0.04, 0.0, 0.01), Vec3::new(0.0, 0.0, 1e-8), Vec3::new(0.12, 0.03, 0.05)),
    ];
    for (dipole, q, sensor) in cases {
        let implementation = implementation_field(&head, &dipole, &q, &sensor);
        let oracle = oracle_field(&q, &dipole, &sensor);
        let scale = oracle.norm();
        assert!(scale > 0.0, "oracle produced a zero field; bad test case");
        let rel = (implementation - oracle).norm() / scale;
        assert!(
            rel <= 1e-6,
            "field mismatch {rel:.2e} at dipole {dipole:?}, sensor {sensor:?}:\n  impl {implementation:?}\n  oracle {oracle:?}"
        );
    }
}

#[test]
fn analytic_field_matches_oracle_for_shifted_center() {
    // Same physics with the sphere center away from the origin; the oracle
    // works in center-relative coordinates.
    let center = Vec3::new(0.01, -0.02, 0.03);
    let head = SphereHeadModel::new(center, 0.09).unwrap();
    let dipole_rel = Vec3::new(0.025, 0.015, 0.035);
    let q = Vec3::new(2e-9, -7e-9, 4e-9);
    let sensor_rel = Vec3::new(-0.04, 0.06, 0.1);
    let implementation =
        implementation_field(&head, &(center + dipole_rel), &q, &(center + sensor_rel));
    let oracle = oracle_field(&q, &dipole_rel, &sensor_rel);
    let rel = (implementation - oracle).norm() / oracle.norm();
    assert!(rel <= 1e-6, "shifted-center mismatch {rel:.2e}");
}

#[test]
fn radial_component_equals_primary_biot_savart() {
    // The volume-current contribution has no radial component, so the radial
    // projection of the analytic field must equal the primary field's.
    let head = SphereHeadModel::new(Vec3::zeros(), 0.09).unwrap();
    let cases = [
        (Vec3::new(0.01, 0.02, 0.05), Vec3::new(5e-9, -2e-9, 3e-9)),
        (Vec3::new(-0.04, 0.01, 0.03), Vec3::new(1e-8, 1e-8, -6e-9)),
    ];
    for (dipole, q) in cases {
        for sensor in [
            Vec3::new(0.0, 0.05, 0.12),
            Vec3::new(0.08, -0.06, 0.09),
            Vec3::new(-0.11, 0.02, 0.04),
        ] {
            let rhat = sensor.normalize();
            let implementation =
                sphere_dipole_field(&dipole, &q, &sensor, &rhat, &head).unwrap();
            let oracle = primary_field(&q, &dipole, &sensor).dot(&rhat);
            let scale = oracle.abs().max(1e-300);
            assert!(
                (implementation - oracle).abs() / scale <= 1e-10,
                "radial component mismatch: {implementation} vs {oracle}"
            );
        }
    }
}

#[test]
fn field_is_independent_of_the_sphere_radius()
{
    // The closed form depends on the center but not the radius; shrinking
    // the sphere (while keeping the source inside) must not change readings.
    let center = Vec3::zeros();
    let big = SphereHeadModel::new(center, 0.09).unwrap();
    let small = SphereHeadModel::new(center, 0.075).unwrap();
    let dipole = Vec3::new(0.02, -0.01, 0.04);
    let q = Vec3::new(4e-9, 6e-9, -1e-9);
    let sensor = Vec3::new(0.05, 0.04, 0.11);
    let orient = Vec3::new(0.0, 0.6, 0.8);
    let a = sphere_dipole_field(&dipole, &q, &sensor, &orient, &big).unwrap();
    let b = sphere_dipole_field(&dipole, &q, &sensor, &orient, &small).unwrap();
    assert!((a - b).abs() <= 1e-16 * a.abs().max(b.abs()));
}
