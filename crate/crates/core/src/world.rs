//! Desk-scale experiment world: one spherical head, one sensor array, and
//! disjoint quasi-random source grids for simulation and reconstruction with
//! their lead fields.
//!
//! Simulation and reconstruction grids come from different stretches of the
//! same low-discrepancy sequence, so no reconstruction candidate coincides
//! with a true source location (avoiding the inverse crime) while both grids
//! cover the same shell at comparable density. Both grids share one smooth
//! orientation field, so fixed-orientation scanning sees orientations
//! consistent with the simulated truth at nearby points. Registration error
//! is modeled by rigidly translating the reconstruction grid.

use crate::error::{Error, Result};
use crate::forward::{
    build_lead_fields, shell_grid, translate_grid, GridLabel, LeadFieldSet, OrientationField,
    SensorArray, SphereHeadModel,
};
use crate::Vec3;

/// Geometry and sampling parameters for a [`World`].
#[derive(Debug, Clone)]
pub struct WorldConfig {
    /// Number of magnetometers on the sensor shell.
    pub sensor_count: usize,
    /// Radius of the sensor shell in meters.
    pub sensor_shell_radius_m: f64,
    /// Radius of the conducting sphere in meters.
    pub head_radius_m: f64,
    /// Number of simulation-grid points.
    pub sim_points: usize,
    /// Number of reconstruction-grid points.
    pub recon_points: usize,
    /// Inner bound of the source shell as a fraction of the head radius.
    pub shell_inner_frac: f64,
    /// Outer bound of the source shell as a fraction of the head radius.
    pub shell_outer_frac: f64,
    /// Low-discrepancy sequence offset for the simulation grid.
    pub sim_start_index: u64,
    /// Low-discrepancy sequence offset for the reconstruction grid; must
    /// leave the two grids disjoint.
    pub recon_start_index: u64,
    /// Seed of the shared tangential orientation field.
    pub orientation_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            sensor_count: 102,
            sensor_shell_radius_m: 0.12,
            head_radius_m: 0.09,
            sim_points: 2_000,
            recon_points: 5_000,
            shell_inner_frac: 0.35,
            shell_outer_frac: 0.85,
            sim_start_index: 0,
            recon_start_index: 10_000_000,
            orientation_seed: 2_024,
        }
    }
}

impl WorldConfig {
    /// Same geometry, fresh grid realization: new sequence offsets and a new
    /// orientation field. Used to test that calibrated thresholds transfer
    /// between discretizations.
    pub fn with_realization(mut self, sim_start: u64, recon_start: u64, orientation_seed: u64) -> Self {
        self.sim_start_index = sim_start;
        self.recon_start_index = recon_start;
        self.orientation_seed = orientation_seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.sensor_count == 0 || self.sim_points == 0 || self.recon_points == 0 {
            return Err(Error::InvalidInput(
                "world needs at least one sensor, one simulation point, and one reconstruction point"
                    .into(),
            ));
        }
        if !(self.head_radius_m > 0.0 && self.sensor_shell_radius_m > self.head_radius_m) {
            return Err(Error::InvalidInput(format!(
                "sensor shell ({} m) must lie outside the head sphere ({} m)",
                self.sensor_shell_radius_m, self.head_radius_m
            )));
        }
        // Offsets must not interleave the two sequences; demanding an index
        // gap of at least twice the draw budget keeps them provably disjoint
        // (shell rejection uses well under half the candidates in practice).
        let lo = self.sim_start_index.min(self.recon_start_index);
        let hi = self.sim_start_index.max(self.recon_start_index);
        let budget = 100 * (self.sim_points + self.recon_points) as u64;
        if hi - lo < budget {
            return Err(Error::InvalidInput(format!(
                "grid sequence offsets {lo} and {hi} are closer than the draw budget {budget}; \
                 the grids could overlap"
            )));
        }
        Ok(())
    }
}

/// A built world: geometry plus precomputed lead fields for both grids.
#[derive(Debug, Clone)]
pub struct World {
    /// The configuration the world was built from.
    pub config: WorldConfig,
    /// The conducting sphere.
    pub head: SphereHeadModel,
    /// The magnetometer array.
    pub sensors: SensorArray,
    /// The shared tangential orientation field.
    pub orientation_field: OrientationField,
    /// Lead fields over the simulation grid.
    pub sim: LeadFieldSet,
    /// Lead fields over the reconstruction grid (zero registration error).
    pub recon: LeadFieldSet,
}

impl World {
    /// Builds the world, computing both lead-field sets.
    pub fn build(config: &WorldConfig) -> Result<World> {
        config.validate()?;
        let head = SphereHeadModel::new(Vec3::zeros(), config.head_radius_m)?;
        let sensors =
            SensorArray::fibonacci_hemisphere(config.sensor_count, config.sensor_shell_radius_m, &head)?;
        let field = OrientationField::from_seed(config.orientation_seed);
        let sim_grid = shell_grid(
            config.sim_points,
            &head,
            config.shell_inner_frac,
            config.shell_outer_frac,
            config.sim_start_index,
            GridLabel::Simulation,
            Some(&field),
        )?;
        let recon_grid = shell_grid(
            config.recon_points,
            &head,
            config.shell_inner_frac,
            config.shell_outer_frac,
            config.recon_start_index,
            GridLabel::Reconstruction,
            Some(&field),
        )?;
        let sim = build_lead_fields(&sim_grid, &sensors, &head)?;
        let recon = build_lead_fields(&recon_grid, &sensors, &head)?;
        Ok(World {
            config: config.clone(),
            head,
            sensors,
            orientation_field: field,
            sim,
            recon,
        })
    }

    /// Lead fields over the reconstruction grid translated by a registration
    /// error (millimeters). A zero offset reproduces [`World::recon`].
    pub fn recon_variant(&self, error_mm: Vec3) -> Result<LeadFieldSet> {
        let translated = translate_grid(self.recon.grid(), error_mm, &self.head)?;
        if !translated.clamped.is_empty() {
            log::warn!(
                "registration error ({}, {}, {}) mm clamped {} reconstruction points to the sphere",
                error_mm.x,
                error_mm.y,
                error_mm.z,
                translated.clamped.len()
            );
        }
        build_lead_fields(&translated.grid, &self.sensors, &self.head)
    }
}
