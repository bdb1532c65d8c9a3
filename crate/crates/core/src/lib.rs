//! Estimation of the number of simultaneously active dipolar sources in
//! MEG-style sensor-array data.
//!
//! The pipeline is organized bottom-up:
//!
//! * [`forward`]: analytic single-sphere forward model, sensor arrays,
//!   source grids, and lead fields.
//! * [`simulate`]: scenario synthesis with controlled source count,
//!   inter-source correlation, and signal-to-noise ratio.
//! * [`whiten`]: temporal (linear-prediction) and spatial prewhitening for
//!   trial-structured recordings.
//! * [`localize`]: alternating-projections dipole scanning for a fixed
//!   model order.
//! * [`enumerate`]: sequential F-ratio model comparison plus
//!   information-criterion baselines, which turn localizer residuals into a
//!   source-count estimate.
//! * [`calibrate`]: Monte Carlo sweeps that select decision thresholds per
//!   signal-to-noise bin and model order.
//! * [`world`]: a ready-made desk-scale experiment — head, sensor array, and
//!   disjoint simulation/reconstruction grids with lead fields.
//! * [`phantom`]: a shell array of fixed dipoles driven one at a time and
//!   superposed with random delays.
//! * [`io`]: plain-text formats for every artifact, with exact round trips.
//!
//! All positions are meters, moments are ampere-meters, fields are teslas,
//! and time runs in columns of `M x N` matrices (`M` sensors, `N` samples).
//! Every stochastic operation is keyed by an explicit `u64` seed and is
//! bit-reproducible regardless of thread count.

pub mod calibrate;
pub mod enumerate;
pub mod error;
pub mod forward;
pub mod io;
pub mod localize;
pub mod phantom;
pub mod seed;
pub mod simulate;
pub mod special;
pub mod whiten;
pub mod world;

pub use error::{Error, Result};

/// 3-vector used for positions, orientations, and moments (SI units).
pub type Vec3 = nalgebra::Vector3<f64>;
/// Dense dynamically sized matrix of `f64`.
pub type Mat = nalgebra::DMatrix<f64>;
