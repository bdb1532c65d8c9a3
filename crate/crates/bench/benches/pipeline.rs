//! Hot-path benchmarks: forward-model assembly, trial whitening, AP dipole
//! fits, the sequential F cascade, and the F-quantile solver.
//!
//! Sizes are trimmed (48 sensors, 1,200-point grid) so a full run stays in
//! the seconds range while preserving the asymptotic shape of the real
//! desk-scale workloads.

use criterion::{criterion_group, criterion_main, Criterion};
use meg_enum_core::enumerate::{f_cascade, nominal_threshold, SequentialConfig};
use meg_enum_core::forward::{
    build_lead_fields, shell_grid, GridLabel, LeadFieldSet, OrientationField, SensorArray,
    SphereHeadModel,
};
use meg_enum_core::localize::{ApScanner, OrientationMode};
use meg_enum_core::simulate::{run_scenario, ScenarioSpec};
use meg_enum_core::whiten::{whiten_pipeline, TrialSet};
use meg_enum_core::Mat;

fn bench_world() -> (SphereHeadModel, SensorArray, OrientationField) {
    let head = SphereHeadModel::new(meg_enum_core::Vec3::zeros(), 0.09).unwrap();
    let sensors = SensorArray::fibonacci_hemisphere(48, 0.12, &head).unwrap();
    let field = OrientationField::from_seed(7);
    (head, sensors, field)
}

fn bench_fields(points: usize) -> LeadFieldSet {
    let (head, sensors, field) = bench_world();
    let grid =
        shell_grid(points, &head, 0.35, 0.85, 0, GridLabel::Reconstruction, Some(&field)).unwrap();
    build_lead_fields(&grid, &sensors, &head).unwrap()
}

fn forward_benches(c: &mut Criterion) {
    let (head, sensors, field) = bench_world();
    c.bench_function("forward/lead_fields_1200pts", |b| {
        b.iter(|| {
            let grid = shell_grid(
                1_200,
                &head,
                0.35,
                0.85,
                0,
                GridLabel::Reconstruction,
                Some(&field),
            )
            .unwrap();
            build_lead_fields(&grid, &sensors, &head).unwrap()
        })
    });
}

fn whiten_benches(c: &mut Criterion) {
    let lfs = bench_fields(600);
    let mut spec = ScenarioSpec::new(2, 300, 0.0, 0.5, 11);
    spec.orientation_mode = OrientationMode::Fixed;
    let trials: Vec<Mat> = (0..20)
        .map(|t| {
            let mut s = spec.clone();
            s.seed = 100 + t;
            run_scenario(&s, &lfs, &lfs).unwrap().0.data
        })
        .collect();
    let set = TrialSet { trials, baseline_samples: 100, sampling_rate_hz: 1_000.0 };
    c.bench_function("whiten/pipeline_20x48x300", |b| {
        b.iter(|| whiten_pipeline(&set, 6, 0.1).unwrap())
    });
}

fn localize_benches(c: &mut Criterion) {
    let lfs = bench_fields(1_200);
    let mut spec = ScenarioSpec::new(3, 100, 0.0, 0.5, 13);
    spec.orientation_mode = OrientationMode::Fixed;
    let (ms, _) = run_scenario(&spec, &lfs, &lfs).unwrap();
    let scanner = ApScanner::new(&lfs, OrientationMode::Fixed).unwrap();
    let cfg = SequentialConfig::default();

    c.bench_function("localize/ap_fit_k3_1200pts", |b| {
        let session = scanner.session(&ms.data).unwrap();
        b.iter(|| session.fit(3, cfg.max_passes).unwrap())
    });
    c.bench_function("enumerate/f_cascade_k6_1200pts", |b| {
        let session = scanner.session(&ms.data).unwrap();
        b.iter(|| f_cascade(&session, &cfg).unwrap())
    });
}

fn quantile_benches(c: &mut Criterion) {
    c.bench_function("enumerate/nominal_threshold_dof10k", |b| {
        b.iter(|| nominal_threshold(10_200, 10_097, 0.05).unwrap())
    });
}

criterion_group!(
    benches,
    forward_benches,
    whiten_benches,
    localize_benches,
    quantile_benches
);
criterion_main!(benches);
