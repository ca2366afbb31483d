//! Parallel against sequential execution of a small sweep, plus the kernels
//! that dominate a trial.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ddpol_core::bench::{run_sweep_with, Axis, Execution, KPolicy, Method, PilotConfig, Scenario, SweepConfig};
use ddpol_core::channel::{db_to_linear, make_frugal_pilot, sample_paths, synthesize_channel, transmit, PilotKind};
use ddpol_core::cpd::{als_cpd, unfold_channel, CpdOptions};
use ddpol_core::ctd::{ctd_pipeline, DodOptions};
use ddpol_core::exec::rng_for;
use ddpol_core::manifolds::{AngleRanges, ArrayGeometry};

fn sweep_config() -> SweepConfig {
    SweepConfig {
        geometry: ArrayGeometry::half_wavelength(4, 8, 2).unwrap(),
        scenario: Scenario {
            k: KPolicy::Uniform { min: 1, max: 6 },
            kappa_db: 13.2,
            ranges: AngleRanges::default(),
            snr_db: None,
        },
        axis: Axis::Snr(vec![0.0, 10.0, 20.0]),
        methods: vec![Method::Parafac, Method::Ls],
        pilot: PilotConfig { kind: PilotKind::RowOrthogonal, n: None },
        trials: 16,
        als: CpdOptions::default(),
        dod: DodOptions::default(),
    }
}

fn sweep(c: &mut Criterion) {
    let cfg = sweep_config();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, exec) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
        group.bench_with_input(BenchmarkId::new("fig3_small", name), &exec, |b, &exec| {
            b.iter(|| run_sweep_with(black_box(&cfg), 1, exec).unwrap())
        });
    }
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let kappa = db_to_linear(13.2);
    let mut group = c.benchmark_group("kernels");

    let geom = ArrayGeometry::half_wavelength(4, 8, 2).unwrap();
    let mut rng = rng_for(3, 0);
    let params = sample_paths(6, kappa, &AngleRanges::default(), &mut rng).unwrap();
    let unf = unfold_channel(&synthesize_channel(&params, &geom).unwrap(), &geom).unwrap();
    for (name, algebraic_init) in [("algebraic_start", true), ("random_starts", false)] {
        let opts = CpdOptions { algebraic_init, ..CpdOptions::default() };
        group.bench_function(BenchmarkId::new("als_k6", name), |b| {
            b.iter(|| als_cpd(black_box(&unf), 6, &opts).unwrap())
        });
    }

    let geom = ArrayGeometry::half_wavelength(8, 8, 3).unwrap();
    let params = sample_paths(6, kappa, &AngleRanges::default(), &mut rng).unwrap();
    let h = synthesize_channel(&params, &geom).unwrap();
    let pilot = make_frugal_pilot(geom.mt(), 16, &mut rng).unwrap();
    let rx = transmit(&h, &pilot, Some(20.0), &mut rng).unwrap();
    let dod = DodOptions::default();
    group.bench_function("ctd_pipeline_k6", |b| {
        b.iter(|| ctd_pipeline(black_box(&rx), &pilot, 6, &geom, &dod).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sweep, kernels);
criterion_main!(benches);
