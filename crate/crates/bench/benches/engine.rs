use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use packstate::*;

fn reference() -> PackSystem {
    assemble_system(&PackTopology::reference_2p2s(OcvModel::graphite_nmc())).unwrap()
}

fn soc() -> DVector<f64> {
    DVector::from_vec(vec![0.2, 0.25, 0.15, 0.22])
}

fn step(c: &mut Criterion) {
    let sys = reference();
    let s = soc();
    let x = PackState {
        u: consistent_init(&sys, &s, 1.0).unwrap(),
        s,
    };
    c.bench_function("plant_step_2p2s", |b| {
        b.iter(|| plant_step(&sys, black_box(&x), 1.0, 0.1).unwrap())
    });
    let gain = ObserverGain::zeros(&sys);
    let seg = MeasurementSegment::constant(7.3, 1.0, 0.1);
    c.bench_function("observer_step_2p2s", |b| {
        b.iter(|| observer_step(&sys, &gain, black_box(&x), &seg, 1.0, 0.1).unwrap())
    });
}

fn horizon(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_100s");
    let cell = CellParams::resistive(0.1, 1500.0, OcvModel::graphite_nmc());
    for (ns, np) in [(2, 2), (4, 3), (8, 4)] {
        let sys = assemble_system(&PackTopology::homogeneous(ns, np, cell, false)).unwrap();
        let s0 = DVector::from_fn(ns * np, |k, _| 0.3 + 0.01 * k as f64);
        let profile = CurrentProfile::constant(1.0);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{np}p{ns}s")),
            &sys,
            |b, sys| b.iter(|| simulate(sys, &s0, &profile, 0.1, 100.0, Integrator::Rk4).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, step, horizon);
criterion_main!(benches);
