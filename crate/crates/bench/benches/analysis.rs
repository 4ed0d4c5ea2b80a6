use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use packstate::*;

fn reference() -> PackSystem {
    assemble_system(&PackTopology::reference_2p2s(OcvModel::graphite_nmc())).unwrap()
}

fn point() -> AnalysisPoint {
    AnalysisPoint::new(DVector::from_vec(vec![0.2, 0.25, 0.15, 0.22]), vec![0.0])
}

fn observability(c: &mut Criterion) {
    let sys = reference();
    let p = point();
    c.bench_function("derivative_arrays_3_3", |b| {
        b.iter(|| build_derivative_arrays(&sys, black_box(&p), 3, 3).unwrap())
    });
    let opts = AnalysisOptions::default();
    let mut group = c.benchmark_group("least_orders");
    group.sample_size(10);
    group.bench_function("2p2s_4_4", |b| {
        b.iter(|| find_least_orders(&sys, &p, 4, 4, &opts).unwrap())
    });
    group.finish();
}

fn certification(c: &mut Criterion) {
    let sys = reference();
    let gain = ObserverGain::new(nalgebra::DMatrix::from_element(8, 3, 0.5));
    let region = SocRegion::uniform(4, 0.1, 0.4);
    let shifted = apply_shift(&sys, &default_shift(&sys, 0.01)).unwrap();
    c.bench_function("lipschitz_512", |b| {
        b.iter(|| estimate_lipschitz(&shifted, &gain, &region, 512, 1.1).unwrap())
    });
    let mut group = c.benchmark_group("certify");
    group.sample_size(10);
    group.bench_function("2p2s_default", |b| {
        b.iter(|| certify_gain(&sys, &gain, &region, &CertifyOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, observability, certification);
criterion_main!(benches);
