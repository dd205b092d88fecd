use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mlmeta_bench::{dataset, scenario};
use mlmeta_core::linalg::eigen_sym;
use mlmeta_core::moment::{fit_ssw, MomentOptions};
use mlmeta_core::qform::{davies_cdf, QFormSpec};
use mlmeta_core::reml::{reml_fit, RemlProblem};
use mlmeta_core::simulate::run_rep;
use nalgebra::DMatrix;
use std::hint::black_box;

fn davies(c: &mut Criterion) {
    let mut group = c.benchmark_group("davies_cdf");
    for terms in [4usize, 45, 240] {
        let lambdas: Vec<f64> = (0..terms).map(|i| 0.05 + 1.0 / (1.0 + i as f64)).collect();
        let spec = QFormSpec::new(lambdas);
        let q: f64 = spec.lambdas.iter().sum::<f64>() * 1.3;
        group.bench_with_input(BenchmarkId::from_parameter(terms), &spec, |b, spec| {
            b.iter(|| davies_cdf(black_box(q), spec).unwrap())
        });
    }
    group.finish();
}

fn eigen(c: &mut Criterion) {
    let a = DMatrix::from_fn(25, 25, |i, j| 1.0 / (1.0 + i as f64 + j as f64) + if i == j { 1.0 } else { 0.0 });
    c.bench_function("eigen_sym_25", |b| b.iter(|| eigen_sym(black_box(&a)).unwrap()));
}

fn moment(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_ssw");
    for (m, k) in [(5, 2), (25, 10)] {
        let data = dataset(m, k, 100);
        group.bench_function(format!("M{m}_K{k}_point"), |b| {
            b.iter(|| {
                fit_ssw(
                    black_box(&data),
                    MomentOptions {
                        intervals: false,
                        tests: false,
                        ..Default::default()
                    },
                )
                .unwrap()
            })
        });
        group.bench_function(format!("M{m}_K{k}_full"), |b| {
            b.iter(|| fit_ssw(black_box(&data), MomentOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn reml(c: &mut Criterion) {
    let data = dataset(10, 5, 100);
    let problem = RemlProblem::from_dataset(&data);
    c.bench_function("reml_fit_M10_K5", |b| b.iter(|| reml_fit(black_box(&problem), None)));
    c.bench_function("reml_fit_with_profile_M10_K5", |b| {
        b.iter(|| reml_fit(black_box(&problem), None).with_profile_intervals(&problem, 0.05))
    });
}

fn repetition(c: &mut Criterion) {
    let scn = scenario(10, 5, 100);
    let mut rep = 0;
    c.bench_function("simulation_rep_M10_K5", |b| {
        b.iter(|| {
            rep += 1;
            run_rep(black_box(&scn), rep)
        })
    });
}

criterion_group!(benches, davies, eigen, moment, reml, repetition);
criterion_main!(benches);
