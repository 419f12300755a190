use std::hint::black_box;

use countdown_bench::Fixture;
use countdown_core::blocked_exec::{
    cats_prepass, dc_prepass, exec_cats, exec_dc, exec_dense, exec_mc, mc_prepass,
};
use countdown_core::costmodel::{cost_table, ShapeSpec};
use countdown_core::numerics::top_m_threshold;
use countdown_core::sparsity::forward_sparse;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn executors(c: &mut Criterion) {
    let mut group = c.benchmark_group("executors_1024x4096");
    for k in [0.7, 0.9] {
        let f = Fixture::new(1024, 4096, 128, k, 7);
        if k == 0.7 {
            group.bench_function("dense", |b| b.iter(|| exec_dense(&f.layer, black_box(&f.x), &f.cfg)));
        }
        group.bench_with_input(BenchmarkId::new("mc", k), &f, |b, f| {
            b.iter(|| {
                let (u, mask, _) = mc_prepass(&f.layer, black_box(&f.x), f.tau_m).unwrap();
                exec_mc(&f.layer, &f.x, &u, &mask, &f.cfg).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("cats", k), &f, |b, f| {
            b.iter(|| {
                let (h, mask, _) = cats_prepass(&f.layer, black_box(&f.x), f.tau_c).unwrap();
                exec_cats(&f.layer, &f.x, &h, &mask, &f.cfg).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("dc_kernels", k), &f, |b, f| {
            b.iter(|| exec_dc(&f.layer, black_box(&f.x), &f.dc_mask, &f.cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dc_prepass", k), &f, |b, f| {
            b.iter(|| dc_prepass(&f.predictor, black_box(&f.x), 0.0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_sparse", k), &f, |b, f| {
            b.iter(|| forward_sparse(&f.layer, black_box(&f.x), &f.dc_mask).unwrap())
        });
    }
    group.finish();
}

fn selection(c: &mut Criterion) {
    let f = Fixture::new(64, 14336, 8, 0.7, 3);
    c.bench_function("top_m_threshold_14336", |b| {
        b.iter(|| top_m_threshold(black_box(&f.u), 4300).unwrap())
    });
    c.bench_function("cost_table_llama", |b| {
        b.iter(|| cost_table(black_box(&ShapeSpec::llama3_8b()), &[0.7, 0.8, 0.9]).unwrap())
    });
}

criterion_group!(benches, executors, selection);
criterion_main!(benches);
