//! Parallel vs sequential kernel comparison. The rayon paths and the
//! sequential fallbacks compute bit-identical results; this suite measures
//! what the parallelism buys at separator-shaped sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use demucs::tensor::kernels::{
    conv1d_fwd, conv1d_fwd_seq, conv2d_fwd, conv2d_fwd_seq, convtr1d_fwd, convtr1d_fwd_seq,
    gemm_nt, gemm_nt_seq, Conv1dDims, Conv2dDims, ConvTr1dDims,
};

fn filled(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5).collect()
}

fn bench_conv1d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv1d_fwd");
    // encoder layer 1 and 2 shapes at 5 s of 22 kHz mono, desk config
    for (cin, cout, t) in [(1usize, 4usize, 110_250usize), (4, 8, 27_560), (48, 96, 27_560)] {
        let d = Conv1dDims { batch: 1, c_in: cin, c_out: cout, t_in: t, k: 8, stride: 4 };
        let x = filled(d.batch * cin * t);
        let w = filled(cout * cin * d.k);
        let b = filled(cout);
        let mut out = vec![0.0f32; d.batch * cout * d.t_out()];
        let label = format!("{cin}x{cout}x{t}");
        group.bench_with_input(BenchmarkId::new("par", &label), &d, |bench, d| {
            bench.iter(|| conv1d_fwd(black_box(&x), &w, &b, d, &mut out));
        });
        group.bench_with_input(BenchmarkId::new("seq", &label), &d, |bench, d| {
            bench.iter(|| conv1d_fwd_seq(black_box(&x), &w, &b, d, &mut out));
        });
    }
    group.finish();
}

fn bench_convtr1d(c: &mut Criterion) {
    let mut group = c.benchmark_group("convtr1d_fwd");
    let d = ConvTr1dDims { batch: 1, c_in: 8, c_out: 4, t_in: 6_890, k: 8, stride: 4 };
    let x = filled(d.batch * d.c_in * d.t_in);
    let w = filled(d.c_in * d.c_out * d.k);
    let b = filled(d.c_out);
    let mut out = vec![0.0f32; d.batch * d.c_out * d.t_out()];
    group.bench_function("par", |bench| {
        bench.iter(|| convtr1d_fwd(black_box(&x), &w, &b, &d, &mut out));
    });
    group.bench_function("seq", |bench| {
        bench.iter(|| convtr1d_fwd_seq(black_box(&x), &w, &b, &d, &mut out));
    });
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd");
    // detector block-1 shape: 7 channels, 48 rows, ~200 windows
    let d = Conv2dDims {
        batch: 1,
        c_in: 7,
        c_out: 16,
        h_in: 48,
        w_in: 200,
        kh: 5,
        kw: 5,
        stride: 1,
    };
    let x = filled(d.batch * d.c_in * d.h_in * d.w_in);
    let w = filled(d.c_out * d.c_in * d.kh * d.kw);
    let b = filled(d.c_out);
    let mut out = vec![0.0f32; d.batch * d.c_out * d.h_out() * d.w_out()];
    group.bench_function("par", |bench| {
        bench.iter(|| conv2d_fwd(black_box(&x), &w, &b, &d, &mut out));
    });
    group.bench_function("seq", |bench| {
        bench.iter(|| conv2d_fwd_seq(black_box(&x), &w, &b, &d, &mut out));
    });
    group.finish();
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_nt");
    // paper-scale LSTM gate projection: [B=8, 1536] x [6144, 1536]
    let (m, n, k) = (8usize, 6144usize, 1536usize);
    let a = filled(m * k);
    let b = filled(n * k);
    let mut out = vec![0.0f32; m * n];
    group.bench_function("par", |bench| {
        bench.iter(|| gemm_nt(black_box(&a), &b, m, n, k, &mut out));
    });
    group.bench_function("seq", |bench| {
        bench.iter(|| gemm_nt_seq(black_box(&a), &b, m, n, k, &mut out));
    });
    group.finish();
}

criterion_group!(benches, bench_conv1d, bench_convtr1d, bench_conv2d, bench_gemm);
criterion_main!(benches);
