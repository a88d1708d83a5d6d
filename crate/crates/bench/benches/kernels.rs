use std::hint::black_box;
use std::rc::Rc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use depthart::tensor::{AttentionMask, Graph, Tensor};

fn tensor(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7919) % 97) as f32 / 97.0 - 0.5)
}

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64, 128, 256] {
        let (a, b) = (tensor(&[n, n]), tensor(&[n, n]));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    // Sequence lengths of the default layout: image plus depth tokens.
    for t in [86, 170] {
        let (q, k, v) = (tensor(&[4 * t, 128]), tensor(&[4 * t, 128]), tensor(&[4 * t, 128]));
        let mask = Rc::new(AttentionMask::from_fn(t, |i, j| j <= i).unwrap());
        group.bench_with_input(BenchmarkId::new("forward_backward", t), &t, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (q, k, v) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
                let out = g.attention(q, k, v, 4, Rc::clone(&mask)).unwrap();
                let loss = g.sum(out);
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gemm, attention);
criterion_main!(benches);
