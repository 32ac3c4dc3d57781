//! Parallel vs sequential comparison for the hot kernels.
//!
//! The crate's data-parallel loops honor a runtime switch
//! (`exec::set_parallel`), so one bench run measures both modes
//! side by side. Building with `--no-default-features` removes rayon
//! entirely, in which case both labels measure the sequential path.

use criterion::{criterion_group, criterion_main, Criterion};

use epban_core::exec;
use epban_core::Tensor;

fn bench_modes<F: Fn()>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    exec::set_parallel(true);
    g.bench_function("parallel", |b| b.iter(&f));
    exec::set_parallel(false);
    g.bench_function("sequential", |b| b.iter(&f));
    exec::set_parallel(true);
    g.finish();
}

fn tensor_of(shape: &[usize], scale: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|i| ((i * 37 % 101) as f32 / 101.0 - 0.5) * scale).collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn benches(c: &mut Criterion) {
    let a = tensor_of(&[192, 24, 16], 1.0);
    let b = tensor_of(&[192, 16, 24], 1.0);
    bench_modes(c, "matmul_batched_192x24x16", || {
        a.matmul(&b).unwrap();
    });

    let x = tensor_of(&[8, 16, 24, 24], 1.0);
    let w = tensor_of(&[16, 16, 3, 3], 0.2);
    bench_modes(c, "conv2d_8x16x24x24_k3", || {
        x.conv2d(&w, None, 1, 1).unwrap();
    });

    let s = tensor_of(&[192, 24, 24], 2.0);
    bench_modes(c, "softmax_192x24x24", || {
        s.softmax(1).unwrap();
    });
}

criterion_group!(kernels, benches);
criterion_main!(kernels);
