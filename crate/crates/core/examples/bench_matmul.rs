//! Quick matmul throughput probe used to size the toy training configs.

use std::time::Instant;

use smap::tensor::matmul_kernel;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.123).sin()).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.321).cos()).collect();
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let c = matmul_kernel(&a, m, k, false, &b, k, n, false);
        sink += c[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * iters) as f64;
    println!(
        "nn {m}x{k}x{n}: {:.2} GFLOP/s ({:.3}s, sink {sink:.3})",
        flops / dt / 1e9,
        dt
    );
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let c = matmul_kernel(&a, m, k, false, &b, n, k, true);
        sink += c[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "nt {m}x{k}x{n}: {:.2} GFLOP/s ({:.3}s, sink {sink:.3})",
        flops / dt / 1e9,
        dt
    );
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let c = matmul_kernel(&a, k, m, true, &b, k, n, false);
        sink += c[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "tn {m}x{k}x{n}: {:.2} GFLOP/s ({:.3}s, sink {sink:.3})",
        flops / dt / 1e9,
        dt
    );
}

fn main() {
    // typical shapes in the toy models
    bench(25, 64, 64, 20000);
    bench(73, 128, 128, 4000);
    bench(25, 64, 256, 8000);
    bench(8, 256, 256, 20000);
    bench(128, 128, 128, 4000);
}
