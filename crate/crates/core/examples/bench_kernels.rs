//! Rough throughput numbers for the hot kernels.

use std::time::Instant;

use sfod::ops::{conv2d_backward, conv2d_forward, gemm};
use sfod::Tensor;

fn main() {
    for &(m, n, k) in &[(16usize, 9216usize, 27usize), (32, 2304, 144), (64, 576, 288), (64, 144, 576), (128, 1024, 1024)] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let reps = (2e9 / (2.0 * (m * n * k) as f64)).max(1.0) as usize;
        let t = Instant::now();
        for _ in 0..reps {
            gemm(false, false, m, n, k, &a, &b, &mut c, false);
        }
        let s = t.elapsed().as_secs_f64();
        println!("gemm {m}x{n}x{k}: {:.1} GFLOP/s", 2.0 * (m * n * k * reps) as f64 / s / 1e9);
    }
    for &(ta, tb, m, n, k) in &[(false, true, 8usize, 27usize, 36864usize), (false, true, 16, 72, 9216), (true, false, 72, 9216, 16), (false, true, 32, 288, 576)] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let reps = (2e9 / (2.0 * (m * n * k) as f64)).max(1.0) as usize;
        let t = Instant::now();
        for _ in 0..reps {
            gemm(ta, tb, m, n, k, &a, &b, &mut c, true);
        }
        let s = t.elapsed().as_secs_f64();
        println!("gemm ta={ta} tb={tb} {m}x{n}x{k}: {:.1} GFLOP/s", 2.0 * (m * n * k * reps) as f64 / s / 1e9);
    }
    for &(c_in, c_out, hw) in &[(3usize, 16usize, 96usize), (16, 32, 48), (32, 64, 24), (64, 64, 12)] {
        let x = Tensor::full(&[4, c_in, hw, hw], 0.1f32);
        let w = Tensor::full(&[c_out, c_in, 3, 3], 0.01f32);
        let b = Tensor::zeros(&[c_out]);
        let t = Instant::now();
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        let f = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = conv2d_backward(&y, &x, &w, 1, 1).unwrap();
        let bw = t.elapsed().as_secs_f64();
        let macs = (4 * c_in * c_out * 9 * hw * hw) as f64;
        println!("conv {c_in}->{c_out} @{hw}: fwd {:.2} ms ({:.1} GF/s) bwd {:.2} ms", f * 1e3, 2.0 * macs / f / 1e9, bw * 1e3);
    }
}
