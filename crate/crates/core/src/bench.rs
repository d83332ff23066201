//! Packed versus float GEMM throughput.
//!
//! Both sides compute a block of `rows` output rows of an `n x n` by `n x n`
//! product on one thread, reducing over contiguous rows of the left operand
//! and of the pre-transposed right operand. Throughput is reported in
//! multiply-accumulates per second, so timing a row block measures the same
//! rate as the full product.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bittensor::{binary_gemm_sequential, BitMatrix, Encoding};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GemmBench {
    pub n: usize,
    pub rows: usize,
    pub float_macs_per_s: f64,
    pub packed_macs_per_s: f64,
    pub ratio: f64,
}

/// Textbook f32 triple loop, `b_t` holding the right operand transposed.
pub fn naive_gemm_f32(a: &[f32], b_t: &[f32], rows: usize, cols: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; rows * cols];
    for i in 0..rows {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..cols {
            let br = &b_t[j * n..(j + 1) * n];
            let mut acc = 0f32;
            for k in 0..n {
                acc += ar[k] * br[k];
            }
            out[i * cols + j] = acc;
        }
    }
    out
}

/// Repeats `f` until `budget` has elapsed and returns seconds per call.
fn time_per_call(budget: Duration, mut f: impl FnMut()) -> f64 {
    let start = Instant::now();
    let mut calls = 0u32;
    while calls == 0 || start.elapsed() < budget {
        f();
        calls += 1;
    }
    start.elapsed().as_secs_f64() / f64::from(calls)
}

pub fn gemm_throughput(n: usize, rows: usize, seed: u64, budget: Duration) -> Result<GemmBench> {
    if n == 0 || rows == 0 || rows > n {
        return Err(Error::InvalidArgument(format!("bench n {n}, rows {rows}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f32> = (0..rows * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let b_t: Vec<f32> = (0..n * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let wa = BitMatrix::from_fn(rows, n, Encoding::Signed, |r, c| a[r * n + c] > 0.0);
    let wb = BitMatrix::from_fn(n, n, Encoding::Signed, |r, c| b_t[r * n + c] > 0.0);

    let packed = binary_gemm_sequential(&wa, &wb)?;
    let float = naive_gemm_f32(&a, &b_t, rows, n, n);
    if packed.data.iter().zip(&float).any(|(p, f)| *p as f32 != *f) {
        return Err(Error::InvalidArgument("packed and float products disagree".into()));
    }

    let macs = (rows * n * n) as f64;
    let tf = time_per_call(budget, || {
        black_box(naive_gemm_f32(black_box(&a), black_box(&b_t), rows, n, n));
    });
    let tp = time_per_call(budget, || {
        black_box(binary_gemm_sequential(black_box(&wa), black_box(&wb)).expect("checked shapes"));
    });
    Ok(GemmBench {
        n,
        rows,
        float_macs_per_s: macs / tf,
        packed_macs_per_s: macs / tp,
        ratio: tf / tp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs() {
        let b = gemm_throughput(130, 7, 1, Duration::ZERO).unwrap();
        assert!(b.ratio > 0.0 && b.float_macs_per_s > 0.0);
        assert!(gemm_throughput(8, 9, 1, Duration::ZERO).is_err());
    }

    #[test]
    fn naive_gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b_t = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(naive_gemm_f32(&a, &b_t, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
