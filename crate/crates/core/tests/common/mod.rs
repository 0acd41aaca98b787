#![allow(dead_code)]

use dsvq::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Matrix with the given shape bounds and entries in `[-scale, scale]`.
pub fn matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-scale..scale, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

pub fn max_abs_identity_gap(q: &Matrix) -> f64 {
    let g = q.t_matmul(q).unwrap();
    let n = g.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.get(i, j) - want).abs());
        }
    }
    worst
}
