mod common;

use common::uniform;
use dsvq::numerics::max_abs_diff;
use dsvq::transform::{apply_smooth, invert_smooth, SmoothParams};
use dsvq::Matrix;
use proptest::prelude::*;

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = x.matmul(w).unwrap();
    for r in 0..y.rows() {
        y.row_mut(r).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    y
}

fn case() -> impl Strategy<Value = (Matrix, Matrix, Vec<f64>, SmoothParams)> {
    (1usize..8, 1usize..10, 1usize..8, any::<u64>()).prop_flat_map(|(n, c, o, seed)| {
        (
            Just(uniform(n, c, -4.0, 4.0, seed)),
            Just(uniform(c, o, -1.0, 1.0, seed ^ 7)),
            prop::collection::vec(-1.0..1.0f64, o),
            prop::collection::vec(-3.0..3.0f64, c),
            prop::collection::vec(-2.0..2.0f64, c),
        )
            .prop_map(|(x, w, b, ls, shift)| {
                let scale = ls.iter().map(|v: &f64| v.exp()).collect();
                (x, w, b, SmoothParams { scale, shift })
            })
    })
}

#[test]
fn rejects_bad_params() {
    let x = Matrix::zeros(2, 2);
    let w = Matrix::zeros(2, 1);
    let bad = SmoothParams { scale: vec![1.0, 0.0], shift: vec![0.0; 2] };
    assert!(apply_smooth(&x, &w, &[0.0], &bad).is_err());
    assert!(apply_smooth(&x, &w, &[0.0], &SmoothParams::identity(3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn output_equivalence((x, w, b, p) in case()) {
        let want = affine(&x, &w, &b);
        let t = apply_smooth(&x, &w, &b, &p).unwrap();
        let got = affine(&t.x, &t.w, &t.bias);
        prop_assert!(max_abs_diff(&want, &got).unwrap() <= 1e-6 * (1.0 + want.max_abs()));
    }

    #[test]
    fn invert_undoes_apply((x, w, b, p) in case()) {
        let t = apply_smooth(&x, &w, &b, &p).unwrap();
        let (w2, b2) = invert_smooth(&t.w, &t.bias, &p).unwrap();
        prop_assert!(max_abs_diff(&w, &w2).unwrap() <= 1e-9);
        prop_assert!(b.iter().zip(&b2).all(|(u, v)| (u - v).abs() <= 1e-9));
    }

    #[test]
    fn identity_is_no_op((x, w, b, _p) in case()) {
        let t = apply_smooth(&x, &w, &b, &SmoothParams::identity(x.cols())).unwrap();
        prop_assert_eq!(t.x, x);
        prop_assert_eq!(t.w, w);
        prop_assert_eq!(t.bias, b);
    }
}
