//! Weight-disturbance and singular-value expressiveness diagnostics.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{svd, Matrix};

/// Mean absolute entrywise difference.
pub fn disturbance_magnitude(w_orig: &Matrix, w_quant: &Matrix) -> Result<f64> {
    if w_orig.shape() != w_quant.shape() {
        return Err(Error::shape("disturbance_magnitude", w_orig.shape(), w_quant.shape()));
    }
    let total: f64 = w_orig.data().iter().zip(w_quant.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / w_orig.data().len() as f64)
}

/// Cumulative normalized singular-value mass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpressivenessCurve {
    pub points: Vec<f64>,
}

impl ExpressivenessCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,value\n");
        for (k, v) in self.points.iter().enumerate() {
            writeln!(out, "{k},{v}").unwrap();
        }
        out
    }
}

pub fn expressiveness_curve(h: &Matrix) -> Result<ExpressivenessCurve> {
    if !h.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let s = svd(h)?.s;
    let total: f64 = s.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::UndefinedCurve("matrix has no nonzero singular values".into()));
    }
    let mut acc = 0.0;
    let mut points: Vec<f64> = s
        .iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    *points.last_mut().unwrap() = 1.0;
    Ok(ExpressivenessCurve { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveComparison {
    pub max_deviation: f64,
    /// The curves had different lengths; the shorter was extended with 1.0.
    pub padded: bool,
}

pub fn compare_curves(a: &ExpressivenessCurve, b: &ExpressivenessCurve) -> CurveComparison {
    let n = a.len().max(b.len());
    let at = |c: &ExpressivenessCurve, k: usize| c.points.get(k).copied().unwrap_or(1.0);
    let max_deviation = (0..n).map(|k| (at(a, k) - at(b, k)).abs()).fold(0.0, f64::max);
    CurveComparison { max_deviation, padded: a.len() != b.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disturbance_examples() {
        let a = Matrix::row_vector(&[1.0, 2.0]).unwrap();
        let b = Matrix::row_vector(&[1.5, 2.5]).unwrap();
        assert_eq!(disturbance_magnitude(&a, &a).unwrap(), 0.0);
        assert_eq!(disturbance_magnitude(&a, &b).unwrap(), 0.5);
        assert_eq!(disturbance_magnitude(&b, &a).unwrap(), 0.5);
        assert!(disturbance_magnitude(&a, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn curve_examples() {
        assert_eq!(expressiveness_curve(&Matrix::identity(2)).unwrap().points, vec![0.5, 1.0]);
        let r1 = Matrix::from_fn(4, 3, |r, c| (r + 1) as f64 * (c as f64 - 0.5));
        let c = expressiveness_curve(&r1).unwrap();
        assert!(c.points.iter().all(|p| (p - 1.0).abs() < 1e-9));
        assert!(matches!(expressiveness_curve(&Matrix::zeros(3, 3)), Err(Error::UndefinedCurve(_))));
    }

    #[test]
    fn compare_examples() {
        let a = ExpressivenessCurve { points: vec![0.5, 1.0] };
        let b = ExpressivenessCurve { points: vec![0.6, 1.0] };
        assert_eq!(compare_curves(&a, &a), CurveComparison { max_deviation: 0.0, padded: false });
        assert!((compare_curves(&a, &b).max_deviation - 0.1).abs() < 1e-15);
        let c = ExpressivenessCurve { points: vec![0.4, 0.8, 1.0] };
        let cmp = compare_curves(&a, &c);
        assert!(cmp.padded);
        assert!((cmp.max_deviation - 0.2).abs() < 1e-15);
    }

    #[test]
    fn csv_format() {
        let c = ExpressivenessCurve { points: vec![0.5, 1.0] };
        assert_eq!(c.to_csv(), "index,value\n0,0.5\n1,1\n");
    }
}
