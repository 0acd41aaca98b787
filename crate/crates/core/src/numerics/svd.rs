//! One-sided (Hestenes) Jacobi singular value decomposition.
//!
//! For a tall input the columns are rotated pairwise until they are mutually
//! orthogonal; the column norms are then the singular values and the
//! accumulated rotations form the right factor. Wide inputs are handled by
//! decomposing the transpose.

use crate::error::{Error, Result};
use crate::numerics::matrix::{diag_rect, matmul, Matrix};

/// Relative off-diagonal threshold `|aᵢ·aⱼ| ≤ tol·‖aᵢ‖‖aⱼ‖` for a converged pair.
pub const CONVERGENCE_TOL: f64 = 1e-12;

/// Sweep cap is this factor times `min(rows, cols)`.
pub const SWEEP_FACTOR: usize = 100;

/// `m = u · diag_rect(s) · v`.
///
/// `u` is `a×a`, `v` is `b×b` (already transposed, rows are right singular
/// vectors) and `s` has `min(a, b)` entries sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rows(&self) -> usize {
        self.u.rows()
    }

    pub fn cols(&self) -> usize {
        self.v.rows()
    }

    pub fn reconstruct(&self) -> Result<Matrix> {
        reconstruct(self)
    }
}

pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd input contains non-finite entries".into()));
    }
    let (a, b) = m.shape();
    let mut f = if a >= b {
        jacobi_tall(m)?
    } else {
        // mᵀ = U' D' V'  ⇒  m = V'ᵀ D'ᵀ U'ᵀ
        let t = jacobi_tall(&m.transpose())?;
        SvdFactors { u: t.v.transpose(), s: t.s, v: t.u.transpose() }
    };
    fix_signs(&mut f);
    Ok(f)
}

pub fn reconstruct(f: &SvdFactors) -> Result<Matrix> {
    let (a, b) = (f.u.rows(), f.v.rows());
    if f.u.cols() != a || f.v.cols() != b {
        return Err(Error::shape("reconstruct", f.u.shape(), f.v.shape()));
    }
    if f.s.len() != a.min(b) {
        return Err(Error::shape("reconstruct", (f.s.len(), 1), (a, b)));
    }
    let d = diag_rect(&f.s, a, b)?;
    matmul(&matmul(&f.u, &d)?, &f.v)
}

/// Decomposes a matrix with `rows >= cols`.
fn jacobi_tall(m: &Matrix) -> Result<SvdFactors> {
    let (a, b) = m.shape();
    debug_assert!(a >= b);
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..b).map(|c| m.col(c)).collect();
    let mut right: Vec<Vec<f64>> = (0..b)
        .map(|c| {
            let mut e = vec![0.0; b];
            e[c] = 1.0;
            e
        })
        .collect();

    let cap = SWEEP_FACTOR * b;
    let mut converged = b < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= cap {
            return Err(Error::NumericalFailure { what: "jacobi svd did not converge", iterations: sweeps });
        }
        sweeps += 1;
        converged = true;
        for p in 0..b - 1 {
            for q in p + 1..b {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= CONVERGENCE_TOL * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut right, p, q, c, s);
            }
        }
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let cols: Vec<Vec<f64>> = order.iter().map(|&i| cols[i].clone()).collect();
    let right: Vec<Vec<f64>> = order.iter().map(|&i| right[i].clone()).collect();
    sigma = order.iter().map(|&i| sigma[i]).collect();

    let smax = sigma.first().copied().unwrap_or(0.0);
    let null_tol = smax * (a.max(b) as f64) * f64::EPSILON;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(a);
    let mut missing = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        if sigma[j] > null_tol && sigma[j] > 0.0 {
            left.push(col.iter().map(|v| v / sigma[j]).collect());
        } else {
            left.push(vec![0.0; a]);
            missing.push(j);
        }
    }
    complete_basis(&mut left, &missing, a);

    let u = Matrix::from_fn(a, a, |r, c| left[c][r]);
    // right[j] is the j-th column of the accumulated rotation; as a row it is vᵀ
    let v = Matrix::from_fn(b, b, |r, c| right[r][c]);
    Ok(SvdFactors { u, s: sigma, v })
}

fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(q);
    let (vp, vq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `missing` slots and appends columns until `basis` holds `n`
/// orthonormal vectors, drawing candidates from the standard basis.
fn complete_basis(basis: &mut Vec<Vec<f64>>, missing: &[usize], n: usize) {
    let mut filled: Vec<bool> = vec![true; basis.len()];
    for &j in missing {
        filled[j] = false;
    }
    let targets: Vec<Option<usize>> = missing
        .iter()
        .map(|&j| Some(j))
        .chain((basis.len()..n).map(|_| None))
        .collect();
    // any vector with residual above this exists: residuals² over e_k sum to n − rank
    let threshold = 0.5 / (n as f64).sqrt();
    let mut cursor = 0;
    for target in targets {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for step in 0..n {
            let k = (cursor + step) % n;
            let mut cand = vec![0.0; n];
            cand[k] = 1.0;
            for _ in 0..2 {
                for (v, ok) in basis.iter().zip(&filled) {
                    if *ok {
                        let proj = dot(v, &cand);
                        for (c, x) in cand.iter_mut().zip(v) {
                            *c -= proj * x;
                        }
                    }
                }
            }
            let r = norm(&cand);
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, cand));
            }
            if r >= threshold {
                cursor = k + 1;
                break;
            }
        }
        let (r, mut v) = best.expect("candidate basis is non-empty");
        v.iter_mut().for_each(|x| *x /= r);
        match target {
            Some(j) => {
                basis[j] = v;
                filled[j] = true;
            }
            None => {
                basis.push(v);
                filled.push(true);
            }
        }
    }
}

/// Makes the largest-magnitude entry of each left singular vector
/// nonnegative, flipping the paired right vector along with it.
fn fix_signs(f: &mut SvdFactors) {
    let (a, b) = (f.u.rows(), f.v.rows());
    for j in 0..a {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for r in 0..a {
            let x = f.u.get(r, j);
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for r in 0..a {
                f.u.set(r, j, -f.u.get(r, j));
            }
            if j < b {
                for x in f.v.row_mut(j) {
                    *x = -*x;
                }
            }
        }
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}
