//! Learnable increments on the singular-value matrix of a weight.
//!
//! A weight `M = U·diag(S)·V` (`a×b`, `a ≥ b`) is re-parameterized as
//! `M' = U·(diag(S) + Map(I))·V`, where `I` is a `(2n+1)×b` table: row
//! `n + o` holds the diagonal at offset `o ∈ [−n, n]`, and entry `(n + o, j)`
//! lands at `(j + o, j)` of the `a×b` band. With `n = 0` this is a plain
//! vector of singular-value increments.
//!
//! The module also carries the rounding-headroom analysis: how far each
//! weight entry may move before its integer code changes, and whether a
//! given band increment stays inside that envelope.

use crate::error::{Error, Result};
use crate::numerics::{diag_rect, matmul, Matrix, SvdFactors};
use crate::quantizer::{compute_params, quantize, ClipParams, IntCodes, QuantConfig, QuantParams};

pub const DEFAULT_DIAGONALS: usize = 100;

/// Finite stand-in for the unbounded headroom of a saturated entry moving
/// further outward.
pub const OUTWARD_HEADROOM_CAP: f64 = 1e30;

/// Clamps a requested diagonal count to what an `a×b` band can hold.
pub fn effective_diagonals(requested: usize, a: usize, b: usize) -> usize {
    requested.min(a.min(b).saturating_sub(1))
}

/// Learnable band values, `(2·n_diag + 1) × b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandIncrement {
    n_diag: usize,
    values: Matrix,
}

impl BandIncrement {
    pub fn zeros(n_diag: usize, b: usize) -> Self {
        Self { n_diag, values: Matrix::zeros(2 * n_diag + 1, b) }
    }

    pub fn new(n_diag: usize, values: Matrix) -> Result<Self> {
        if values.rows() != 2 * n_diag + 1 {
            return Err(Error::shape("band increment", values.shape(), (2 * n_diag + 1, values.cols())));
        }
        if !values.is_finite() {
            return Err(Error::InvalidInput("band increment contains non-finite values".into()));
        }
        Ok(Self { n_diag, values })
    }

    /// Single-diagonal increment holding a singular-value offset vector.
    pub fn from_lsi(i: &[f64]) -> Result<Self> {
        Self::new(0, Matrix::row_vector(i)?)
    }

    #[inline]
    pub fn n_diag(&self) -> usize {
        self.n_diag
    }

    /// Inner SVD dimension.
    #[inline]
    pub fn b(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Value on diagonal `offset` at column `j`.
    pub fn get(&self, offset: isize, j: usize) -> f64 {
        self.values.get((offset + self.n_diag as isize) as usize, j)
    }
}

fn check_band_shape(inc: &BandIncrement, a: usize, b: usize) -> Result<()> {
    if a < b {
        return Err(Error::UnsupportedShape(format!("band layout needs rows >= cols, got {a}x{b}")));
    }
    if inc.b() != b {
        return Err(Error::shape("map_band", inc.values.shape(), (a, b)));
    }
    Ok(())
}

/// Visits every in-range placement `(row index into values, l, j)`.
fn placements(n_diag: usize, a: usize, b: usize, mut f: impl FnMut(usize, usize, usize)) {
    for r in 0..2 * n_diag + 1 {
        let o = r as isize - n_diag as isize;
        for j in 0..b {
            let l = j as isize + o;
            if l >= 0 && (l as usize) < a {
                f(r, l as usize, j);
            }
        }
    }
}

/// Dense `a×b` band matrix holding the increment values.
pub fn map_band(inc: &BandIncrement, a: usize, b: usize) -> Result<Matrix> {
    check_band_shape(inc, a, b)?;
    let mut out = Matrix::zeros(a, b);
    placements(inc.n_diag, a, b, |r, l, j| out.set(l, j, inc.values.get(r, j)));
    Ok(out)
}

/// `diag_rect(s) + map_band(inc)`.
pub fn build_d(s: &[f64], inc: &BandIncrement, a: usize, b: usize) -> Result<Matrix> {
    if s.len() != b {
        return Err(Error::shape("build_d", (s.len(), 1), (a, b)));
    }
    let band = map_band(inc, a, b)?;
    diag_rect(s, a, b)?.add(&band)
}

/// `u · d · v`.
pub fn reconstruct_weight(u: &Matrix, d: &Matrix, v: &Matrix) -> Result<Matrix> {
    let (a, b) = d.shape();
    if u.shape() != (a, a) {
        return Err(Error::shape("reconstruct_weight", u.shape(), d.shape()));
    }
    if v.shape() != (b, b) {
        return Err(Error::shape("reconstruct_weight", d.shape(), v.shape()));
    }
    matmul(&matmul(u, d)?, v)
}

/// `u · diag_rect(s + i) · v`.
pub fn lsi_reconstruct(u: &Matrix, s: &[f64], i: &[f64], v: &Matrix) -> Result<Matrix> {
    if s.len() != i.len() || v.rows() != s.len() {
        return Err(Error::shape("lsi_reconstruct", (s.len(), i.len()), v.shape()));
    }
    let shifted: Vec<f64> = s.iter().zip(i).map(|(a, b)| a + b).collect();
    reconstruct_weight(u, &diag_rect(&shifted, u.rows(), v.rows())?, v)
}

/// Weight with the increment applied to the given factors.
pub fn desv_weight(f: &SvdFactors, inc: &BandIncrement) -> Result<Matrix> {
    let (a, b) = (f.rows(), f.cols());
    reconstruct_weight(&f.u, &build_d(&f.s, inc, a, b)?, &f.v)
}

/// Gradient of the band values given `∂L/∂M'`.
///
/// `∂L/∂D = uᵀ · upstream · vᵀ`, read off at each placement; placements that
/// fall outside the band rectangle get zero.
pub fn grad_band(upstream: &Matrix, u: &Matrix, v: &Matrix, n_diag: usize) -> Result<BandIncrement> {
    let (a, b) = upstream.shape();
    if u.shape() != (a, a) || v.shape() != (b, b) {
        return Err(Error::shape("grad_band", u.shape(), v.shape()));
    }
    if a < b {
        return Err(Error::UnsupportedShape(format!("band layout needs rows >= cols, got {a}x{b}")));
    }
    let g_d = u.t_matmul(upstream)?.matmul_t(v)?;
    let mut grad = BandIncrement::zeros(n_diag, b);
    placements(n_diag, a, b, |r, l, j| grad.values.set(r, j, g_d.get(l, j)));
    Ok(grad)
}

/// Gradient of a singular-value increment vector given `∂L/∂M'`: the main
/// diagonal of `uᵀ · upstream · vᵀ`.
pub fn grad_lsi(upstream: &Matrix, u: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    let (a, b) = upstream.shape();
    if u.shape() != (a, a) || v.shape() != (b, b) {
        return Err(Error::shape("grad_lsi", u.shape(), v.shape()));
    }
    let g_d = u.t_matmul(upstream)?.matmul_t(v)?;
    Ok((0..a.min(b)).map(|j| g_d.get(j, j)).collect())
}

/// Per-entry room for perturbation before the integer code changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    /// Inward headroom in weight units; for in-range entries the distance to
    /// the nearest rounding boundary, for saturated entries the distance to
    /// the point where the code leaves the boundary.
    pub headroom: Matrix,
    pub saturated_mask: Vec<bool>,
    /// Direction in which a saturated entry may move without limit:
    /// `-1` (held at code 0), `+1` (held at the top code), `0` otherwise.
    pub outward: Vec<i8>,
    /// Parameters the analysis was made against.
    pub params: QuantParams,
    pub cfg: QuantConfig,
}

impl ErrorMatrix {
    /// Largest admissible perturbation of entry `i` in the direction of `sign`.
    pub fn allowance(&self, i: usize, sign: f64) -> f64 {
        if self.outward[i] != 0 && sign * self.outward[i] as f64 > 0.0 {
            OUTWARD_HEADROOM_CAP
        } else {
            self.headroom.data()[i]
        }
    }
}

/// Headroom analysis with parameters computed from `w`.
pub fn error_matrix(w: &Matrix, cfg: &QuantConfig, clip: &ClipParams) -> Result<ErrorMatrix> {
    let params = compute_params(w, cfg, clip)?;
    error_matrix_with_params(w, &params, cfg)
}

/// Headroom analysis against fixed quantization parameters.
pub fn error_matrix_with_params(w: &Matrix, p: &QuantParams, cfg: &QuantConfig) -> Result<ErrorMatrix> {
    let layout = cfg.layout(w.rows(), w.cols())?;
    if p.n_groups() != layout.n_groups() {
        return Err(Error::InvalidParam("quant params do not match layout".into()));
    }
    let qmax = cfg.qmax() as f64;
    let n = w.data().len();
    let mut headroom = vec![0.0; n];
    let mut saturated = vec![false; n];
    let mut outward = vec![0i8; n];
    for (i, (&v, &g)) in w.data().iter().zip(layout.group_ids()).enumerate() {
        if p.degenerate[g] {
            saturated[i] = true;
            continue;
        }
        let s = p.scale[g];
        let z = p.zero[g] as f64;
        let x = v / s;
        let r = x.round();
        if r + z < 0.0 {
            saturated[i] = true;
            outward[i] = -1;
            headroom[i] = (0.5 - z - x) * s;
        } else if r + z > qmax {
            saturated[i] = true;
            outward[i] = 1;
            headroom[i] = (x - (qmax - z - 0.5)) * s;
        } else {
            headroom[i] = s * (0.5 - (x - r).abs());
        }
        headroom[i] = headroom[i].max(0.0);
    }
    Ok(ErrorMatrix {
        headroom: Matrix::from_vec_unchecked(w.rows(), w.cols(), headroom),
        saturated_mask: saturated,
        outward,
        params: p.clone(),
        cfg: *cfg,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: usize,
    pub total: usize,
    pub fraction: f64,
    /// Largest amount by which an entry's perturbation exceeds its headroom.
    pub max_violation: f64,
    pub all_feasible: bool,
}

/// Perturbation `u · map_band(inc) · v` that the increment adds to the weight.
pub fn band_perturbation(inc: &BandIncrement, f: &SvdFactors) -> Result<Matrix> {
    let (a, b) = (f.rows(), f.cols());
    reconstruct_weight(&f.u, &map_band(inc, a, b)?, &f.v)
}

/// Checks every entry of the increment's perturbation against the headroom.
///
/// An entry is feasible when the perturbation is zero, moves a saturated
/// entry outward, or is strictly smaller than the headroom. When every entry
/// is feasible, re-quantizing `m + P` with the same parameters reproduces
/// the codes of `m`.
pub fn feasibility_check(m: &Matrix, inc: &BandIncrement, f: &SvdFactors, e: &ErrorMatrix) -> Result<FeasibilityReport> {
    if m.shape() != (f.rows(), f.cols()) || e.headroom.shape() != m.shape() {
        return Err(Error::shape("feasibility_check", m.shape(), e.headroom.shape()));
    }
    let p = band_perturbation(inc, f)?;
    let mut feasible = 0;
    let mut max_violation = 0.0_f64;
    for (i, &d) in p.data().iter().enumerate() {
        let allowed = e.allowance(i, d);
        if d == 0.0 || d.abs() < allowed || (allowed == OUTWARD_HEADROOM_CAP && d.abs() <= allowed) {
            feasible += 1;
        } else {
            max_violation = max_violation.max(d.abs() - allowed);
        }
    }
    let total = p.data().len();
    Ok(FeasibilityReport {
        feasible,
        total,
        fraction: feasible as f64 / total as f64,
        max_violation,
        all_feasible: feasible == total,
    })
}

/// Codes of `m + perturbation` against the fixed parameters of `e`.
pub fn requantize(m: &Matrix, perturbation: &Matrix, e: &ErrorMatrix) -> Result<IntCodes> {
    quantize(&m.add(perturbation)?, &e.params, &e.cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{relative_frobenius, svd};
    use crate::quantizer::Granularity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn lsi_layout_is_diagonal() {
        let inc = BandIncrement::from_lsi(&[1.0, 2.0, 3.0]).unwrap();
        let m = map_band(&inc, 4, 3).unwrap();
        let want = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(m, want);
    }

    #[test]
    fn negative_offset_placements() {
        let mut values = Matrix::zeros(3, 3);
        values.row_mut(0).fill(7.0);
        let inc = BandIncrement::new(1, values).unwrap();
        let m = map_band(&inc, 4, 3).unwrap();
        assert_eq!(m.get(0, 1), 7.0);
        assert_eq!(m.get(1, 2), 7.0);
        let nonzero = m.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 2);
        assert_eq!(map_band(&BandIncrement::zeros(1, 3), 4, 3).unwrap(), Matrix::zeros(4, 3));
    }

    #[test]
    fn map_rejects_wide_layouts() {
        let inc = BandIncrement::zeros(0, 4);
        assert!(matches!(map_band(&inc, 3, 4), Err(Error::UnsupportedShape(_))));
    }

    #[test]
    fn build_d_adds_increment() {
        let inc = BandIncrement::from_lsi(&[0.5, -0.5]).unwrap();
        let d = build_d(&[2.0, 3.0], &inc, 2, 2).unwrap();
        assert_eq!(d, Matrix::from_rows(&[[2.5, 0.0], [0.0, 2.5]]).unwrap());
    }

    #[test]
    fn zero_increment_reconstructs_original() {
        let m = random(16, 8, 1);
        let f = svd(&m).unwrap();
        let w = desv_weight(&f, &BandIncrement::zeros(3, 8)).unwrap();
        assert!(relative_frobenius(&w, &m).unwrap() <= 1e-5);
    }

    #[test]
    fn lsi_annihilation_and_identity_factors() {
        let f = svd(&random(6, 4, 2)).unwrap();
        let neg: Vec<f64> = f.s.iter().map(|x| -x).collect();
        assert_eq!(lsi_reconstruct(&f.u, &f.s, &neg, &f.v).unwrap(), Matrix::zeros(6, 4));
        let d = random(5, 3, 3);
        assert_eq!(reconstruct_weight(&Matrix::identity(5), &d, &Matrix::identity(3)).unwrap(), d);
    }

    #[test]
    fn grad_band_identity_chain_reads_diagonal() {
        let g = random(5, 3, 4);
        let grad = grad_band(&g, &Matrix::identity(5), &Matrix::identity(3), 0).unwrap();
        assert_eq!(grad.values().row(0), &[g.get(0, 0), g.get(1, 1), g.get(2, 2)]);
        let zero = grad_band(&Matrix::zeros(5, 3), &Matrix::identity(5), &Matrix::identity(3), 2).unwrap();
        assert_eq!(zero, BandIncrement::zeros(2, 3));
    }

    #[test]
    fn headroom_worked_examples() {
        let cfg = QuantConfig::per_tensor(4).unwrap();
        let p = QuantParams {
            scale: vec![1.0],
            zero: vec![0],
            clip_lo: vec![0.0],
            clip_hi: vec![15.0],
            degenerate: vec![false],
        };
        let w = Matrix::row_vector(&[0.4, 3.0, 2.5, 7.0]).unwrap();
        let e = error_matrix_with_params(&w, &p, &cfg).unwrap();
        assert!((e.headroom.get(0, 0) - 0.1).abs() < 1e-12);
        assert_eq!(e.headroom.get(0, 1), 0.5);
        assert_eq!(e.headroom.get(0, 2), 0.0);
        assert!(e.saturated_mask.iter().all(|s| !s));
    }

    #[test]
    fn saturated_entries_get_inward_headroom() {
        let cfg = QuantConfig::per_tensor(2).unwrap();
        let p = QuantParams {
            scale: vec![1.0],
            zero: vec![1],
            clip_lo: vec![-1.0],
            clip_hi: vec![2.0],
            degenerate: vec![false],
        };
        let w = Matrix::row_vector(&[-3.0, 4.2]).unwrap();
        let e = error_matrix_with_params(&w, &p, &cfg).unwrap();
        assert_eq!(e.saturated_mask, vec![true, true]);
        assert_eq!(e.outward, vec![-1, 1]);
        // code 0 holds while w < −0.5; code 3 holds while w >= 1.5
        assert!((e.headroom.get(0, 0) - 2.5).abs() < 1e-12);
        assert!((e.headroom.get(0, 1) - 2.7).abs() < 1e-12);
        assert_eq!(e.allowance(0, -1.0), OUTWARD_HEADROOM_CAP);
    }

    #[test]
    fn degenerate_group_has_no_headroom() {
        let cfg = QuantConfig::per_tensor(3).unwrap();
        let e = error_matrix(&Matrix::zeros(2, 2), &cfg, &ClipParams::identity(1)).unwrap();
        assert!(e.saturated_mask.iter().all(|s| *s));
        assert_eq!(e.headroom, Matrix::zeros(2, 2));
    }

    #[test]
    fn feasibility_zero_and_scaled_increment() {
        let m = random(8, 4, 5);
        let f = svd(&m).unwrap();
        let cfg = QuantConfig::new(4, Granularity::PerTensor).unwrap();
        let e = error_matrix(&m, &cfg, &ClipParams::identity(1)).unwrap();
        let rep = feasibility_check(&m, &BandIncrement::zeros(1, 4), &f, &e).unwrap();
        assert!(rep.all_feasible);
        assert_eq!(rep.max_violation, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dir = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let mut k = 1e-6;
        let mut hit = None;
        while k < 10.0 {
            let inc = BandIncrement::new(1, dir.scaled(k)).unwrap();
            let rep = feasibility_check(&m, &inc, &f, &e).unwrap();
            if !rep.all_feasible {
                hit = Some(rep);
                break;
            }
            k *= 1.5;
        }
        let rep = hit.expect("scaling must eventually exceed headroom");
        assert!(rep.max_violation > 0.0);
        assert!(rep.fraction < 1.0);
    }
}
