//! Uniform affine quantization with per-tensor, per-channel and group-wise
//! granularity, learnable clipping, and a straight-through backward pass.
//!
//! Rounding is to nearest with ties away from zero (`f64::round`). The raw
//! range of every group is widened to contain zero, so the zero point always
//! lies inside the code range and clipping never truncates the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// One group per row.
    Rows,
    /// One group per column.
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: Axis },
    /// Contiguous runs of `size` rows within each column. For a weight stored
    /// as `in_dim × out_dim` this groups along the input dimension.
    Group { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub granularity: Granularity,
}

impl QuantConfig {
    pub fn new(bits: u32, granularity: Granularity) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidParam(format!(
                "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
            )));
        }
        if let Granularity::Group { size: 0 } = granularity {
            return Err(Error::InvalidInput("group size must be positive".into()));
        }
        Ok(Self { bits, granularity })
    }

    pub fn per_tensor(bits: u32) -> Result<Self> {
        Self::new(bits, Granularity::PerTensor)
    }

    /// Largest code, `2^bits − 1`.
    #[inline]
    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn layout(&self, rows: usize, cols: usize) -> Result<GroupLayout> {
        GroupLayout::new(self.granularity, rows, cols)
    }
}

/// Assignment of matrix entries to quantization groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    rows: usize,
    cols: usize,
    n_groups: usize,
    /// Set when the group size does not divide the grouped dimension and
    /// the last group of each column is shorter.
    pub ragged: bool,
    group_of: Vec<usize>,
}

impl GroupLayout {
    pub fn new(granularity: Granularity, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput("cannot quantize an empty matrix".into()));
        }
        let (n_groups, ragged, group_of): (usize, bool, Vec<usize>) = match granularity {
            Granularity::PerTensor => (1, false, vec![0; rows * cols]),
            Granularity::PerChannel { axis: Axis::Rows } => {
                (rows, false, (0..rows * cols).map(|i| i / cols).collect())
            }
            Granularity::PerChannel { axis: Axis::Cols } => {
                (cols, false, (0..rows * cols).map(|i| i % cols).collect())
            }
            Granularity::Group { size } => {
                if size == 0 {
                    return Err(Error::InvalidInput("group size must be positive".into()));
                }
                let per_col = rows.div_ceil(size);
                let ids = (0..rows * cols)
                    .map(|i| (i % cols) * per_col + (i / cols) / size)
                    .collect();
                (per_col * cols, !rows.is_multiple_of(size), ids)
            }
        };
        Ok(Self { rows, cols, n_groups, ragged, group_of })
    }

    #[inline]
    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Group index of each entry in row-major order.
    #[inline]
    pub fn group_ids(&self) -> &[usize] {
        &self.group_of
    }
}

/// Per-group clipping factors; the clipped range is `[beta·min, gamma·max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ClipParams {
    /// No clipping.
    pub fn identity(n_groups: usize) -> Self {
        Self { gamma: vec![1.0; n_groups], beta: vec![1.0; n_groups] }
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let p = Self { gamma, beta };
        p.validate(p.gamma.len())?;
        Ok(p)
    }

    /// Factors from unconstrained logits through a sigmoid.
    pub fn from_logits(hi: &[f64], lo: &[f64]) -> Self {
        Self { gamma: hi.iter().map(|&x| sigmoid(x)).collect(), beta: lo.iter().map(|&x| sigmoid(x)).collect() }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    fn validate(&self, n_groups: usize) -> Result<()> {
        if self.gamma.len() != n_groups || self.beta.len() != n_groups {
            return Err(Error::InvalidParam(format!(
                "clip params sized {}/{} but layout has {n_groups} groups",
                self.gamma.len(),
                self.beta.len()
            )));
        }
        let ok = |v: &f64| *v > 0.0 && *v <= 1.0;
        if !self.gamma.iter().all(ok) || !self.beta.iter().all(ok) {
            return Err(Error::InvalidParam("clip factors must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Step size for the clipped range `[lo, hi]` at `bits`, rounded to
/// `53 − bits` significant bits. Every grid point `(c − z)·s` is then exact,
/// so re-quantizing a dequantized group rebuilds the same scale. The step is
/// lowered by one such unit when rounding would leave the top code
/// unreachable.
pub fn grid_scale(lo: f64, hi: f64, bits: u32) -> f64 {
    let qmax = ((1u64 << bits) - 1) as f64;
    let unit = 1u64 << bits;
    let mut s = (hi - lo) / qmax;
    if !s.is_normal() {
        return s;
    }
    s = f64::from_bits((s.to_bits() + unit / 2) & !(unit - 1));
    while (hi / s).round() + (-lo / s).round() < qmax {
        s = f64::from_bits(s.to_bits() - unit);
    }
    s
}

/// Scale and zero point per group, plus the clipped range they were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f64>,
    pub zero: Vec<u32>,
    pub clip_lo: Vec<f64>,
    pub clip_hi: Vec<f64>,
    /// Groups whose clipped range collapsed to a point. They encode as code 0
    /// with scale 1 and decode to `clip_lo`.
    pub degenerate: Vec<bool>,
}

impl QuantParams {
    pub fn n_groups(&self) -> usize {
        self.scale.len()
    }

    pub fn max_scale(&self) -> f64 {
        self.scale.iter().copied().fold(0.0, f64::max)
    }

    /// Decoding offset of a group (nonzero only for degenerate groups).
    #[inline]
    pub fn offset(&self, g: usize) -> f64 {
        if self.degenerate[g] {
            self.clip_lo[g]
        } else {
            0.0
        }
    }
}

/// Integer codes of a quantized matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntCodes {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub codes: Vec<u32>,
}

/// `true` where an entry lies inside its group's clipped range and the
/// straight-through gradient passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SteMask {
    pub rows: usize,
    pub cols: usize,
    pub mask: Vec<bool>,
}

impl SteMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    pub fn count_passing(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Raw per-group extremes, widened to include zero, with the index of the
/// entry that attains each (None when zero is the extreme).
struct Extremes {
    mn: Vec<f64>,
    mx: Vec<f64>,
    argmin: Vec<Option<usize>>,
    argmax: Vec<Option<usize>>,
}

fn extremes(values: &[f64], layout: &GroupLayout) -> Extremes {
    let n = layout.n_groups();
    let mut ex = Extremes { mn: vec![0.0; n], mx: vec![0.0; n], argmin: vec![None; n], argmax: vec![None; n] };
    for (i, (&v, &g)) in values.iter().zip(layout.group_ids()).enumerate() {
        if v > ex.mx[g] {
            ex.mx[g] = v;
            ex.argmax[g] = Some(i);
        }
        if v < ex.mn[g] {
            ex.mn[g] = v;
            ex.argmin[g] = Some(i);
        }
    }
    ex
}

fn check_layout(w: &Matrix, layout: &GroupLayout) -> Result<()> {
    if w.shape() != layout.shape() {
        return Err(Error::shape("quantizer layout", w.shape(), layout.shape()));
    }
    Ok(())
}

pub fn compute_params(w: &Matrix, cfg: &QuantConfig, clip: &ClipParams) -> Result<QuantParams> {
    let layout = cfg.layout(w.rows(), w.cols())?;
    clip.validate(layout.n_groups())?;
    let ex = extremes(w.data(), &layout);
    let qmax = cfg.qmax() as f64;
    let n = layout.n_groups();
    let mut p = QuantParams {
        scale: vec![1.0; n],
        zero: vec![0; n],
        clip_lo: vec![0.0; n],
        clip_hi: vec![0.0; n],
        degenerate: vec![false; n],
    };
    for g in 0..n {
        let hi = clip.gamma[g] * ex.mx[g];
        let lo = clip.beta[g] * ex.mn[g];
        p.clip_hi[g] = hi;
        p.clip_lo[g] = lo;
        if hi <= lo {
            p.degenerate[g] = true;
            continue;
        }
        let s = grid_scale(lo, hi, cfg.bits);
        p.scale[g] = s;
        p.zero[g] = (-lo / s).round().clamp(0.0, qmax) as u32;
    }
    Ok(p)
}

fn check_params(p: &QuantParams, layout: &GroupLayout) -> Result<()> {
    if p.n_groups() != layout.n_groups() {
        return Err(Error::InvalidParam(format!(
            "quant params have {} groups, layout needs {}",
            p.n_groups(),
            layout.n_groups()
        )));
    }
    Ok(())
}

/// `clamp(round(w / scale) + zero, 0, 2^bits − 1)` groupwise.
pub fn quantize(w: &Matrix, p: &QuantParams, cfg: &QuantConfig) -> Result<IntCodes> {
    let layout = cfg.layout(w.rows(), w.cols())?;
    check_params(p, &layout)?;
    let qmax = cfg.qmax() as f64;
    let codes = w
        .data()
        .iter()
        .zip(layout.group_ids())
        .map(|(&v, &g)| {
            if p.degenerate[g] {
                return 0;
            }
            let t = v.clamp(p.clip_lo[g], p.clip_hi[g]) / p.scale[g];
            (t.round() + p.zero[g] as f64).clamp(0.0, qmax) as u32
        })
        .collect();
    Ok(IntCodes { rows: w.rows(), cols: w.cols(), bits: cfg.bits, codes })
}

/// `(code − zero) · scale` groupwise.
pub fn dequantize(q: &IntCodes, p: &QuantParams, cfg: &QuantConfig) -> Result<Matrix> {
    let layout = cfg.layout(q.rows, q.cols)?;
    check_params(p, &layout)?;
    if q.codes.len() != q.rows * q.cols {
        return Err(Error::InvalidInput("code buffer length does not match shape".into()));
    }
    let qmax = cfg.qmax();
    if let Some(i) = q.codes.iter().position(|&c| c > qmax) {
        return Err(Error::InvalidInput(format!(
            "code {} at index {i} outside [0, {qmax}]",
            q.codes[i]
        )));
    }
    let data = q
        .codes
        .iter()
        .zip(layout.group_ids())
        .map(|(&c, &g)| (c as f64 - p.zero[g] as f64) * p.scale[g] + p.offset(g))
        .collect();
    Ok(Matrix::from_vec_unchecked(q.rows, q.cols, data))
}

/// Quantize-dequantize with parameters computed from `w` itself.
pub fn fake_quant(w: &Matrix, cfg: &QuantConfig, clip: &ClipParams) -> Result<(Matrix, SteMask)> {
    let layout = cfg.layout(w.rows(), w.cols())?;
    clip.validate(layout.n_groups())?;
    let (out, tape) = forward(w, cfg, &layout, &clip.gamma, &clip.beta, Rounding::Nearest);
    let mask = SteMask { rows: w.rows(), cols: w.cols(), mask: tape.mask };
    Ok((out, mask))
}

/// How the two rounding sites of the quantizer are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Rounding<'a> {
    Nearest,
    /// `round(x)` replaced by `x + offset` and the code clamp decisions held,
    /// both recorded from an earlier nearest-rounding pass. The result is a
    /// smooth surrogate whose exact derivative is the straight-through
    /// gradient at that point.
    Frozen(&'a FrozenRounding),
}

/// Discrete choices of a nearest-rounding pass, see [`Rounding::Frozen`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRounding {
    pub elem: Vec<f64>,
    pub zero: Vec<f64>,
    /// Codes that were held at `0` or `qmax` by the outer clamp.
    pub elem_held: Vec<bool>,
    pub zero_held: Vec<bool>,
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct FakeQuantTape {
    pub layout: GroupLayout,
    qmax: f64,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mn: Vec<f64>,
    mx: Vec<f64>,
    argmin: Vec<Option<usize>>,
    argmax: Vec<Option<usize>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    scale: Vec<f64>,
    zero: Vec<f64>,
    /// Unrounded zero point `−lo / scale`.
    zero_raw: Vec<f64>,
    zero_unclamped: Vec<bool>,
    degenerate: Vec<bool>,
    /// Scaled clipped input `clamp(w, lo, hi) / scale`.
    t: Vec<f64>,
    code: Vec<f64>,
    /// Code not held at the range boundary by the outer clamp.
    unclamped: Vec<bool>,
    pub mask: Vec<bool>,
    below: Vec<bool>,
}

impl FakeQuantTape {
    /// Choices that make a `Rounding::Frozen` pass reproduce this one.
    pub fn rounding_offsets(&self) -> FrozenRounding {
        FrozenRounding {
            elem: self.t.iter().map(|t| t.round() - t).collect(),
            zero: self.zero_raw.iter().map(|u| u.round() - u).collect(),
            elem_held: self.unclamped.iter().map(|u| !u).collect(),
            zero_held: self.zero_unclamped.iter().map(|u| !u).collect(),
        }
    }

    /// Discrete decisions of the pass: clip masks, clamps, which entries
    /// attain the extremes and, when `with_codes`, the codes themselves. Two
    /// passes with equal state lie on the same smooth piece of the function.
    pub fn discrete_state(&self, with_codes: bool) -> Vec<i64> {
        let mut out = Vec::with_capacity(self.mask.len() * 3 + self.argmax.len() * 3);
        for i in 0..self.mask.len() {
            out.push(self.mask[i] as i64 | (self.below[i] as i64) << 1 | (self.unclamped[i] as i64) << 2);
            if with_codes {
                out.push(self.code[i] as i64);
            }
        }
        for g in 0..self.argmax.len() {
            out.push(self.argmax[g].map_or(-1, |i| i as i64));
            out.push(self.argmin[g].map_or(-1, |i| i as i64));
            out.push(self.zero_unclamped[g] as i64 | (self.degenerate[g] as i64) << 1);
            if with_codes {
                out.push(self.zero[g] as i64);
            }
        }
        out
    }

    /// Integer codes (meaningful after a nearest-rounding pass).
    pub fn codes(&self) -> Vec<u32> {
        self.code.iter().map(|&c| c as u32).collect()
    }

    /// Equivalent public parameters (meaningful after a nearest-rounding pass).
    pub fn params(&self) -> QuantParams {
        QuantParams {
            scale: self.scale.clone(),
            zero: self.zero.iter().map(|&z| z as u32).collect(),
            clip_lo: self.lo.clone(),
            clip_hi: self.hi.clone(),
            degenerate: self.degenerate.clone(),
        }
    }
}

/// Differentiable fake-quantization forward pass.
pub fn forward(
    w: &Matrix,
    cfg: &QuantConfig,
    layout: &GroupLayout,
    gamma: &[f64],
    beta: &[f64],
    rounding: Rounding<'_>,
) -> (Matrix, FakeQuantTape) {
    debug_assert!(check_layout(w, layout).is_ok());
    let values = w.data();
    let ex = extremes(values, layout);
    let qmax = cfg.qmax() as f64;
    let n = layout.n_groups();
    let mut tape = FakeQuantTape {
        layout: layout.clone(),
        qmax,
        gamma: gamma.to_vec(),
        beta: beta.to_vec(),
        lo: vec![0.0; n],
        hi: vec![0.0; n],
        scale: vec![1.0; n],
        zero: vec![0.0; n],
        zero_raw: vec![0.0; n],
        zero_unclamped: vec![false; n],
        degenerate: vec![false; n],
        t: vec![0.0; values.len()],
        code: vec![0.0; values.len()],
        unclamped: vec![true; values.len()],
        mask: vec![true; values.len()],
        below: vec![false; values.len()],
        mn: ex.mn,
        mx: ex.mx,
        argmin: ex.argmin,
        argmax: ex.argmax,
    };
    for g in 0..n {
        let hi = gamma[g] * tape.mx[g];
        let lo = beta[g] * tape.mn[g];
        tape.hi[g] = hi;
        tape.lo[g] = lo;
        if hi <= lo {
            tape.degenerate[g] = true;
            continue;
        }
        let s = grid_scale(lo, hi, cfg.bits);
        let u = -lo / s;
        let (zr, free) = match rounding {
            Rounding::Nearest => {
                let zr = u.round();
                (zr, (0.0..=qmax).contains(&zr))
            }
            Rounding::Frozen(f) => (u + f.zero[g], !f.zero_held[g]),
        };
        tape.scale[g] = s;
        tape.zero_raw[g] = u;
        tape.zero[g] = if free { zr } else { zr.clamp(0.0, qmax) };
        tape.zero_unclamped[g] = free;
    }
    let mut out = vec![0.0; values.len()];
    for (i, (&v, &g)) in values.iter().zip(layout.group_ids()).enumerate() {
        let (lo, hi) = (tape.lo[g], tape.hi[g]);
        tape.mask[i] = lo <= v && v <= hi;
        tape.below[i] = v < lo;
        if tape.degenerate[g] {
            out[i] = lo;
            continue;
        }
        let s = tape.scale[g];
        let t = v.clamp(lo, hi) / s;
        let (raw, free) = match rounding {
            Rounding::Nearest => {
                let raw = t.round() + tape.zero[g];
                (raw, (0.0..=qmax).contains(&raw))
            }
            Rounding::Frozen(f) => (t + f.elem[i] + tape.zero[g], !f.elem_held[i]),
        };
        let c = if free { raw } else { raw.clamp(0.0, qmax) };
        tape.t[i] = t;
        tape.code[i] = c;
        tape.unclamped[i] = free;
        out[i] = (c - tape.zero[g]) * s;
    }
    (Matrix::from_vec_unchecked(w.rows(), w.cols(), out), tape)
}

/// Gradients of a fake-quant pass.
#[derive(Debug, Clone)]
pub struct FakeQuantGrad {
    pub input: Matrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Backward pass through [`forward`].
///
/// `round_slope` is the derivative assigned to both rounding sites: `1.0`
/// gives the straight-through estimator, `0.0` the exact derivative of the
/// piecewise-constant rounding (valid away from rounding boundaries).
pub fn backward(tape: &FakeQuantTape, upstream: &Matrix, round_slope: f64) -> FakeQuantGrad {
    let n = tape.layout.n_groups();
    let rho = round_slope;
    let mut g_in = vec![0.0; upstream.data().len()];
    let mut g_lo = vec![0.0; n];
    let mut g_hi = vec![0.0; n];
    let mut acc_s = vec![0.0; n];
    let mut acc_z = vec![0.0; n];
    for (i, (&g_out, &g)) in upstream.data().iter().zip(tape.layout.group_ids()).enumerate() {
        if tape.degenerate[g] {
            g_lo[g] += g_out;
            continue;
        }
        let inside = if tape.unclamped[i] { 1.0 } else { 0.0 };
        let direct = g_out * inside * rho;
        if tape.mask[i] {
            g_in[i] += direct;
        } else if tape.below[i] {
            g_lo[g] += direct;
        } else {
            g_hi[g] += direct;
        }
        acc_s[g] += g_out * ((tape.code[i] - tape.zero[g]) - inside * rho * tape.t[i]);
        acc_z[g] += g_out * (inside - 1.0) * tape.scale[g];
    }
    let mut g_gamma = vec![0.0; n];
    let mut g_beta = vec![0.0; n];
    for g in 0..n {
        if !tape.degenerate[g] {
            let s = tape.scale[g];
            let mut g_s = acc_s[g];
            if tape.zero_unclamped[g] {
                g_lo[g] -= acc_z[g] * rho / s;
                g_s += acc_z[g] * rho * tape.lo[g] / (s * s);
            }
            g_hi[g] += g_s / tape.qmax;
            g_lo[g] -= g_s / tape.qmax;
        }
        g_gamma[g] = g_hi[g] * tape.mx[g];
        g_beta[g] = g_lo[g] * tape.mn[g];
        if let Some(i) = tape.argmax[g] {
            g_in[i] += g_hi[g] * tape.gamma[g];
        }
        if let Some(i) = tape.argmin[g] {
            g_in[i] += g_lo[g] * tape.beta[g];
        }
    }
    FakeQuantGrad {
        input: Matrix::from_vec_unchecked(upstream.rows(), upstream.cols(), g_in),
        gamma: g_gamma,
        beta: g_beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::row_vector(v).unwrap()
    }

    fn cfg(bits: u32) -> QuantConfig {
        QuantConfig::per_tensor(bits).unwrap()
    }

    #[test]
    fn params_worked_examples() {
        let p = compute_params(&row(&[-1.0, 0.0, 0.5, 2.0]), &cfg(2), &ClipParams::identity(1)).unwrap();
        assert_eq!(p.scale, vec![1.0]);
        assert_eq!(p.zero, vec![1]);
        let p = compute_params(&row(&[0.0, 15.0]), &cfg(4), &ClipParams::identity(1)).unwrap();
        assert_eq!((p.scale[0], p.zero[0]), (1.0, 0));
        let p = compute_params(&Matrix::zeros(3, 2), &cfg(4), &ClipParams::identity(1)).unwrap();
        assert!(p.degenerate[0]);
        assert_eq!((p.scale[0], p.zero[0]), (1.0, 0));
    }

    #[test]
    fn quantize_dequantize_worked_examples() {
        let w = row(&[-1.0, 0.0, 0.5, 2.0]);
        let c = cfg(2);
        let p = compute_params(&w, &c, &ClipParams::identity(1)).unwrap();
        let q = quantize(&w, &p, &c).unwrap();
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q, &p, &c).unwrap(), row(&[-1.0, 0.0, 1.0, 2.0]));
        let (fq, mask) = fake_quant(&w, &c, &ClipParams::identity(1)).unwrap();
        assert_eq!(fq, row(&[-1.0, 0.0, 1.0, 2.0]));
        assert!(mask.mask.iter().all(|m| *m));
    }

    #[test]
    fn zero_codes_decode_to_negative_zero_point() {
        let c = cfg(3);
        let p = QuantParams {
            scale: vec![0.25],
            zero: vec![3],
            clip_lo: vec![-0.75],
            clip_hi: vec![1.0],
            degenerate: vec![false],
        };
        let q = IntCodes { rows: 1, cols: 3, bits: 3, codes: vec![0; 3] };
        assert_eq!(dequantize(&q, &p, &c).unwrap(), row(&[-0.75; 3]));
        let bad = IntCodes { rows: 1, cols: 3, bits: 3, codes: vec![0, 8, 1] };
        assert!(matches!(dequantize(&bad, &p, &c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn below_clip_floor_maps_to_code_zero() {
        let c = cfg(4);
        let p = compute_params(&row(&[-2.0, 3.0]), &c, &ClipParams::identity(1)).unwrap();
        let q = quantize(&row(&[-9.0, -50.0, -2.5]), &p, &c).unwrap();
        assert_eq!(q.codes, vec![0, 0, 0]);
    }

    #[test]
    fn outlier_maps_to_grid_top_with_mask_off() {
        let c = cfg(3);
        let clip = ClipParams::new(vec![0.1], vec![1.0]).unwrap();
        let w = row(&[-1.0, 0.2, 0.6, 10.0]);
        let p = compute_params(&w, &c, &clip).unwrap();
        assert_eq!(p.clip_hi[0], 1.0);
        let (fq, mask) = fake_quant(&w, &c, &clip).unwrap();
        assert_eq!(mask.mask, vec![true, true, true, false]);
        let top = (c.qmax() as f64 - p.zero[0] as f64) * p.scale[0];
        assert_eq!(fq.get(0, 3), top);
        assert!((top - 1.0).abs() <= p.scale[0] / 2.0 + 1e-9);
    }

    #[test]
    fn grid_input_is_fixed_point() {
        let c = cfg(4);
        let w = Matrix::from_fn(4, 4, |r, k| (r as f64 * 4.0 + k as f64) - 7.0);
        let (fq, mask) = fake_quant(&w, &c, &ClipParams::identity(1)).unwrap();
        assert_eq!(fq, w);
        assert!(mask.mask.iter().all(|m| *m));
    }

    #[test]
    fn layouts() {
        let l = GroupLayout::new(Granularity::Group { size: 2 }, 5, 3).unwrap();
        assert!(l.ragged);
        assert_eq!(l.n_groups(), 9);
        // entry (4, 1): column 1, third group in that column
        assert_eq!(l.group_ids()[4 * 3 + 1], 3 + 2);
        let l = GroupLayout::new(Granularity::Group { size: 2 }, 4, 3).unwrap();
        assert!(!l.ragged);
        let l = GroupLayout::new(Granularity::PerChannel { axis: Axis::Rows }, 2, 3).unwrap();
        assert_eq!(l.group_ids(), &[0, 0, 0, 1, 1, 1]);
        assert!(QuantConfig::new(4, Granularity::Group { size: 0 }).is_err());
        assert!(QuantConfig::new(1, Granularity::PerTensor).is_err());
        assert!(QuantConfig::new(17, Granularity::PerTensor).is_err());
    }

    #[test]
    fn clip_validation() {
        assert!(ClipParams::new(vec![0.0], vec![1.0]).is_err());
        assert!(ClipParams::new(vec![1.2], vec![1.0]).is_err());
        let w = Matrix::zeros(2, 2);
        let c = QuantConfig::new(4, Granularity::PerChannel { axis: Axis::Cols }).unwrap();
        assert!(compute_params(&w, &c, &ClipParams::identity(1)).is_err());
    }

    #[test]
    fn frozen_rounding_reproduces_nearest_pass() {
        let c = cfg(3);
        let w = Matrix::from_fn(4, 4, |r, k| ((r * 7 + k * 3) % 11) as f64 * 0.173 - 0.8);
        let layout = c.layout(4, 4).unwrap();
        let (a, tape) = forward(&w, &c, &layout, &[0.9], &[0.95], Rounding::Nearest);
        let frozen = tape.rounding_offsets();
        let (b, _) = forward(&w, &c, &layout, &[0.9], &[0.95], Rounding::Frozen(&frozen));
        assert!(crate::numerics::max_abs_diff(&a, &b).unwrap() < 1e-12);
    }

    #[test]
    fn ste_passes_unit_gradient_inside_mask() {
        let c = cfg(3);
        let clip = ClipParams::new(vec![0.5], vec![1.0]).unwrap();
        let w = row(&[-1.0, 0.1, 0.3, 2.0]);
        let layout = c.layout(1, 4).unwrap();
        let (_, tape) = forward(&w, &c, &layout, &clip.gamma, &clip.beta, Rounding::Nearest);
        let up = row(&[1.0, 1.0, 1.0, 1.0]);
        let g = backward(&tape, &up, 1.0);
        assert_eq!(g.input.get(0, 1), 1.0);
        assert_eq!(g.input.get(0, 2), 1.0);
        // the outlier is clipped: its only route is through the max statistic
        assert_eq!(g.input.get(0, 3), g.gamma[0] * 0.5 / tape.mx[0]);
    }
}
