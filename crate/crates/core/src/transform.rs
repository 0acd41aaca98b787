//! Equivalent smoothing transform for a linear layer `y = x·W + b`.
//!
//! Activations are shifted and divided per input channel while the weight
//! rows are multiplied by the same factors; the shift is folded into the
//! bias. The product is unchanged:
//! `x·W + b = [(x − δ) ⊘ s]·[s ⊙ W] + [b + δ·W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Bounds of the initial per-channel scale.
pub const INIT_SCALE_MIN: f64 = 1e-3;
pub const INIT_SCALE_MAX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    /// Per-input-channel divisor for activations, multiplier for weight rows.
    pub scale: Vec<f64>,
    /// Per-input-channel activation shift.
    pub shift: Vec<f64>,
}

impl SmoothParams {
    pub fn identity(channels: usize) -> Self {
        Self { scale: vec![1.0; channels], shift: vec![0.0; channels] }
    }

    /// Migration-strength-0.5 initialization:
    /// `scale_c = sqrt(max|x_c|) / sqrt(max|w_c|)` clamped to `[1e-3, 1e3]`,
    /// `shift_c = mean(x_c)`.
    pub fn migration_init(x: &Matrix, w: &Matrix) -> Result<Self> {
        if x.cols() != w.rows() {
            return Err(Error::shape("smooth init", x.shape(), w.shape()));
        }
        let n = x.cols();
        let mut act_max = vec![0.0_f64; n];
        let mut mean = vec![0.0; n];
        for r in 0..x.rows() {
            for (c, &v) in x.row(r).iter().enumerate() {
                act_max[c] = act_max[c].max(v.abs());
                mean[c] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= x.rows() as f64);
        let scale = (0..n)
            .map(|c| {
                let wmax = w.row(c).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if wmax == 0.0 || act_max[c] == 0.0 {
                    return 1.0;
                }
                (act_max[c].sqrt() / wmax.sqrt()).clamp(INIT_SCALE_MIN, INIT_SCALE_MAX)
            })
            .collect();
        Ok(Self { scale, shift: mean })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scale.len() != channels || self.shift.len() != channels {
            return Err(Error::shape("smooth params", (self.scale.len(), self.shift.len()), (channels, channels)));
        }
        if let Some(i) = self.scale.iter().position(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidParam(format!("smooth scale[{i}] = {} is not positive", self.scale[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub x: Matrix,
    pub w: Matrix,
    pub bias: Vec<f64>,
}

/// Activation half of the transform: `(x − shift) / scale` per column.
pub fn smooth_activations(x: &Matrix, p: &SmoothParams) -> Result<Matrix> {
    p.validate(x.cols())?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, s), d) in out.row_mut(r).iter_mut().zip(&p.scale).zip(&p.shift) {
            *v = (*v - d) / s;
        }
    }
    Ok(out)
}

/// Weight and bias half of the transform.
pub fn smooth_weights(w: &Matrix, bias: &[f64], p: &SmoothParams) -> Result<(Matrix, Vec<f64>)> {
    p.validate(w.rows())?;
    if bias.len() != w.cols() {
        return Err(Error::shape("smooth bias", (1, bias.len()), w.shape()));
    }
    let mut w_t = w.clone();
    let mut b_t = bias.to_vec();
    for r in 0..w.rows() {
        let (s, d) = (p.scale[r], p.shift[r]);
        for (k, v) in w_t.row_mut(r).iter_mut().enumerate() {
            b_t[k] += d * *v;
            *v *= s;
        }
    }
    Ok((w_t, b_t))
}

pub fn apply_smooth(x: &Matrix, w: &Matrix, bias: &[f64], p: &SmoothParams) -> Result<Smoothed> {
    if x.cols() != w.rows() {
        return Err(Error::shape("apply_smooth", x.shape(), w.shape()));
    }
    let x_t = smooth_activations(x, p)?;
    let (w_t, b_t) = smooth_weights(w, bias, p)?;
    Ok(Smoothed { x: x_t, w: w_t, bias: b_t })
}

/// Recovers `(w, b)` from transformed weights.
pub fn invert_smooth(w_t: &Matrix, bias_t: &[f64], p: &SmoothParams) -> Result<(Matrix, Vec<f64>)> {
    p.validate(w_t.rows())?;
    if bias_t.len() != w_t.cols() {
        return Err(Error::shape("invert_smooth bias", (1, bias_t.len()), w_t.shape()));
    }
    let mut w = w_t.clone();
    let mut b = bias_t.to_vec();
    for r in 0..w.rows() {
        let (s, d) = (p.scale[r], p.shift[r]);
        for (k, v) in w.row_mut(r).iter_mut().enumerate() {
            *v /= s;
            b[k] -= d * *v;
        }
    }
    Ok((w, b))
}

/// Gradients of a loss with respect to the inputs of [`apply_smooth`].
#[derive(Debug, Clone)]
pub struct SmoothGrad {
    pub x: Matrix,
    pub w: Matrix,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Backward pass of [`apply_smooth`] given upstream gradients on its
/// outputs. `x_t` is the transformed activation from the forward pass.
pub fn smooth_backward(
    x_t: &Matrix,
    w: &Matrix,
    p: &SmoothParams,
    g_xt: &Matrix,
    g_wt: &Matrix,
    g_bt: &[f64],
) -> SmoothGrad {
    let n = p.channels();
    let mut g_scale = vec![0.0; n];
    let mut g_shift = vec![0.0; n];
    let mut g_x = g_xt.clone();
    for r in 0..x_t.rows() {
        let gx_row = g_x.row_mut(r);
        for c in 0..n {
            let g = gx_row[c];
            g_scale[c] -= g * x_t.get(r, c) / p.scale[c];
            g_shift[c] -= g / p.scale[c];
            gx_row[c] = g / p.scale[c];
        }
    }
    let mut g_w = Matrix::zeros(w.rows(), w.cols());
    for c in 0..n {
        let (s, d) = (p.scale[c], p.shift[c]);
        let w_row = w.row(c);
        let gwt_row = g_wt.row(c);
        let mut acc_s = 0.0;
        let mut acc_d = 0.0;
        for (k, out) in g_w.row_mut(c).iter_mut().enumerate() {
            acc_s += gwt_row[k] * w_row[k];
            acc_d += g_bt[k] * w_row[k];
            *out = s * gwt_row[k] + d * g_bt[k];
        }
        g_scale[c] += acc_s;
        g_shift[c] += acc_d;
    }
    SmoothGrad { x: g_x, w: g_w, scale: g_scale, shift: g_shift }
}
