//! Differentiable quantized forward pass of a block and its analytic
//! backward pass.
//!
//! Each layer computes
//! `y = Q_x((x − δ) ⊘ s) · Q_w(s ⊙ W') + (b + δ·W')`
//! with `W'` rebuilt from frozen SVD factors plus the learnable increment,
//! `s = exp(log_scale)` and clipping factors `sigmoid(logit)`.

use serde::{Deserialize, Serialize};

use crate::desv::{self, effective_diagonals, BandIncrement, DEFAULT_DIAGONALS};
use crate::error::{Error, Result};
use crate::numerics::{svd, Matrix, SvdFactors};
use crate::quantizer::{self, sigmoid, ClipParams, FakeQuantTape, FrozenRounding, GroupLayout, QuantConfig, Rounding};
use crate::transform::{smooth_activations, smooth_backward, smooth_weights, SmoothParams};

use super::model::{add_bias, mse, Activation, Block};
use super::quantized::{QuantizedBlock, QuantizedLayer, SvdAudit};

/// Which learnable increment sits on the singular values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Increment {
    /// Weights are used as stored.
    None,
    /// A vector added to the singular values.
    Lsi,
    /// `2·n_diag + 1` diagonals of the singular-value rectangle.
    Band { n_diag: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothInit {
    Identity,
    /// Activation/weight magnitude balancing, see [`SmoothParams::migration_init`].
    Migration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of the increment parameters.
    pub lr_desv: f64,
    /// Learning rate of the smoothing and clipping parameters.
    pub lr_aux: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub steps: usize,
    /// Rows per optimization step; 0 uses every calibration row.
    pub batch: usize,
    pub seed: u64,
    pub increment: Increment,
    pub weight: QuantConfig,
    pub act_bits: Option<u32>,
    pub smooth_init: SmoothInit,
    pub learn_smooth: bool,
    /// Initial clipping logit; `None` disables learnable clipping.
    pub clip_init_logit: Option<f64>,
    pub schedule: LrSchedule,
}

/// Learning-rate multiplier over the step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()),
        }
    }
}

pub const DEFAULT_LR_DESV: f64 = 1.5e-4;
pub const DEFAULT_LR_AUX: f64 = 1e-3;
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_CLIP_LOGIT: f64 = 4.0;

impl TrainConfig {
    pub fn new(weight: QuantConfig, act_bits: Option<u32>) -> Self {
        Self {
            lr_desv: DEFAULT_LR_DESV,
            lr_aux: DEFAULT_LR_AUX,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            steps: DEFAULT_STEPS,
            batch: 0,
            seed: 0,
            increment: Increment::Band { n_diag: DEFAULT_DIAGONALS },
            weight,
            act_bits,
            smooth_init: SmoothInit::Migration,
            learn_smooth: true,
            clip_init_logit: Some(DEFAULT_CLIP_LOGIT),
            schedule: LrSchedule::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lr_desv, self.lr_aux].iter().any(|lr| lr.is_nan() || *lr <= 0.0) {
            return Err(Error::InvalidParam("learning rates must be positive".into()));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::InvalidParam("weight decay is fixed at 0".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParam("invalid optimizer moments".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParam("step count must be positive".into()));
        }
        if let Some(b) = self.act_bits {
            QuantConfig::per_tensor(b)?;
        }
        QuantConfig::new(self.weight.bits, self.weight.granularity)?;
        Ok(())
    }
}

/// Learnable parameters of one layer. The same shape carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub band: Option<BandIncrement>,
    pub log_scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Upper/lower clipping logits, empty when clipping is off.
    pub clip_hi: Vec<f64>,
    pub clip_lo: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Band,
    LogScale,
    Shift,
    ClipHi,
    ClipLo,
}

/// Address of one scalar parameter inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
}

impl LayerParams {
    pub fn slot(&self, kind: ParamKind) -> &[f64] {
        match kind {
            ParamKind::Band => self.band.as_ref().map_or(&[], |b| b.values().data()),
            ParamKind::LogScale => &self.log_scale,
            ParamKind::Shift => &self.shift,
            ParamKind::ClipHi => &self.clip_hi,
            ParamKind::ClipLo => &self.clip_lo,
        }
    }

    pub fn slot_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        match kind {
            ParamKind::Band => self.band.as_mut().map_or(&mut [], |b| b.values_mut()),
            ParamKind::LogScale => &mut self.log_scale,
            ParamKind::Shift => &mut self.shift,
            ParamKind::ClipHi => &mut self.clip_hi,
            ParamKind::ClipLo => &mut self.clip_lo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Desv,
    Aux,
}

/// Frozen per-layer data.
#[derive(Debug, Clone)]
struct Frozen {
    svd: Option<SvdFactors>,
    transposed: bool,
    lsi: bool,
    layout: GroupLayout,
}

/// Rounding offsets that reproduce a forward pass in frozen mode.
#[derive(Debug, Clone)]
pub struct LayerOffsets {
    weight: FrozenRounding,
    act: Option<FrozenRounding>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    w_prime: Matrix,
    smooth: SmoothParams,
    x_t: Matrix,
    xq: Matrix,
    act: Option<FakeQuantTape>,
    wq: Matrix,
    weight: FakeQuantTape,
    /// Pre-activation output.
    y: Matrix,
}

/// Intermediate values of a quantized block forward pass.
#[derive(Debug, Clone)]
pub struct BlockTape {
    layers: Vec<LayerTape>,
    activation: Activation,
}

impl BlockTape {
    pub fn offsets(&self) -> Vec<LayerOffsets> {
        self.layers
            .iter()
            .map(|l| LayerOffsets {
                weight: l.weight.rounding_offsets(),
                act: l.act.as_ref().map(|t| t.rounding_offsets()),
            })
            .collect()
    }

    /// Discrete decisions of the pass (see [`FakeQuantTape::discrete_state`]),
    /// plus the sign pattern of ReLU inputs.
    pub fn discrete_state(&self, with_codes: bool) -> Vec<i64> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.weight.discrete_state(with_codes));
            if let Some(t) = &l.act {
                out.extend(t.discrete_state(with_codes));
            }
            if self.activation == Activation::Relu && i + 1 < self.layers.len() {
                out.extend(l.y.data().iter().map(|&v| (v > 0.0) as i64));
            }
        }
        out
    }
}

/// A block under calibration: frozen weights and factors plus the
/// learnable parameters of every layer.
#[derive(Debug, Clone)]
pub struct BlockTrainer {
    pub block: Block,
    pub cfg: TrainConfig,
    frozen: Vec<Frozen>,
    pub params: Vec<LayerParams>,
}

impl BlockTrainer {
    /// Decomposes every weight and initializes parameters. `x` is the block
    /// input used for smoothing initialization.
    pub fn new(block: &Block, x: &Matrix, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let inputs = block.layer_inputs(x)?;
        let mut frozen = Vec::with_capacity(block.layers.len());
        let mut params = Vec::with_capacity(block.layers.len());
        for (layer, input) in block.layers.iter().zip(&inputs) {
            let (in_dim, out_dim) = layer.w.shape();
            let transposed = in_dim < out_dim;
            let (svd_f, band) = match cfg.increment {
                Increment::None => (None, None),
                inc => {
                    let m = if transposed { layer.w.transpose() } else { layer.w.clone() };
                    let f = svd(&m)?;
                    let (a, b) = m.shape();
                    let n = match inc {
                        Increment::Band { n_diag } => effective_diagonals(n_diag, a, b),
                        _ => 0,
                    };
                    (Some(f), Some(BandIncrement::zeros(n, b)))
                }
            };
            let layout = cfg.weight.layout(in_dim, out_dim)?;
            let smooth = match cfg.smooth_init {
                SmoothInit::Identity => SmoothParams::identity(in_dim),
                SmoothInit::Migration => SmoothParams::migration_init(input, &layer.w)?,
            };
            let groups = if cfg.clip_init_logit.is_some() { layout.n_groups() } else { 0 };
            let logit = cfg.clip_init_logit.unwrap_or(0.0);
            params.push(LayerParams {
                band,
                log_scale: smooth.scale.iter().map(|s| s.ln()).collect(),
                shift: smooth.shift,
                clip_hi: vec![logit; groups],
                clip_lo: vec![logit; groups],
            });
            frozen.push(Frozen { svd: svd_f, transposed, lsi: cfg.increment == Increment::Lsi, layout });
        }
        Ok(Self { block: block.clone(), cfg: cfg.clone(), frozen, params })
    }

    /// Weight of layer `i` with its current increment applied.
    pub fn layer_weight(&self, i: usize) -> Result<Matrix> {
        let fr = &self.frozen[i];
        let (Some(f), Some(band)) = (&fr.svd, &self.params[i].band) else {
            return Ok(self.block.layers[i].w.clone());
        };
        let m = if fr.lsi {
            desv::lsi_reconstruct(&f.u, &f.s, band.values().row(0), &f.v)?
        } else {
            desv::desv_weight(f, band)?
        };
        Ok(if fr.transposed { m.transpose() } else { m })
    }

    pub fn smooth(&self, i: usize) -> SmoothParams {
        let p = &self.params[i];
        SmoothParams { scale: p.log_scale.iter().map(|v| v.exp()).collect(), shift: p.shift.clone() }
    }

    pub fn clip(&self, i: usize) -> ClipParams {
        let p = &self.params[i];
        if p.clip_hi.is_empty() {
            ClipParams::identity(self.frozen[i].layout.n_groups())
        } else {
            ClipParams::from_logits(&p.clip_hi, &p.clip_lo)
        }
    }

    pub fn learns(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Band => self.cfg.increment != Increment::None,
            ParamKind::LogScale | ParamKind::Shift => self.cfg.learn_smooth,
            ParamKind::ClipHi | ParamKind::ClipLo => self.cfg.clip_init_logit.is_some(),
        }
    }

    fn group_kinds(group: ParamGroup) -> &'static [ParamKind] {
        match group {
            ParamGroup::Desv => &[ParamKind::Band],
            ParamGroup::Aux => &[ParamKind::LogScale, ParamKind::Shift, ParamKind::ClipHi, ParamKind::ClipLo],
        }
    }

    /// Every learnable scalar, in optimizer order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for group in [ParamGroup::Desv, ParamGroup::Aux] {
            out.extend(self.group_refs(group));
        }
        out
    }

    fn group_refs(&self, group: ParamGroup) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (layer, p) in self.params.iter().enumerate() {
            for &kind in Self::group_kinds(group) {
                if self.learns(kind) {
                    out.extend((0..p.slot(kind).len()).map(|index| ParamRef { layer, kind, index }));
                }
            }
        }
        out
    }

    pub fn get(&self, r: ParamRef) -> f64 {
        self.params[r.layer].slot(r.kind)[r.index]
    }

    pub fn set(&mut self, r: ParamRef, v: f64) {
        self.params[r.layer].slot_mut(r.kind)[r.index] = v;
    }

    pub(crate) fn gather(params: &[LayerParams], refs: &[ParamRef]) -> Vec<f64> {
        refs.iter().map(|r| params[r.layer].slot(r.kind)[r.index]).collect()
    }

    pub(crate) fn scatter(params: &mut [LayerParams], refs: &[ParamRef], values: &[f64]) {
        for (r, &v) in refs.iter().zip(values) {
            params[r.layer].slot_mut(r.kind)[r.index] = v;
        }
    }

    pub(crate) fn optimizer_groups(&self) -> [(ParamGroup, Vec<ParamRef>); 2] {
        [(ParamGroup::Desv, self.group_refs(ParamGroup::Desv)), (ParamGroup::Aux, self.group_refs(ParamGroup::Aux))]
    }

    /// Quantized forward pass. With `frozen`, rounding uses recorded offsets
    /// instead of nearest rounding (see [`Rounding::Frozen`]).
    pub fn forward(&self, x: &Matrix, frozen: Option<&[LayerOffsets]>) -> Result<(Matrix, BlockTape)> {
        if x.cols() != self.block.in_dim() {
            return Err(Error::shape("block forward", x.shape(), self.block.layers[0].w.shape()));
        }
        let n = self.block.layers.len();
        let mut tapes = Vec::with_capacity(n);
        let mut h = x.clone();
        for i in 0..n {
            let offs = frozen.map(|o| &o[i]);
            let tape = self.forward_layer(i, &h, offs)?;
            h = if i + 1 < n { self.block.activation.apply_matrix(&tape.y) } else { tape.y.clone() };
            tapes.push(tape);
        }
        Ok((h, BlockTape { layers: tapes, activation: self.block.activation }))
    }

    fn forward_layer(&self, i: usize, x: &Matrix, offs: Option<&LayerOffsets>) -> Result<LayerTape> {
        let w_prime = self.layer_weight(i)?;
        let smooth = self.smooth(i);
        let x_t = smooth_activations(x, &smooth)?;
        let (w_t, b_t) = smooth_weights(&w_prime, &self.block.layers[i].bias, &smooth)?;
        let (xq, act) = match self.cfg.act_bits {
            None => (x_t.clone(), None),
            Some(bits) => {
                let acfg = QuantConfig::per_tensor(bits)?;
                let layout = acfg.layout(x_t.rows(), x_t.cols())?;
                let rounding = match offs.and_then(|o| o.act.as_ref()) {
                    Some(f) => Rounding::Frozen(f),
                    None => Rounding::Nearest,
                };
                let (xq, tape) = quantizer::forward(&x_t, &acfg, &layout, &[1.0], &[1.0], rounding);
                (xq, Some(tape))
            }
        };
        let clip = self.clip(i);
        let rounding = match offs {
            Some(o) => Rounding::Frozen(&o.weight),
            None => Rounding::Nearest,
        };
        let (wq, weight) =
            quantizer::forward(&w_t, &self.cfg.weight, &self.frozen[i].layout, &clip.gamma, &clip.beta, rounding);
        let mut y = xq.matmul(&wq)?;
        add_bias(&mut y, &b_t);
        Ok(LayerTape { w_prime, smooth, x_t, xq, act, wq, weight, y })
    }

    /// Gradients of a scalar loss with upstream `g_out = ∂L/∂output`.
    ///
    /// `round_slope` is the derivative given to rounding: `1.0` for the
    /// straight-through estimator used in training, `0.0` for the exact
    /// derivative of the piecewise-constant forward pass.
    pub fn backward(&self, tape: &BlockTape, g_out: &Matrix, round_slope: f64) -> Result<Vec<LayerParams>> {
        let n = self.block.layers.len();
        let mut grads: Vec<LayerParams> = self
            .params
            .iter()
            .map(|p| LayerParams {
                band: p.band.as_ref().map(|b| BandIncrement::zeros(b.n_diag(), b.b())),
                log_scale: vec![0.0; p.log_scale.len()],
                shift: vec![0.0; p.shift.len()],
                clip_hi: vec![0.0; p.clip_hi.len()],
                clip_lo: vec![0.0; p.clip_lo.len()],
            })
            .collect();
        let mut g_y = g_out.clone();
        for i in (0..n).rev() {
            let lt = &tape.layers[i];
            let g_wq = lt.xq.t_matmul(&g_y)?;
            let g_xq = g_y.matmul_t(&lt.wq)?;
            let g_bt = g_y.col_sums();
            let wg = quantizer::backward(&lt.weight, &g_wq, round_slope);
            let g_xt = match &lt.act {
                None => g_xq,
                Some(t) => quantizer::backward(t, &g_xq, round_slope).input,
            };
            let sg = smooth_backward(&lt.x_t, &lt.w_prime, &lt.smooth, &g_xt, &wg.input, &g_bt);

            let p = &self.params[i];
            let g = &mut grads[i];
            for (k, gs) in sg.scale.iter().enumerate() {
                g.log_scale[k] = gs * lt.smooth.scale[k];
            }
            g.shift.copy_from_slice(&sg.shift);
            for k in 0..p.clip_hi.len() {
                let hi = sigmoid(p.clip_hi[k]);
                let lo = sigmoid(p.clip_lo[k]);
                g.clip_hi[k] = wg.gamma[k] * hi * (1.0 - hi);
                g.clip_lo[k] = wg.beta[k] * lo * (1.0 - lo);
            }
            let fr = &self.frozen[i];
            if let (Some(f), Some(band)) = (&fr.svd, &p.band) {
                let g_m = if fr.transposed { sg.w.transpose() } else { sg.w.clone() };
                g.band = Some(if fr.lsi {
                    BandIncrement::from_lsi(&desv::grad_lsi(&g_m, &f.u, &f.v)?)?
                } else {
                    desv::grad_band(&g_m, &f.u, &f.v, band.n_diag())?
                });
            }
            if i > 0 {
                let prev = &tape.layers[i - 1].y;
                let act = self.block.activation;
                let mut gx = sg.x;
                for (gv, &yv) in gx.data_mut().iter_mut().zip(prev.data()) {
                    *gv *= act.derivative(yv);
                }
                g_y = gx;
            }
        }
        Ok(grads)
    }

    /// Mean squared error against `target` on the quantized path.
    pub fn loss(&self, x: &Matrix, target: &Matrix) -> Result<f64> {
        mse(target, &self.forward(x, None)?.0)
    }

    pub fn loss_and_grad(&self, x: &Matrix, target: &Matrix, round_slope: f64) -> Result<(f64, Vec<LayerParams>)> {
        let (out, tape) = self.forward(x, None)?;
        let (loss, g_out) = mse_with_grad(target, &out)?;
        Ok((loss, self.backward(&tape, &g_out, round_slope)?))
    }

    /// Deployable quantized block at the current parameters.
    pub fn export(&self) -> Result<QuantizedBlock> {
        let layers = (0..self.block.layers.len())
            .map(|i| {
                let layer = &self.block.layers[i];
                let mut q = QuantizedLayer::build(
                    layer.name.clone(),
                    &self.layer_weight(i)?,
                    &layer.bias,
                    self.cfg.weight,
                    self.cfg.act_bits,
                    self.smooth(i),
                    self.clip(i),
                )?;
                if let (Some(f), Some(band)) = (&self.frozen[i].svd, &self.params[i].band) {
                    q.audit =
                        Some(SvdAudit { factors: f.clone(), band: band.clone(), transposed: self.frozen[i].transposed });
                }
                Ok(q)
            })
            .collect::<Result<_>>()?;
        Ok(QuantizedBlock { layers, activation: self.block.activation })
    }
}

/// `mean((out − target)²)` and its gradient with respect to `out`.
pub(crate) fn mse_with_grad(target: &Matrix, out: &Matrix) -> Result<(f64, Matrix)> {
    let d = out.sub(target)?;
    let n = d.data().len() as f64;
    let loss = d.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, d.scaled(2.0 / n)))
}
