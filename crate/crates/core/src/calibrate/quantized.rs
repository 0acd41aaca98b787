use crate::desv::BandIncrement;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SvdFactors};
use crate::quantizer::{compute_params, dequantize, quantize, ClipParams, IntCodes, QuantConfig, QuantParams};
use crate::transform::{invert_smooth, smooth_activations, smooth_weights, SmoothParams};

use super::model::{add_bias, fake_quant_activations, mse, Activation, Block};

/// Frozen decomposition and learned increment, kept for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdAudit {
    pub factors: SvdFactors,
    pub band: BandIncrement,
    /// The decomposed matrix is the transpose of the stored weight.
    pub transposed: bool,
}

/// A deployable quantized linear layer.
///
/// Codes and parameters describe the smoothed weight `scale ⊙ W'`; at run
/// time activations are smoothed with the same parameters, quantized per
/// tensor, and multiplied with the dequantized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub weight_cfg: QuantConfig,
    pub act_bits: Option<u32>,
    pub codes: IntCodes,
    pub params: QuantParams,
    pub clip: ClipParams,
    pub smooth: SmoothParams,
    /// Bias with the smoothing shift folded in.
    pub bias: Vec<f64>,
    pub audit: Option<SvdAudit>,
}

impl QuantizedLayer {
    /// Quantizes `w` (already carrying any learned increment) under the given
    /// smoothing and clipping.
    pub fn build(
        name: impl Into<String>,
        w: &Matrix,
        bias: &[f64],
        weight_cfg: QuantConfig,
        act_bits: Option<u32>,
        smooth: SmoothParams,
        clip: ClipParams,
    ) -> Result<Self> {
        let (w_t, b_t) = smooth_weights(w, bias, &smooth)?;
        let params = compute_params(&w_t, &weight_cfg, &clip)?;
        let codes = quantize(&w_t, &params, &weight_cfg)?;
        Ok(Self { name: name.into(), weight_cfg, act_bits, codes, params, clip, smooth, bias: b_t, audit: None })
    }

    pub fn in_dim(&self) -> usize {
        self.codes.rows
    }

    pub fn out_dim(&self) -> usize {
        self.codes.cols
    }

    /// Dequantized smoothed weight.
    pub fn dequantized(&self) -> Result<Matrix> {
        dequantize(&self.codes, &self.params, &self.weight_cfg)
    }

    /// Dequantized weight mapped back through the smoothing transform, i.e.
    /// the weight this layer effectively applies to unsmoothed inputs.
    pub fn effective_weight(&self) -> Result<(Matrix, Vec<f64>)> {
        invert_smooth(&self.dequantized()?, &self.bias, &self.smooth)
    }

    /// Pre-activation output.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let x_t = smooth_activations(x, &self.smooth)?;
        let xq = fake_quant_activations(&x_t, self.act_bits)?;
        let mut y = xq.matmul(&self.dequantized()?)?;
        add_bias(&mut y, &self.bias);
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub layers: Vec<QuantizedLayer>,
    pub activation: Activation,
}

impl QuantizedBlock {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            h = if i + 1 < self.layers.len() { self.activation.apply_matrix(&y) } else { y };
        }
        Ok(h)
    }
}

/// Round-to-nearest baseline: no smoothing, clipping or increments.
pub fn rtn_block(block: &Block, weight_cfg: QuantConfig, act_bits: Option<u32>) -> Result<QuantizedBlock> {
    let layers = block
        .layers
        .iter()
        .map(|l| {
            let groups = weight_cfg.layout(l.in_dim(), l.out_dim())?.n_groups();
            QuantizedLayer::build(
                l.name.clone(),
                &l.w,
                &l.bias,
                weight_cfg,
                act_bits,
                SmoothParams::identity(l.in_dim()),
                ClipParams::identity(groups),
            )
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedBlock { layers, activation: block.activation })
}

/// Mean squared output difference between the full-precision block and a
/// quantized version of it.
pub fn quantized_block_loss(block: &Block, quantized: &QuantizedBlock, x: &Matrix) -> Result<f64> {
    if block.layers.len() != quantized.layers.len() {
        return Err(Error::InvalidInput("quantized block does not match block".into()));
    }
    mse(&block.forward(x)?, &quantized.forward(x)?)
}
