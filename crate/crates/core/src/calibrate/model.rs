use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::quantizer::{self, ClipParams, QuantConfig};
use crate::transform::{apply_smooth, SmoothParams};

/// Elementwise nonlinearity placed between consecutive layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    #[default]
    None,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Activation::None => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + GELU_K * x * x * x);
                let th = inner.tanh();
                let sech2 = 1.0 - th * th;
                0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::None => 1.0,
        }
    }

    pub fn apply_matrix(self, m: &Matrix) -> Matrix {
        match self {
            Activation::None => m.clone(),
            _ => m.map(|v| self.apply(v)),
        }
    }
}

/// `y = x · w + bias` with `w` stored `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, w: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != w.cols() {
            return Err(Error::shape("linear layer bias", (1, bias.len()), w.shape()));
        }
        if !bias.iter().all(|b| b.is_finite()) {
            return Err(Error::InvalidInput("bias contains non-finite values".into()));
        }
        Ok(Self { name: name.into(), w, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        affine(x, &self.w, &self.bias)
    }
}

pub(crate) fn affine(x: &Matrix, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    let mut y = matmul(x, w)?;
    add_bias(&mut y, bias);
    Ok(y)
}

pub(crate) fn add_bias(y: &mut Matrix, bias: &[f64]) {
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Ordered linear layers with a nonlinearity between consecutive ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
}

impl Block {
    pub fn new(layers: Vec<LinearLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("block has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape("block chain", pair[0].w.shape(), pair[1].w.shape()));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Full-precision forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        block_forward(self, x, None)
    }

    /// Inputs seen by each layer on the full-precision path.
    pub fn layer_inputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() { self.activation.apply_matrix(&y) } else { y };
        }
        Ok(inputs)
    }
}

/// Per-layer settings of a fake-quantized forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTransform {
    pub smooth: SmoothParams,
    pub clip: ClipParams,
}

/// Fake-quantization settings for a whole block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantContext {
    pub weight: QuantConfig,
    /// Per-tensor activation bit width; `None` keeps activations in float.
    pub act_bits: Option<u32>,
    pub layers: Vec<LayerTransform>,
}

impl QuantContext {
    /// No smoothing, no clipping.
    pub fn plain(block: &Block, weight: QuantConfig, act_bits: Option<u32>) -> Result<Self> {
        let layers = block
            .layers
            .iter()
            .map(|l| {
                let groups = weight.layout(l.in_dim(), l.out_dim())?.n_groups();
                Ok(LayerTransform { smooth: SmoothParams::identity(l.in_dim()), clip: ClipParams::identity(groups) })
            })
            .collect::<Result<_>>()?;
        Ok(Self { weight, act_bits, layers })
    }
}

/// Per-tensor dynamic fake quantization of activations.
pub(crate) fn fake_quant_activations(x: &Matrix, bits: Option<u32>) -> Result<Matrix> {
    match bits {
        None => Ok(x.clone()),
        Some(b) => {
            let cfg = QuantConfig::per_tensor(b)?;
            Ok(quantizer::fake_quant(x, &cfg, &ClipParams::identity(1))?.0)
        }
    }
}

/// Runs a block on the full-precision path, or with every layer smoothed and
/// fake-quantized when `quant` is given.
pub fn block_forward(block: &Block, x: &Matrix, quant: Option<&QuantContext>) -> Result<Matrix> {
    if x.cols() != block.in_dim() {
        return Err(Error::shape("block_forward", x.shape(), block.layers[0].w.shape()));
    }
    if let Some(q) = quant {
        if q.layers.len() != block.layers.len() {
            return Err(Error::InvalidInput(format!(
                "quant context covers {} layers, block has {}",
                q.layers.len(),
                block.layers.len()
            )));
        }
    }
    let mut h = x.clone();
    for (i, layer) in block.layers.iter().enumerate() {
        let y = match quant {
            None => layer.forward(&h)?,
            Some(q) => {
                let t = &q.layers[i];
                let s = apply_smooth(&h, &layer.w, &layer.bias, &t.smooth)?;
                let xq = fake_quant_activations(&s.x, q.act_bits)?;
                let (wq, _) = quantizer::fake_quant(&s.w, &q.weight, &t.clip)?;
                affine(&xq, &wq, &s.bias)?
            }
        };
        h = if i + 1 < block.layers.len() { block.activation.apply_matrix(&y) } else { y };
    }
    Ok(h)
}

/// Mean squared difference between two outputs.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64)
}

/// Output discrepancy between the full-precision and fake-quantized block.
pub fn block_loss(block: &Block, quant: &QuantContext, x: &Matrix) -> Result<f64> {
    mse(&block_forward(block, x, None)?, &block_forward(block, x, Some(quant))?)
}
