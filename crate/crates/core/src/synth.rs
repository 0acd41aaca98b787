//! Seeded synthetic models, activation batches and the toy perplexity head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibrate::{Activation, Block, LinearLayer};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// `blocks` identical-shaped blocks whose layers chain through `dims`.
/// Weights and biases are drawn from `N(0, std²)`; without `weight_std`
/// each layer uses `std = 1/sqrt(in_dim)`.
pub fn toy_model(
    blocks: usize,
    dims: &[usize],
    activation: Activation,
    weight_std: Option<f64>,
    seed: u64,
) -> Result<Vec<Block>> {
    if blocks == 0 || dims.len() < 2 {
        return Err(Error::InvalidParam("need at least one block and two dims".into()));
    }
    if blocks > 1 && dims[0] != dims[dims.len() - 1] {
        return Err(Error::InvalidParam("stacked blocks need equal first and last dims".into()));
    }
    let mut r = rng(seed);
    (0..blocks)
        .map(|_| {
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, d)| {
                    let std = weight_std.unwrap_or(1.0 / (d[0] as f64).sqrt());
                    let w = gaussian(&mut r, d[0], d[1], std);
                    let b = gaussian(&mut r, 1, d[1], std).into_data();
                    LinearLayer::new(format!("fc{}", i + 1), w, b)
                })
                .collect::<Result<_>>()?;
            Block::new(layers, activation)
        })
        .collect()
}

/// Standard Gaussian rows; with `correlated`, each batch is mixed by one
/// shared random `dim × dim` matrix with `N(0, 1/dim)` entries.
pub fn calib_batches(dim: usize, rows: usize, batches: usize, correlated: bool, seed: u64) -> Result<Vec<Matrix>> {
    if dim == 0 || rows == 0 {
        return Err(Error::InvalidParam("batch dims must be positive".into()));
    }
    let mut r = rng(seed);
    let mix = correlated.then(|| gaussian(&mut r, dim, dim, 1.0 / (dim as f64).sqrt()));
    (0..batches)
        .map(|_| {
            let z = gaussian(&mut r, rows, dim, 1.0);
            match &mix {
                Some(a) => z.matmul(a),
                None => Ok(z),
            }
        })
        .collect()
}

/// Single `dim × dim` layer with `N(0, 0.02²)` weights and zero bias, and
/// `rows` correlated inputs `Z·A` (`Z ~ N(0, 1)`, `A ~ N(0, 1/dim)`).
pub fn calibration_fixture(dim: usize, rows: usize, seed: u64) -> Result<(LinearLayer, Matrix)> {
    let mut r = rng(seed);
    let w = gaussian(&mut r, dim, dim, 0.02);
    let z = gaussian(&mut r, rows, dim, 1.0);
    let a = gaussian(&mut r, dim, dim, 1.0 / (dim as f64).sqrt());
    Ok((LinearLayer::new("fc", w, vec![0.0; dim])?, z.matmul(&a)?))
}

/// Random linear next-token head used for a relative perplexity readout.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHead {
    pub weights: Matrix,
    /// Divides the logits; fitted so the reference logits have unit RMS.
    pub temperature: f64,
}

impl ToyHead {
    /// Head of `N(0, 1)` weights whose temperature is fitted to the
    /// full-precision `reference` outputs.
    pub fn fit(reference: &Matrix, vocab: usize, seed: u64) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::InvalidParam("vocabulary must be nonempty".into()));
        }
        let weights = gaussian(&mut rng(seed), reference.cols(), vocab, 1.0);
        let raw = reference.matmul(&weights)?;
        let rms = (raw.data().iter().map(|v| v * v).sum::<f64>() / raw.data().len() as f64).sqrt();
        Ok(Self { weights, temperature: if rms > 0.0 { rms } else { 1.0 } })
    }

    pub fn logits(&self, outputs: &Matrix) -> Result<Matrix> {
        Ok(outputs.matmul(&self.weights)?.scaled(1.0 / self.temperature))
    }
}

/// Per-row argmax token of the head's logits.
pub fn reference_tokens(outputs: &Matrix, head: &ToyHead) -> Result<Vec<usize>> {
    let logits = head.logits(outputs)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect())
}

/// `exp(mean cross-entropy)` of the head's softmax against `tokens`.
pub fn toy_perplexity(outputs: &Matrix, head: &ToyHead, tokens: &[usize]) -> Result<f64> {
    let logits = head.logits(outputs)?;
    if tokens.len() != logits.rows() {
        return Err(Error::shape("toy_perplexity", (tokens.len(), 1), logits.shape()));
    }
    let mut total = 0.0;
    for (r, &t) in tokens.iter().enumerate() {
        let row = logits.row(r);
        if t >= row.len() {
            return Err(Error::InvalidInput(format!("token {t} outside vocabulary of {}", row.len())));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok((total / tokens.len() as f64).exp())
}
