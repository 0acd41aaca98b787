use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::model::{mse, Activation, Block, LinearLayer};
use super::optim::{AdamW, AdamWConfig};
use super::quantized::{quantized_block_loss, rtn_block, QuantizedBlock, QuantizedLayer};
use super::trainable::{BlockTrainer, ParamGroup, TrainConfig};

/// Divergence: loss above this multiple of the initial loss ...
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// ... for this many consecutive steps.
pub const DIVERGENCE_PATIENCE: usize = 20;
/// Losses below this fraction of the target's mean square never count as
/// divergent, so an (almost) lossless start cannot trip the check on noise.
pub const DIVERGENCE_FLOOR: f64 = 1e-12;

/// Loss trace of one block's calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibRecord {
    pub block: usize,
    /// Minibatch loss at each step, before that step's update.
    pub losses: Vec<f64>,
    /// Full-data loss before and after calibration.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Full-data loss of plain round-to-nearest quantization.
    pub rtn_loss: f64,
    pub steps: usize,
    pub wall_time: Duration,
}

/// Calibrates every layer of `block` jointly against the block output.
///
/// `x` is the block input (already propagated through earlier quantized
/// blocks); targets are the full-precision block applied to it.
pub fn calibrate_block(block: &Block, x: &Matrix, cfg: &TrainConfig) -> Result<(QuantizedBlock, CalibRecord)> {
    calibrate_block_indexed(block, 0, x, cfg)
}

fn calibrate_block_indexed(
    block: &Block,
    index: usize,
    x: &Matrix,
    cfg: &TrainConfig,
) -> Result<(QuantizedBlock, CalibRecord)> {
    let started = Instant::now();
    let target = block.forward(x)?;
    let mut trainer = BlockTrainer::new(block, x, cfg)?;
    let initial_loss = trainer.loss(x, &target)?;
    let rtn_loss = quantized_block_loss(block, &rtn_block(block, cfg.weight, cfg.act_bits)?, x)?;
    let target_power = target.data().iter().map(|v| v * v).sum::<f64>() / target.data().len() as f64;
    let limit = DIVERGENCE_FACTOR * initial_loss.max(DIVERGENCE_FLOOR * target_power);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = trainer.optimizer_groups();
    let mut optimizers: Vec<(ParamGroup, AdamW)> = groups
        .iter()
        .map(|(g, refs)| {
            let lr = match g {
                ParamGroup::Desv => cfg.lr_desv,
                ParamGroup::Aux => cfg.lr_aux,
            };
            let c = AdamWConfig {
                lr,
                beta1: cfg.betas.0,
                beta2: cfg.betas.1,
                epsilon: cfg.epsilon,
                weight_decay: cfg.weight_decay,
            };
            (*g, AdamW::new(c, refs.len()))
        })
        .collect();

    let mut record = CalibRecord {
        block: index,
        losses: Vec::with_capacity(cfg.steps),
        initial_loss,
        final_loss: f64::NAN,
        rtn_loss,
        steps: 0,
        wall_time: Duration::ZERO,
    };
    let mut streak = 0;
    let n_rows = x.rows();
    for step in 0..cfg.steps {
        let (xb, tb);
        let (xs, ts) = if cfg.batch == 0 || cfg.batch >= n_rows {
            (x, &target)
        } else {
            let mut idx = sample(&mut rng, n_rows, cfg.batch).into_vec();
            idx.sort_unstable();
            xb = x.select_rows(&idx);
            tb = target.select_rows(&idx);
            (&xb, &tb)
        };
        let (loss, grads) = trainer.loss_and_grad(xs, ts, 1.0)?;
        record.losses.push(loss);
        record.steps = step + 1;
        if loss > limit {
            streak += 1;
            if streak >= DIVERGENCE_PATIENCE {
                record.wall_time = started.elapsed();
                return Err(Error::Divergence { step, loss, initial: initial_loss, record: Box::new(record) });
            }
        } else {
            streak = 0;
        }
        let factor = cfg.schedule.factor(step, cfg.steps);
        for ((group, refs), (_, opt)) in groups.iter().zip(optimizers.iter_mut()) {
            if refs.is_empty() {
                continue;
            }
            opt.cfg.lr = factor
                * match group {
                    ParamGroup::Desv => cfg.lr_desv,
                    ParamGroup::Aux => cfg.lr_aux,
                };
            let g = BlockTrainer::gather(&grads, refs);
            let mut p = BlockTrainer::gather(&trainer.params, refs);
            opt.step(&mut p, &g).map_err(|_| Error::NonFiniteGradient {
                step,
                group: match group {
                    ParamGroup::Desv => "desv",
                    ParamGroup::Aux => "aux",
                },
            })?;
            BlockTrainer::scatter(&mut trainer.params, refs, &p);
        }
    }
    let quantized = trainer.export()?;
    record.final_loss = mse(&target, &quantized.forward(x)?)?;
    record.wall_time = started.elapsed();
    Ok((quantized, record))
}

/// Calibrates a single layer as a one-layer block.
pub fn calibrate_layer(layer: &LinearLayer, x: &Matrix, cfg: &TrainConfig) -> Result<(QuantizedLayer, CalibRecord)> {
    let block = Block::new(vec![layer.clone()], Activation::None)?;
    let (mut q, rec) = calibrate_block(&block, x, cfg)?;
    Ok((q.layers.remove(0), rec))
}

#[derive(Debug, Clone)]
pub struct ModelCalibration {
    pub blocks: Vec<QuantizedBlock>,
    pub records: Vec<CalibRecord>,
    /// Input each block was calibrated on.
    pub block_inputs: Vec<Matrix>,
}

/// Calibrates blocks in order, feeding each block the output of the
/// already-quantized blocks before it. Block `k` uses seed `cfg.seed + k`.
pub fn calibrate_model(model: &[Block], calib: &[Matrix], cfg: &TrainConfig) -> Result<ModelCalibration> {
    if calib.is_empty() {
        return Err(Error::InvalidInput("no calibration batches".into()));
    }
    if model.is_empty() {
        return Err(Error::InvalidInput("model has no blocks".into()));
    }
    let mut x = Matrix::vstack(calib)?;
    let mut out = ModelCalibration { blocks: Vec::new(), records: Vec::new(), block_inputs: Vec::new() };
    for (k, block) in model.iter().enumerate() {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(k as u64);
        let (q, rec) = calibrate_block_indexed(block, k, &x, &c)
            .map_err(|e| Error::InBlock { block: k, source: Box::new(e) })?;
        let next = q.forward(&x)?;
        out.block_inputs.push(std::mem::replace(&mut x, next));
        out.blocks.push(q);
        out.records.push(rec);
    }
    Ok(out)
}
