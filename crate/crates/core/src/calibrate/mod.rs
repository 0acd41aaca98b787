//! Block-wise calibration of quantized blocks.

mod model;
mod optim;
mod quantized;
mod run;
mod trainable;

pub use model::{block_forward, block_loss, mse, Activation, Block, LayerTransform, LinearLayer, QuantContext};
pub use optim::{AdamW, AdamWConfig};
pub use quantized::{quantized_block_loss, rtn_block, QuantizedBlock, QuantizedLayer, SvdAudit};
pub use run::{
    calibrate_block, calibrate_layer, calibrate_model, CalibRecord, ModelCalibration, DIVERGENCE_FACTOR,
    DIVERGENCE_FLOOR, DIVERGENCE_PATIENCE,
};
pub(crate) use trainable::mse_with_grad;
pub use trainable::{
    BlockTape, BlockTrainer, Increment, LayerOffsets, LrSchedule, LayerParams, ParamGroup, ParamKind, ParamRef, SmoothInit,
    TrainConfig, DEFAULT_CLIP_LOGIT, DEFAULT_LR_AUX, DEFAULT_LR_DESV, DEFAULT_STEPS,
};
