//! Tensor container, model bundles and CSV output.

mod bundle;
mod container;

use std::fmt::Write as _;

pub use bundle::{
    batches_container, decode, encode_plain, encode_quantized, load_model, matrices, read_bundle, write_bundle,
    BlockEntry, LayerEntry, Model, ModelManifest, QuantSection, FORMAT, MANIFEST_FILE, MANIFEST_VERSION, TENSORS_FILE,
};
pub use container::{read_container, write_container, Container, DType, Tensor, TensorData, MAGIC, VERSION};

use crate::calibrate::CalibRecord;

/// Per-step losses: `block,step,loss`.
pub fn records_csv(records: &[CalibRecord]) -> String {
    let mut out = String::from("block,step,loss\n");
    for r in records {
        for (k, l) in r.losses.iter().enumerate() {
            writeln!(out, "{},{k},{l:e}", r.block).unwrap();
        }
    }
    out
}

/// One line per block: `block,steps,initial_loss,final_loss,rtn_loss`.
pub fn summary_csv(records: &[CalibRecord]) -> String {
    let mut out = String::from("block,steps,initial_loss,final_loss,rtn_loss\n");
    for r in records {
        writeln!(out, "{},{},{:e},{:e},{:e}", r.block, r.steps, r.initial_loss, r.final_loss, r.rtn_loss).unwrap();
    }
    out
}
