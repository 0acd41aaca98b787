//! Model bundles: a directory holding `manifest.json` and `tensors.dsvq`.
//!
//! The manifest lists blocks and layers; each layer maps roles (`weight`,
//! `codes`, `scale`, ...) to tensor names in the container.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{Activation, Block, LinearLayer, QuantizedBlock, QuantizedLayer, SvdAudit, TrainConfig};
use crate::desv::BandIncrement;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SvdFactors};
use crate::quantizer::{ClipParams, IntCodes, QuantParams};
use crate::transform::SmoothParams;

use super::container::{read_container, write_container, Container, Tensor, TensorData};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.dsvq";
pub const FORMAT: &str = "dsvq-model";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub activation: Activation,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Role to tensor name.
    pub tensors: BTreeMap<String, String>,
    /// The audit factors decompose the transposed weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svd_transposed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSection {
    /// Requested number of band diagonals; 0 is the singular-value-only case.
    pub n_diag: Option<usize>,
    pub config: TrainConfig,
}

/// A model as stored: full precision or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Plain(Vec<Block>),
    Quantized { blocks: Vec<QuantizedBlock>, section: QuantSection },
}

impl Model {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        match self {
            Model::Plain(blocks) => {
                for b in blocks {
                    h = b.forward(&h)?;
                }
            }
            Model::Quantized { blocks, .. } => {
                for b in blocks {
                    h = b.forward(&h)?;
                }
            }
        }
        Ok(h)
    }

    /// Output of every block in turn.
    pub fn block_outputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut out: Vec<Matrix> = Vec::new();
        let mut h = x.clone();
        let n = self.n_blocks();
        for k in 0..n {
            h = match self {
                Model::Plain(b) => b[k].forward(&h)?,
                Model::Quantized { blocks, .. } => blocks[k].forward(&h)?,
            };
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn n_blocks(&self) -> usize {
        match self {
            Model::Plain(b) => b.len(),
            Model::Quantized { blocks, .. } => blocks.len(),
        }
    }

    /// Weight each layer applies to its (unsmoothed) input, with the bias.
    pub fn effective_weights(&self) -> Result<Vec<(String, Matrix, Vec<f64>)>> {
        match self {
            Model::Plain(blocks) => Ok(blocks
                .iter()
                .flat_map(|b| b.layers.iter().map(|l| (l.name.clone(), l.w.clone(), l.bias.clone())))
                .collect()),
            Model::Quantized { blocks, .. } => blocks
                .iter()
                .flat_map(|b| b.layers.iter())
                .map(|l| {
                    let (w, b) = l.effective_weight()?;
                    Ok((l.name.clone(), w, b))
                })
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Model::Plain(b) => b[0].in_dim(),
            Model::Quantized { blocks, .. } => blocks[0].layers[0].in_dim(),
        }
    }
}

struct Builder {
    container: Container,
}

impl Builder {
    fn add(&mut self, roles: &mut BTreeMap<String, String>, role: &str, t: Tensor) -> Result<()> {
        roles.insert(role.into(), t.name.clone());
        self.container.push(t)
    }
}

/// Manifest and container for a full-precision model.
pub fn encode_plain(blocks: &[Block]) -> Result<(ModelManifest, Container)> {
    let mut b = Builder { container: Container::new() };
    let mut entries = Vec::new();
    for (k, block) in blocks.iter().enumerate() {
        let mut layers = Vec::new();
        for l in &block.layers {
            let prefix = format!("b{k}.{}", l.name);
            let mut roles = BTreeMap::new();
            b.add(&mut roles, "weight", Tensor::from_matrix(format!("{prefix}.weight"), &l.w))?;
            b.add(&mut roles, "bias", Tensor::vector(format!("{prefix}.bias"), &l.bias))?;
            layers.push(LayerEntry {
                name: l.name.clone(),
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                tensors: roles,
                svd_transposed: None,
            });
        }
        entries.push(BlockEntry { activation: block.activation, layers });
    }
    let m = ModelManifest { format: FORMAT.into(), version: MANIFEST_VERSION, blocks: entries, quant: None };
    Ok((m, b.container))
}

/// Manifest and container for a quantized model.
pub fn encode_quantized(blocks: &[QuantizedBlock], section: QuantSection) -> Result<(ModelManifest, Container)> {
    let mut b = Builder { container: Container::new() };
    let mut entries = Vec::new();
    for (k, block) in blocks.iter().enumerate() {
        let mut layers = Vec::new();
        for l in &block.layers {
            let p = format!("b{k}.{}", l.name);
            let mut roles = BTreeMap::new();
            let g = l.params.n_groups() as u64;
            let codes = l.codes.codes.iter().map(|&c| c as i32).collect();
            b.add(
                &mut roles,
                "codes",
                Tensor::new(format!("{p}.codes"), vec![l.codes.rows as u64, l.codes.cols as u64], TensorData::I32(codes))?,
            )?;
            b.add(&mut roles, "scale", Tensor::vector(format!("{p}.scale"), &l.params.scale))?;
            let zero = l.params.zero.iter().map(|&z| z as i32).collect();
            b.add(&mut roles, "zero", Tensor::new(format!("{p}.zero"), vec![g], TensorData::I32(zero))?)?;
            b.add(&mut roles, "clip_lo", Tensor::vector(format!("{p}.clip_lo"), &l.params.clip_lo))?;
            b.add(&mut roles, "clip_hi", Tensor::vector(format!("{p}.clip_hi"), &l.params.clip_hi))?;
            let deg = l.params.degenerate.iter().map(|&d| d as u8).collect();
            b.add(&mut roles, "degenerate", Tensor::new(format!("{p}.degenerate"), vec![g], TensorData::U8(deg))?)?;
            b.add(&mut roles, "gamma", Tensor::vector(format!("{p}.gamma"), &l.clip.gamma))?;
            b.add(&mut roles, "beta", Tensor::vector(format!("{p}.beta"), &l.clip.beta))?;
            b.add(&mut roles, "smooth_scale", Tensor::vector(format!("{p}.smooth_scale"), &l.smooth.scale))?;
            b.add(&mut roles, "smooth_shift", Tensor::vector(format!("{p}.smooth_shift"), &l.smooth.shift))?;
            b.add(&mut roles, "bias", Tensor::vector(format!("{p}.bias"), &l.bias))?;
            let mut svd_transposed = None;
            if let Some(a) = &l.audit {
                b.add(&mut roles, "svd_u", Tensor::from_matrix(format!("{p}.svd_u"), &a.factors.u))?;
                b.add(&mut roles, "svd_s", Tensor::vector(format!("{p}.svd_s"), &a.factors.s))?;
                b.add(&mut roles, "svd_v", Tensor::from_matrix(format!("{p}.svd_v"), &a.factors.v))?;
                b.add(&mut roles, "band", Tensor::from_matrix(format!("{p}.band"), a.band.values()))?;
                svd_transposed = Some(a.transposed);
            }
            layers.push(LayerEntry {
                name: l.name.clone(),
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                tensors: roles,
                svd_transposed,
            });
        }
        entries.push(BlockEntry { activation: block.activation, layers });
    }
    let m = ModelManifest { format: FORMAT.into(), version: MANIFEST_VERSION, blocks: entries, quant: Some(section) };
    Ok((m, b.container))
}

fn role<'a>(c: &'a Container, entry: &LayerEntry, role: &str) -> Result<&'a Tensor> {
    let name = entry
        .tensors
        .get(role)
        .ok_or_else(|| Error::Manifest(format!("layer {} has no {role} tensor", entry.name)))?;
    let t = c.get(name).ok_or_else(|| Error::Manifest(format!("layer {}: {role} refers to missing tensor {name}", entry.name)))?;
    Ok(t)
}

fn expect_dims(entry: &LayerEntry, role: &str, t: &Tensor, dims: &[u64]) -> Result<()> {
    if t.dims != dims {
        return Err(Error::Manifest(format!(
            "layer {}: {role} tensor {} has dims {:?}, expected {dims:?}",
            entry.name,
            t.name,
            t.dims
        )));
    }
    Ok(())
}

fn vector(c: &Container, entry: &LayerEntry, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = role(c, entry, name)?;
    expect_dims(entry, name, t, &[len as u64])?;
    t.to_f64()
}

fn ints(c: &Container, entry: &LayerEntry, name: &str, dims: &[u64]) -> Result<Vec<i32>> {
    let t = role(c, entry, name)?;
    expect_dims(entry, name, t, dims)?;
    match &t.data {
        TensorData::I32(v) => Ok(v.clone()),
        _ => Err(Error::Manifest(format!("layer {}: {name} must be i32", entry.name))),
    }
}

fn matrix(c: &Container, entry: &LayerEntry, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let t = role(c, entry, name)?;
    expect_dims(entry, name, t, &[rows as u64, cols as u64])?;
    t.to_matrix()
}

/// Rebuilds a model and checks that the manifest and container agree.
pub fn decode(manifest: &ModelManifest, c: &Container) -> Result<Model> {
    if manifest.format != FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!("unsupported manifest {} v{}", manifest.format, manifest.version)));
    }
    if manifest.blocks.is_empty() {
        return Err(Error::Manifest("manifest lists no blocks".into()));
    }
    for b in &manifest.blocks {
        for l in &b.layers {
            for (r, name) in &l.tensors {
                if c.get(name).is_none() {
                    return Err(Error::Manifest(format!("layer {}: {r} refers to missing tensor {name}", l.name)));
                }
            }
        }
    }
    match &manifest.quant {
        None => {
            let blocks = manifest
                .blocks
                .iter()
                .map(|b| {
                    let layers = b
                        .layers
                        .iter()
                        .map(|e| {
                            let w = matrix(c, e, "weight", e.in_dim, e.out_dim)?;
                            let bias = vector(c, e, "bias", e.out_dim)?;
                            LinearLayer::new(e.name.clone(), w, bias)
                        })
                        .collect::<Result<_>>()?;
                    Block::new(layers, b.activation)
                })
                .collect::<Result<Vec<_>>>()?;
            check_chain(blocks.iter().map(|b| (b.in_dim(), b.out_dim())))?;
            Ok(Model::Plain(blocks))
        }
        Some(section) => {
            let cfg = &section.config;
            let blocks = manifest
                .blocks
                .iter()
                .map(|b| {
                    let layers = b.layers.iter().map(|e| decode_quantized_layer(c, e, cfg)).collect::<Result<Vec<_>>>()?;
                    check_chain(layers.iter().map(|l| (l.in_dim(), l.out_dim())))?;
                    Ok(QuantizedBlock { layers, activation: b.activation })
                })
                .collect::<Result<Vec<_>>>()?;
            check_chain(blocks.iter().map(|b| (b.layers[0].in_dim(), b.layers.last().unwrap().out_dim())))?;
            Ok(Model::Quantized { blocks, section: section.clone() })
        }
    }
}

fn check_chain(dims: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    let mut prev: Option<usize> = None;
    for (i, o) in dims {
        if let Some(p) = prev {
            if p != i {
                return Err(Error::Manifest(format!("dimension chain breaks: {p} feeds {i}")));
            }
        }
        prev = Some(o);
    }
    Ok(())
}

fn decode_quantized_layer(c: &Container, e: &LayerEntry, cfg: &TrainConfig) -> Result<QuantizedLayer> {
    let (rows, cols) = (e.in_dim, e.out_dim);
    let layout = cfg.weight.layout(rows, cols)?;
    let g = layout.n_groups();
    let codes = ints(c, e, "codes", &[rows as u64, cols as u64])?;
    let qmax = cfg.weight.qmax() as i64;
    let to_u32 = |v: Vec<i32>, what: &str| -> Result<Vec<u32>> {
        v.into_iter()
            .map(|x| {
                if (0..=qmax).contains(&(x as i64)) {
                    Ok(x as u32)
                } else {
                    Err(Error::Manifest(format!("layer {}: {what} value {x} outside [0, {qmax}]", e.name)))
                }
            })
            .collect()
    };
    let codes = IntCodes { rows, cols, bits: cfg.weight.bits, codes: to_u32(codes, "code")? };
    let deg_t = role(c, e, "degenerate")?;
    expect_dims(e, "degenerate", deg_t, &[g as u64])?;
    let degenerate = match &deg_t.data {
        TensorData::U8(v) => v.iter().map(|&d| d != 0).collect(),
        _ => return Err(Error::Manifest(format!("layer {}: degenerate must be u8", e.name))),
    };
    let params = QuantParams {
        scale: vector(c, e, "scale", g)?,
        zero: to_u32(ints(c, e, "zero", &[g as u64])?, "zero point")?,
        clip_lo: vector(c, e, "clip_lo", g)?,
        clip_hi: vector(c, e, "clip_hi", g)?,
        degenerate,
    };
    let clip = ClipParams::new(vector(c, e, "gamma", g)?, vector(c, e, "beta", g)?)?;
    let smooth = SmoothParams { scale: vector(c, e, "smooth_scale", rows)?, shift: vector(c, e, "smooth_shift", rows)? };
    smooth.validate(rows)?;
    let bias = vector(c, e, "bias", cols)?;
    let audit = match e.svd_transposed {
        None => None,
        Some(transposed) => {
            let (a, b) = if transposed { (cols, rows) } else { (rows, cols) };
            let u = matrix(c, e, "svd_u", a, a)?;
            let s = vector(c, e, "svd_s", b)?;
            let v = matrix(c, e, "svd_v", b, b)?;
            let band_t = role(c, e, "band")?;
            let values = band_t.to_matrix()?;
            if values.rows() % 2 == 0 || values.cols() != b {
                return Err(Error::Manifest(format!("layer {}: band tensor has shape {:?}", e.name, values.shape())));
            }
            let band = BandIncrement::new(values.rows() / 2, values)?;
            Some(SvdAudit { factors: SvdFactors { u, s, v }, band, transposed })
        }
    };
    Ok(QuantizedLayer {
        name: e.name.clone(),
        weight_cfg: cfg.weight,
        act_bits: cfg.act_bits,
        codes,
        params,
        clip,
        smooth,
        bias,
        audit,
    })
}

pub fn write_bundle(dir: impl AsRef<Path>, manifest: &ModelManifest, c: &Container) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    write_container(dir.join(TENSORS_FILE), c)
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<(ModelManifest, Container)> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let c = read_container(dir.join(TENSORS_FILE))?;
    Ok((manifest, c))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let (m, c) = read_bundle(dir)?;
    decode(&m, &c)
}

/// Every tensor of a container as a matrix, in order (activation batches).
pub fn matrices(c: &Container) -> Result<Vec<Matrix>> {
    c.tensors().iter().map(|t| t.to_matrix()).collect()
}

pub fn batches_container(batches: &[Matrix]) -> Result<Container> {
    let mut c = Container::new();
    for (k, b) in batches.iter().enumerate() {
        c.push(Tensor::from_matrix(format!("batch{k}"), b))?;
    }
    Ok(c)
}
