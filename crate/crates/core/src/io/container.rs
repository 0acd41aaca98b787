//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSVQ" | version u32 | count u32
//! per tensor: name_len u32 | name (UTF-8) | dtype u8 | ndim u8 | dims u64 × ndim | payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"DSVQ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
    U8 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I32,
            3 => DType::U8,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I32 => TensorData::I32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        }
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => self == other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let count = element_count(&dims).ok_or_else(|| Error::InvalidInput(format!("tensor {name}: dims overflow")))?;
        if count != data.len() as u64 {
            return Err(Error::InvalidInput(format!(
                "tensor {name}: dims {dims:?} hold {count} elements, payload has {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidInput(format!("tensor {name}: too many dimensions")));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self { name: name.into(), dims: vec![v.len() as u64], data: TensorData::F64(v.to_vec()) }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Floating-point values as f64 (f32 is widened exactly).
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(Error::Manifest(format!("tensor {} is not floating point", self.name))),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let [r, c] = self.dims[..] else {
            return Err(Error::Manifest(format!("tensor {} has {} dims, expected 2", self.name, self.dims.len())));
        };
        Matrix::new(r as usize, c as usize, self.to_f64()?)
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.name == other.name && self.dims == other.dims && self.data.bits_eq(&other.data)
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

/// Ordered named tensors with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    tensors: Vec<Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Tensor) -> Result<()> {
        if self.get(&t.name).is_some() {
            return Err(Error::InvalidInput(format!("duplicate tensor name {}", t.name)));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bits_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype() as u8);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic".into() });
        }
        let at = r.pos as u64;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format { offset: at, msg: format!("unsupported version {version}") });
        }
        let count = r.u32("tensor count")?;
        let mut seen = HashSet::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let start = r.pos as u64;
            let len = r.u32("name length")? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format { offset: name_at, msg: "name is not UTF-8".into() })?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format { offset: start, msg: format!("duplicate tensor name {name}") });
            }
            let dt_at = r.pos as u64;
            let dtype = DType::from_u8(r.u8("dtype")?)
                .ok_or_else(|| Error::Format { offset: dt_at, msg: "unknown dtype".into() })?;
            let ndim = r.u8("ndim")? as usize;
            let dims = (0..ndim).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
            let payload_at = r.pos as u64;
            let bytes_len = element_count(&dims)
                .and_then(|n| n.checked_mul(dtype.size() as u64))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| Error::Format { offset: payload_at, msg: "payload size overflows".into() })?;
            let data = TensorData::read_le(dtype, r.take(bytes_len, "payload")?);
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes".into() });
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    fs::write(path, c.to_bytes())?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    Container::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let c = Container::new();
        let bytes = c.to_bytes();
        assert_eq!(bytes, b"DSVQ\x01\x00\x00\x00\x00\x00\x00\x00");
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn f32_golden_bytes() {
        let mut c = Container::new();
        c.push(Tensor::new("t", vec![2], TensorData::F32(vec![1.0, -2.5])).unwrap()).unwrap();
        let mut want = b"DSVQ".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&[1, 0, 0, 0, b't', 0, 1]);
        want.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
        assert_eq!(c.to_bytes(), want);
        assert_eq!(Container::from_bytes(&want).unwrap(), c);
    }

    #[test]
    fn format_errors_name_offsets() {
        let mut c = Container::new();
        c.push(Tensor::new("ab", vec![3], TensorData::U8(vec![1, 2, 3])).unwrap()).unwrap();
        let good = c.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));

        // payload starts after header (12), name (4 + 2), dtype, ndim and one dim
        let cut = &good[..good.len() - 1];
        assert!(matches!(Container::from_bytes(cut), Err(Error::Format { offset: 28, .. })));

        let mut bad = good.clone();
        bad[18] = 9;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 18, .. })));

        let mut long = good;
        long.push(0);
        assert!(matches!(Container::from_bytes(&long), Err(Error::Format { offset: 31, .. })));
    }

    #[test]
    fn rejects_duplicates_and_bad_dims() {
        let mut c = Container::new();
        c.push(Tensor::vector("x", &[1.0])).unwrap();
        assert!(c.push(Tensor::vector("x", &[2.0])).is_err());
        assert!(Tensor::new("y", vec![2, 2], TensorData::I32(vec![1, 2, 3])).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let m = Matrix::from_fn(3, 2, |r, c| r as f64 - 0.25 * c as f64);
        assert_eq!(Tensor::from_matrix("m", &m).to_matrix().unwrap(), m);
    }
}
