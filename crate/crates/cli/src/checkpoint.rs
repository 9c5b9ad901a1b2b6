//! Named-tensor checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! "CMPZ"            4 bytes magic
//! version           u32 (currently 1)
//! per tensor:
//!   name_len        u32
//!   name            name_len bytes of UTF-8
//!   dtype           u8   (0 = f32, 1 = f64)
//!   ndim            u8
//!   dims            ndim × u64
//!   values          prod(dims) × dtype size
//! crc32             u32 over every preceding byte
//! ```
//!
//! An empty tensor set is therefore 12 bytes.

use std::collections::BTreeSet;
use std::path::Path;

use composer_lab::numerics::{DType, Scalar};
use composer_lab::{Module, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CMPZ";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at offset 0")]
    BadMagic,
    #[error("unsupported format version {version} at offset 4")]
    Version { version: u32 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("unknown dtype code {code} at offset {offset}")]
    UnknownDtype { code: u8, offset: usize },
    #[error("crc mismatch at offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { offset: usize, stored: u32, computed: u32 },
    #[error("tensor name at offset {offset} is not valid UTF-8")]
    Utf8 { offset: usize },
    #[error("duplicate tensor name `{name}` at offset {offset}")]
    Duplicate { name: String, offset: usize },
    #[error("tensor `{name}` at offset {offset} is too large")]
    Oversized { name: String, offset: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap_or_else(T::nan)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x).unwrap_or_else(T::nan)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()),
        };
        NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&self.shape, self.data.to_scalars()).expect("shape checked on decode")
    }

    /// Bit-level equality, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (TensorData::F64(a), TensorData::F64(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Every parameter of `module`, in visit order.
    pub fn from_module<T: Scalar, M: Module<T>>(module: &M) -> Self {
        let mut tensors = Vec::new();
        module.visit(&mut |p| tensors.push(NamedTensor::from_tensor(p.name(), p.value())));
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Overwrites every parameter of `module` by name. The checkpoint must
    /// hold exactly the module's parameter names with matching shapes.
    pub fn load_into<T: Scalar, M: Module<T>>(&self, module: &mut M) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut err = None;
        module.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.get(p.name()) {
                None => err = Some(format!("missing tensor `{}`", p.name())),
                Some(t) if t.shape != p.shape() => {
                    err = Some(format!("`{}` has shape {:?}, model expects {:?}", t.name, t.shape, p.shape()))
                }
                Some(t) => {
                    seen.insert(t.name.clone());
                    if let Err(e) = p.set_value(t.to_tensor()) {
                        err = Some(e.to_string());
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(CheckpointError::Mismatch(e));
        }
        if let Some(extra) = self.tensors.iter().find(|t| !seen.contains(&t.name)) {
            return Err(CheckpointError::Mismatch(format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + self.tensors.iter().map(|t| t.data.len() * 8 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut names = BTreeSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(CheckpointError::Duplicate {
                    name: t.name.clone(),
                    offset: out.len(),
                });
            }
            let numel: usize = t.shape.iter().product();
            if t.shape.len() > u8::MAX as usize || t.name.len() > u32::MAX as usize || numel != t.data.len() {
                return Err(CheckpointError::Oversized {
                    name: t.name.clone(),
                    offset: out.len(),
                });
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype().code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { version });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated {
                offset: 8,
                needed: 4,
                len: bytes.len(),
            });
        }
        // Check the CRC before trusting any length field in the body.
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Crc {
                offset: body_end,
                stored,
                computed,
            });
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 8,
        };
        let mut tensors = Vec::new();
        let mut names = BTreeSet::new();
        while r.pos < r.bytes.len() {
            let start = r.pos;
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Utf8 { offset: name_at })?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(CheckpointError::Duplicate { name, offset: start });
            }
            let code_at = r.pos;
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or(CheckpointError::UnknownDtype { code, offset: code_at })?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u64()?;
                shape.push(usize::try_from(d).map_err(|_| CheckpointError::Oversized {
                    name: name.clone(),
                    offset: start,
                })?);
            }
            let bytes_needed = shape
                .iter()
                .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Oversized {
                    name: name.clone(),
                    offset: start,
                })?;
            let raw = r.take(bytes_needed)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
