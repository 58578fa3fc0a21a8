//! Binary checkpoint format.
//!
//! ```text
//! "DFMC" | u32 version=1 | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 rank
//!             | u64 dims[rank] | little-endian row-major data
//! ```
//!
//! All integers are little-endian. The model config travels in a JSON sidecar next to
//! the checkpoint (`<path>.config.json`).

use std::path::{Path, PathBuf};

use super::{Model, ModelConfig, Weights};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"DFMC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A named tensor as stored on disk, in either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn into_float<T: Float>(self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_float<T: Float>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

fn write_tensor<T: Float>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

pub fn encode_tensors(tensors: &[(String, StoredTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t {
            StoredTensor::F32(t) => write_tensor(&mut out, t),
            StoredTensor::F64(t) => write_tensor(&mut out, t),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_data<T: Float>(r: &mut Reader<'_>, shape: &[usize], name: &str) -> Result<Tensor<T>, CheckpointError> {
    let count: usize = shape.iter().product();
    let bytes = count
        .checked_mul(T::DTYPE.size())
        .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
    let raw = r.take(bytes, &format!("data of {name}"))?;
    let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Ok(Tensor::from_vec(shape, data))
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, StoredTensor)>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| CheckpointError::Malformed(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let code = r.u8(&format!("dtype of {name}"))?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype code {code} for {name}")))?;
        let rank = r.u8(&format!("rank of {name}"))? as usize;
        let shape = (0..rank)
            .map(|_| r.u64(&format!("dims of {name}")).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let t = match dtype {
            DType::F32 => StoredTensor::F32(read_data(&mut r, &shape, &name)?),
            DType::F64 => StoredTensor::F64(read_data(&mut r, &shape, &name)?),
        };
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes weights in their compute precision.
pub fn weights_to_bytes<T: Float>(weights: &Weights<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    weights.visit(|name, _, t| tensors.push((name.to_string(), StoredTensor::from_float(t))));
    encode_tensors(&tensors)
}

pub fn weights_from_bytes<T: Float>(buf: &[u8], cfg: &ModelConfig) -> Result<Weights<T>, CheckpointError> {
    let stored = decode_tensors(buf)?;
    let mut weights = Weights::<T>::zeros(cfg);
    let mut expected = Vec::new();
    weights.visit(|name, _, _| expected.push(name.to_string()));
    let names: Vec<&str> = stored.iter().map(|(n, _)| n.as_str()).collect();
    if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(CheckpointError::Malformed(format!(
            "tensor names do not match the config ({} stored, {} expected)",
            names.len(),
            expected.len()
        )));
    }
    let mut stored = stored.into_iter();
    let mut shape_err = None;
    weights.visit_mut(|name, _, t| {
        let (_, s) = stored.next().expect("counted above");
        if s.shape() != t.shape() {
            shape_err.get_or_insert_with(|| format!("{name}: stored {:?}, expected {:?}", s.shape(), t.shape()));
        } else {
            *t = s.into_float();
        }
    });
    match shape_err {
        Some(e) => Err(CheckpointError::Malformed(e)),
        None => Ok(weights),
    }
}

pub fn save_checkpoint<T: Float>(model: &Model<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, weights_to_bytes(&model.weights)).map_err(io_err(path))?;
    let cfg_path = config_path(path);
    let json = serde_json::to_string_pretty(&model.cfg).map_err(|e| CheckpointError::Config(e.to_string()))?;
    std::fs::write(&cfg_path, json + "\n").map_err(io_err(&cfg_path))?;
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig, CheckpointError> {
    let path = path.as_ref();
    let cfg_path = config_path(path);
    let text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    cfg.validated().map_err(|e| CheckpointError::Config(e.to_string()))
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<Model<T>, CheckpointError> {
    let path = path.as_ref();
    let cfg = load_config(path)?;
    let buf = std::fs::read(path).map_err(io_err(path))?;
    let weights = weights_from_bytes(&buf, &cfg)?;
    Ok(Model { cfg, weights })
}
