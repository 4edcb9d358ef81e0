//! Named parameter storage with seeded initialization, and the checkpoint
//! file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"DFCKPT\0\0" | u32 version | u64 header_len | header JSON | tensor data
//! ```
//!
//! The header lists tensors in name order with their dtype, shape and byte
//! offset into the data section. Serialization is a pure function of the
//! contents, so save → load → save reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal for a layer with the given fan-in and activation gain.
    Kaiming { fan_in: usize, gain: f64 },
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn values(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Kaiming { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        }
    }

    /// Register a trainable parameter. Names must be unique.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidState(format!("duplicate parameter `{name}`")));
        }
        let n = shape.iter().product();
        let v = self.values(n, init);
        let t = Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(out)
    }

    /// Register non-trainable state such as running statistics.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidState(format!("duplicate buffer `{name}`")));
        }
        let n = shape.iter().product();
        let v = self.values(n, init);
        let var = Var::from_tensor(&Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// All parameters and buffers, keyed `param/<name>` and `buffer/<name>`.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        let p = self.params.iter().map(|(k, v)| (format!("param/{k}"), v.as_detached_tensor()));
        let b = self.buffers.iter().map(|(k, v)| (format!("buffer/{k}"), v.as_detached_tensor()));
        p.chain(b).collect()
    }

    /// Overwrite parameters and buffers in place. Every stored tensor must be
    /// present with a matching shape.
    pub fn import(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let groups = [("param/", &self.params), ("buffer/", &self.buffers)];
        for (prefix, map) in groups {
            for (k, var) in map {
                let key = format!("{prefix}{k}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::InvalidState(format!("checkpoint lacks `{key}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::shape(format!("{key} {:?}", var.dims()), t.dims()));
                }
                var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over every parameter and buffer, for frozen-model audits.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, t) in self.export() {
            h.update(k.as_bytes());
            h.update(tensor_bytes(&t)?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::InvalidState(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::InvalidState(format!("unsupported dtype {other:?}"))),
    })
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    step: u64,
    config: String,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// A named tensor archive plus the run state needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    /// Verbatim experiment config.
    pub config: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config: &str) -> Self {
        Self {
            kind: kind.to_string(),
            step,
            config: config.to_string(),
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_store(mut self, prefix: &str, store: &ParamStore) -> Self {
        for (k, t) in store.export() {
            self.tensors.insert(format!("{prefix}/{k}"), t);
        }
        self
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: data.len() as u64,
                len: bytes.len() as u64,
            });
            data.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        crate::data::write_bytes(path, &bytes).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|e| *e <= bytes.len()).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| e.to_string())?;
        if header.version != version {
            return Err("header version disagrees with preamble".into());
        }
        let data = &bytes[hend..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let (start, len) = (e.offset as usize, e.len as usize);
            let raw = data.get(start..start + len).ok_or_else(|| format!("tensor `{}` out of bounds", e.name))?;
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" if len == n * 4 => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)
                }
                "f64" if len == n * 8 => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)
                }
                other => return Err(format!("tensor `{}`: bad dtype/length `{other}`", e.name)),
            }
            .map_err(|err| err.to_string())?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}
