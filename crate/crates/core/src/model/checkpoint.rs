//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `CMTCKPT1`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian bytes of every tensor in header
//! order. The header records the model config, both vocabularies, the
//! optimizer step, free-form metadata and a table of tensor names, dtypes,
//! shapes and byte ranges. Optimizer moments are stored as ordinary tensors
//! named `optim.m.<param>` and `optim.v.<param>`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::Model;
use crate::data::Vocabulary;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CMTCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dtype: DType,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: DType, shape: &[usize]) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

impl Checkpoint {
    /// Snapshot of a model with optional extra tensors (optimizer state).
    pub fn from_model(
        model: &Model,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        step: u64,
        extra: Vec<(String, Tensor)>,
        meta: serde_json::Value,
    ) -> Result<Self> {
        let mut tensors = model.parameters()?;
        tensors.extend(extra);
        Ok(Self {
            config: model.config().clone(),
            dtype: model.dtype(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            step,
            meta,
            tensors,
        })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blobs = Vec::with_capacity(self.tensors.len());
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset,
                len: bytes.len() as u64,
            });
            offset += bytes.len() as u64;
            blobs.push(bytes);
        }
        let header = Header {
            config: self.config.clone(),
            dtype: dtype_name(self.dtype)?.to_string(),
            src_vocab: self.src_vocab.tokens().to_vec(),
            tgt_vocab: self.tgt_vocab.tokens().to_vec(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for b in &blobs {
                w.write_all(b)?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} is truncated", e.name)));
            }
            let dtype = parse_dtype(&e.dtype)?;
            let expected = e.shape.iter().product::<usize>() * dtype.size_in_bytes();
            if expected != e.len as usize {
                return Err(Error::Checkpoint(format!("tensor {} has a bad size", e.name)));
            }
            tensors.push((e.name.clone(), tensor_from_bytes(&data[start..end], dtype, &e.shape)?));
        }
        Ok(Self {
            config: header.config,
            dtype: parse_dtype(&header.dtype)?,
            src_vocab: Vocabulary::from_tokens(header.src_vocab)?,
            tgt_vocab: Vocabulary::from_tokens(header.tgt_vocab)?,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    /// Rebuilds the model and loads its parameters.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.config.clone(), self.dtype)?;
        model.load_parameters(&self.tensors)?;
        Ok(model)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
