//! Checkpoints as safetensors files.
//!
//! Tensors are stored as `param.<name>` (trainable parameters) and
//! `optim.m.<name>` / `optim.v.<name>` (optimizer moments). The string
//! metadata carries the format tag, the full run configuration and its hash,
//! the progress counters and the data-order RNG state.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::config::RunConfig;
use crate::error::{Result, SomaError};

pub const FORMAT: &str = "soma-checkpoint-1";

/// Position of the data-order random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    /// Word position of the stream at the start of the current epoch.
    pub word_pos: u128,
    /// Batches of the current epoch already consumed.
    pub batches_done: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub rng: RngState,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    };
    Ok(Raw {
        dtype,
        shape,
        bytes,
    })
}

fn from_view(name: &str, dtype: Dtype, shape: &[usize], data: &[u8], device: &Device) -> Result<Tensor> {
    let t = match dtype {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => {
            return Err(SomaError::Invalid(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(t)
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = Vec::new();
        for (k, t) in &self.params {
            tensors.push((format!("param.{k}"), to_raw(t)?));
        }
        for (k, t) in &self.optimizer {
            tensors.push((format!("optim.{k}"), to_raw(t)?));
        }
        let meta: HashMap<String, String> = [
            ("format", FORMAT.to_string()),
            ("config", self.config.serialize()),
            ("config_hash", self.config_hash.clone()),
            ("epoch", self.epoch.to_string()),
            ("step", self.step.to_string()),
            ("rng_seed", self.rng.seed.to_string()),
            ("rng_word_pos", self.rng.word_pos.to_string()),
            ("rng_batches_done", self.rng.batches_done.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| SomaError::io(parent, e))?;
        }
        safetensors::tensor::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| SomaError::load(path, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| SomaError::io(path, e))?;
        let st = SafeTensors::deserialize(&buf).map_err(|e| SomaError::load(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| SomaError::load(path, e))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| SomaError::load(path, "checkpoint has no metadata"))?;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| SomaError::load(path, format!("checkpoint lacks `{k}`")))
        };
        if get("format")? != FORMAT {
            return Err(SomaError::load(path, "not a checkpoint of this format"));
        }
        let num = |k: &str| -> Result<u128> {
            get(k)?
                .parse()
                .map_err(|_| SomaError::load(path, format!("bad `{k}`")))
        };
        let config = RunConfig::parse(&get("config")?).map_err(|e| SomaError::load(path, e))?;
        let config_hash = get("config_hash")?;
        if config.hash() != config_hash {
            return Err(SomaError::load(path, "stored configuration does not match its hash"));
        }
        let mut params = HashMap::new();
        let mut optimizer = HashMap::new();
        for (name, view) in st.tensors() {
            let t = from_view(&name, view.dtype(), view.shape(), view.data(), device)?;
            if let Some(k) = name.strip_prefix("param.") {
                params.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("optim.") {
                optimizer.insert(k.to_string(), t);
            }
        }
        Ok(Self {
            params,
            optimizer,
            epoch: num("epoch")? as usize,
            step: num("step")? as usize,
            config,
            config_hash,
            rng: RngState {
                seed: num("rng_seed")? as u64,
                word_pos: num("rng_word_pos")?,
                batches_done: num("rng_batches_done")? as usize,
            },
        })
    }
}
