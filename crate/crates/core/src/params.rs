//! Seeded parameter storage.
//!
//! candle's CPU random generator cannot be seeded, so layer initialisation
//! goes through [`ParamStore`], a `VarBuilder` backend that draws every
//! initial value from a ChaCha stream. Construction order fixes the draws,
//! which makes model initialisation reproducible from a single seed.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Result, SomaError};
use crate::ops;

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.vars.lock().expect("param lock").len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("param lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars
            .lock()
            .expect("param lock")
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over names, shapes and values (as f64), hex encoded.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in ops::to_f64_vec(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every variable from `tensors`; names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().expect("param lock");
        for (name, var) in vars.iter() {
            let src = tensors
                .get(name)
                .ok_or_else(|| SomaError::Config(format!("checkpoint lacks parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(SomaError::Shape(format!(
                    "parameter `{name}`: checkpoint {:?} vs model {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param lock").get(name).cloned()
    }

    /// Overwrites an existing variable in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get_var(name)
            .ok_or_else(|| SomaError::Config(format!("unknown parameter `{name}`")))?;
        var.set(&value.to_dtype(var.dtype())?.reshape(var.shape())?)?;
        Ok(())
    }

    /// Sets every variable whose name starts with `prefix` to `value`;
    /// returns how many were touched.
    pub fn fill_prefix(&self, prefix: &str, value: f64) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars() {
            if name.starts_with(prefix) {
                var.set(&var.as_tensor().ones_like()?.affine(value, 0.0)?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn sample(&self, init: Init, shape: &Shape) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng lock");
        match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    mean + stdev * z
                })
                .collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = match fan {
                    FanInOut::FanIn | FanInOut::FanOut => fan.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut *rng);
                            std * z
                        })
                        .collect(),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        if let Some(v) = self.vars.lock().expect("param lock").get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter `{name}` exists with shape {:?}, requested {s:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.sample(h, &s);
        let t = Tensor::from_vec(values, s.clone(), dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars
            .lock()
            .expect("param lock")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.lock().expect("param lock").get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter `{name}`"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().expect("param lock").contains_key(name)
    }
}
