//! Decoupled-weight-decay Adam with a linear warm-up.
//!
//! The moment estimates are kept by parameter name so they can be written
//! into and restored from checkpoints.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::OptimConfig;
use crate::error::{Result, SomaError};

#[derive(Debug)]
pub struct AdamW {
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
    config: OptimConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: OptimConfig) -> Result<Self> {
        let zeros = |p: &Var| p.as_tensor().zeros_like();
        let first = params.iter().map(|(_, p)| zeros(p)).collect::<candle_core::Result<_>>()?;
        let second = params.iter().map(|(_, p)| zeros(p)).collect::<candle_core::Result<_>>()?;
        Ok(Self {
            params,
            first,
            second,
            step: 0,
            config,
        })
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient are left untouched (their moments still decay).
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.first[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + c.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - lr * c.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.first[i].clone());
            out.insert(format!("v.{name}"), self.second[i].clone());
        }
        out
    }

    /// Restores the moments written by [`AdamW::state`] and the step count.
    pub fn load_state(&mut self, state: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{prefix}.{name}");
                let t = state.get(&key).ok_or_else(|| {
                    SomaError::Invalid(format!("optimizer state lacks `{key}`"))
                })?;
                if t.dims() != var.dims() {
                    return Err(SomaError::Shape(format!(
                        "optimizer state `{key}` is {:?}, parameter is {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                *slot = t.to_dtype(var.dtype())?.to_device(var.device())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based): linear ramp from
/// `base / warmup_steps` to `base` over `warmup_steps`, constant afterwards.
pub fn warmup_lr(base: f64, step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * (step + 1) as f64 / warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn warmup_is_linear_then_flat() {
        assert_eq!(warmup_lr(1.0, 0, 4), 0.25);
        assert_eq!(warmup_lr(1.0, 3, 4), 1.0);
        assert_eq!(warmup_lr(1.0, 10, 4), 1.0);
        assert_eq!(warmup_lr(2.0, 0, 0), 2.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(
            vec![("x".into(), x.clone())],
            OptimConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let v = x.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }
}
