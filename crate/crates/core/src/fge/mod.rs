//! Feature gradient enhancement for pyramid levels 2, 4 and 8.
//!
//! For an input `φ` the enhanced map is built in four steps:
//!
//! ```text
//! F_recon = CRU(SRU(φ)) + φ
//! G_i     = ReLU(K_i * F_recon)                 i = 1..8, depthwise per channel
//! F_grad  = Conv1x1([G_1 .. G_8]) + F_recon
//! F_att   = F_grad ⊙ CA(F_grad) ⊙ SA(F_grad) + F_grad
//! F_ms    = Conv1x1([Dilate_1(F_att), Dilate_2(F_att), Dilate_3(F_att)])
//! φ_g     = F_att + Gauss(F_ms)
//! ```
//!
//! The kernels `K_i` are fixed; `Gauss` is a depthwise 5×5 convolution that
//! starts as a normalised Gaussian and is trained afterwards.

mod cbam;
mod kernels;
mod scconv;

pub use cbam::{ChannelAttention, SpatialAttention};
pub use kernels::{build_kernel_bank, GradientKernelBank, DIRECTIONS, SOBEL_X};
pub use scconv::{Cru, Sru};

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Init, Module, VarBuilder};

use crate::encoder::{ChannelSchedule, FeaturePyramid, Modality};
use crate::error::{Result, SomaError};
use crate::geometry::Level;
use crate::nn::{conv, Conv, ConvSpec};
use crate::ops;
use crate::params::ParamStore;

/// Levels the enhancer is applied to.
pub const FGE_LEVELS: [Level; 3] = [Level::L2, Level::L4, Level::L8];

#[derive(Clone, Debug, PartialEq)]
pub struct FgeConfig {
    pub enabled: bool,
    /// SRU gate threshold on the sigmoid re-weights.
    pub gate_threshold: f64,
    /// Group-norm groups in the SRU (capped to a divisor of the width).
    pub norm_groups: usize,
    /// Channel-attention MLP reduction ratio.
    pub attention_reduction: usize,
    /// σ of the Gaussian that initialises the smoothing convolution.
    pub smoothing_sigma: f64,
    /// Replace the SRU by the identity.
    pub bypass_sru: bool,
    /// Replace the CRU by the identity.
    pub bypass_cru: bool,
}

impl Default for FgeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gate_threshold: 0.5,
            norm_groups: 16,
            attention_reduction: 16,
            smoothing_sigma: 1.0,
            bypass_sru: false,
            bypass_cru: false,
        }
    }
}

/// Normalised `size × size` Gaussian, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Enhancer parameters for one level of one modality.
#[derive(Clone, Debug)]
pub struct FgeState {
    sru: Sru,
    cru: Cru,
    bank: Tensor,
    grad_fuse: Conv,
    channel_att: ChannelAttention,
    spatial_att: SpatialAttention,
    dilated: [Conv; 3],
    ms_fuse: Conv,
    smoothing: Tensor,
    channels: usize,
}

impl FgeState {
    pub fn new(
        vb: VarBuilder,
        store: &ParamStore,
        channels: usize,
        config: &FgeConfig,
    ) -> Result<Self> {
        let c = channels;
        let dil = |d: usize| conv(vb.pp(format!("dilate{d}")), c, c, ConvSpec::k3().dilation(d).no_bias());
        let smoothing = vb.get_with_hints((c, 1, 5, 5), "smooth.weight", Init::Const(0.0))?;
        let gauss = gaussian_kernel(5, config.smoothing_sigma);
        let init: Vec<f64> = (0..c).flat_map(|_| gauss.iter().copied()).collect();
        store.set(
            &format!("{}.smooth.weight", vb.prefix()),
            &Tensor::from_vec(init, (c, 1, 5, 5), vb.device())?,
        )?;
        Ok(Self {
            sru: Sru::new(
                vb.pp("sru"),
                c,
                config.norm_groups,
                config.gate_threshold,
                config.bypass_sru,
            )?,
            cru: Cru::new(vb.pp("cru"), c, config.bypass_cru)?,
            bank: build_kernel_bank().to_tensor(vb.dtype(), vb.device())?,
            grad_fuse: conv(vb.pp("grad_fuse"), DIRECTIONS * c, c, ConvSpec::k1().no_bias())?,
            channel_att: ChannelAttention::new(vb.pp("ca"), c, config.attention_reduction)?,
            spatial_att: SpatialAttention::new(vb.pp("sa"))?,
            dilated: [dil(1)?, dil(2)?, dil(3)?],
            ms_fuse: conv(vb.pp("ms_fuse"), 3 * c, c, ConvSpec::k1().no_bias())?,
            smoothing,
            channels: c,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let c = x.dims4()?.1;
        if c != self.channels {
            return Err(SomaError::Shape(format!(
                "enhancer built for {} channels, got {c}",
                self.channels
            )));
        }
        Ok(())
    }

    /// `F_recon = CRU(SRU(φ)) + φ`.
    pub fn reduce_redundancy(&self, phi: &Tensor) -> Result<Tensor> {
        self.check(phi)?;
        Ok((self.cru.forward(&self.sru.forward(phi)?)? + phi)?)
    }

    /// Rectified directional responses `G_i`, shape `(N, C, 8, H, W)`.
    pub fn directional_responses(&self, f_recon: &Tensor) -> Result<Tensor> {
        self.check(f_recon)?;
        let (n, c, h, w) = f_recon.dims4()?;
        let per_channel = f_recon.reshape((n * c, 1, h, w))?;
        let g = per_channel.conv2d(&self.bank, 1, 1, 1, 1)?.relu()?;
        Ok(g.reshape((n, c, DIRECTIONS, h, w))?)
    }

    /// `F_grad = Conv1x1([G_1..G_8]) + F_recon`.
    pub fn extract_gradients(&self, f_recon: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = f_recon.dims4()?;
        let g = self
            .directional_responses(f_recon)?
            .reshape((n, c * DIRECTIONS, h, w))?;
        Ok((self.grad_fuse.forward(&g)? + f_recon)?)
    }

    /// `(CA(F), SA(F))`, shapes `(N, C, 1, 1)` and `(N, 1, H, W)`.
    pub fn attention_maps(&self, f_grad: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.channel_att.forward(f_grad)?,
            self.spatial_att.forward(f_grad)?,
        ))
    }

    /// `(F_att, F_ms)`.
    pub fn attend_and_fuse(&self, f_grad: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(f_grad)?;
        let (ca, sa) = self.attention_maps(f_grad)?;
        let f_att = (f_grad.broadcast_mul(&ca)?.broadcast_mul(&sa)? + f_grad)?;
        let branches = self
            .dilated
            .iter()
            .map(|d| d.forward(&f_att))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let f_ms = self.ms_fuse.forward(&Tensor::cat(&branches, 1)?)?;
        Ok((f_att, f_ms))
    }

    /// Depthwise 5×5 smoothing.
    pub fn smooth(&self, x: &Tensor) -> Result<Tensor> {
        ops::depthwise_conv2d(x, &self.smoothing, 2, 1)
    }

    /// Full enhancement `φ ↦ φ_g`.
    pub fn enhance(&self, phi: &Tensor) -> Result<Tensor> {
        let f_recon = self.reduce_redundancy(phi)?;
        let f_grad = self.extract_gradients(&f_recon)?;
        let (f_att, f_ms) = self.attend_and_fuse(&f_grad)?;
        Ok((f_att + self.smooth(&f_ms)?)?)
    }

    /// The response of each dilated branch, for receptive-field inspection.
    pub fn dilated_branch(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        Ok(self.dilated[index].forward(x)?)
    }
}

/// Enhancers for every (modality, level) pair, or none when disabled.
#[derive(Clone, Debug)]
pub struct Fge {
    states: BTreeMap<(Modality, Level), FgeState>,
    enabled: bool,
}

impl Fge {
    pub fn new(
        vb: VarBuilder,
        store: &ParamStore,
        schedule: &ChannelSchedule,
        config: &FgeConfig,
    ) -> Result<Self> {
        let mut states = BTreeMap::new();
        if config.enabled {
            for m in [Modality::Optical, Modality::Sar] {
                for l in FGE_LEVELS {
                    let state = FgeState::new(
                        vb.pp(m.name()).pp(format!("l{}", l.factor())),
                        store,
                        schedule.width(l),
                        config,
                    )?;
                    states.insert((m, l), state);
                }
            }
        }
        Ok(Self {
            states,
            enabled: config.enabled,
        })
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Parameters of one level; `None` when disabled.
    pub fn state(&self, modality: Modality, level: Level) -> Result<Option<&FgeState>> {
        if !FGE_LEVELS.contains(&level) {
            return Err(SomaError::Invalid(format!(
                "feature gradient enhancement applies to levels 2, 4, 8 only (got {level})"
            )));
        }
        Ok(self.states.get(&(modality, level)))
    }

    /// Enhances one level; identity when the enhancer is disabled.
    pub fn enhance(&self, phi: &Tensor, level: Level, modality: Modality) -> Result<Tensor> {
        match self.state(modality, level)? {
            Some(s) => s.enhance(phi),
            None => Ok(phi.clone()),
        }
    }

    /// Replaces levels 2, 4 and 8 of a pyramid with their enhanced maps.
    pub fn enhance_pyramid(&self, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut out = pyramid.clone();
        if self.enabled {
            for l in FGE_LEVELS {
                let e = self.enhance(pyramid.level(l), l, pyramid.modality())?;
                out.replace(l, e);
            }
        }
        Ok(out)
    }
}

/// Standalone single-level enhancer with its own parameters, convenient for
/// inspection and gradient checks.
pub fn standalone(
    channels: usize,
    config: &FgeConfig,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<(FgeState, ParamStore)> {
    let store = ParamStore::new(seed);
    let vb = store.var_builder(dtype, device);
    let state = FgeState::new(vb.pp("fge"), &store, channels, config)?;
    Ok((state, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_normalised_and_symmetric() {
        let k = gaussian_kernel(5, 1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k[0] - k[24]).abs() < 1e-15);
        assert!(k[12] > k[11]);
    }

    #[test]
    fn wrong_level_is_rejected() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F64, &Device::Cpu);
        let fge = Fge::new(vb, &store, &ChannelSchedule([8, 8, 8, 8, 8]), &FgeConfig::default())
            .unwrap();
        let x = Tensor::zeros((1, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(fge.enhance(&x, Level::L1, Modality::Sar).is_err());
        assert!(fge.enhance(&x, Level::L16, Modality::Sar).is_err());
        assert!(fge.enhance(&x, Level::L4, Modality::Sar).is_ok());
    }
}
