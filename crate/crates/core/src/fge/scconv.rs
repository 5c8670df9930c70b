//! Spatial and channel reconstruction units (SCConv design, published defaults).

use candle_core::{Tensor, D};
use candle_nn::{GroupNorm, Init, Module, VarBuilder};

use crate::error::Result;
use crate::nn::{conv, Conv, ConvSpec};

/// Largest divisor of `channels` that does not exceed `wanted`.
pub(crate) fn group_count(channels: usize, wanted: usize) -> usize {
    (1..=wanted.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Spatial reconstruction unit: group-norm based informativeness gating,
/// then cross reconstruction of the informative and the remaining parts.
#[derive(Clone, Debug)]
pub struct Sru {
    norm: GroupNorm,
    gamma: Tensor,
    threshold: f64,
    bypass: bool,
}

impl Sru {
    pub fn new(
        vb: VarBuilder,
        channels: usize,
        groups: usize,
        threshold: f64,
        bypass: bool,
    ) -> Result<Self> {
        let groups = group_count(channels, groups);
        let gamma = vb.get_with_hints(channels, "gn.weight", Init::Const(1.0))?;
        let beta = vb.get_with_hints(channels, "gn.bias", Init::Const(0.0))?;
        let norm = GroupNorm::new(gamma.clone(), beta, channels, groups, 1e-5)?;
        Ok(Self {
            norm,
            gamma,
            threshold,
            bypass,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.bypass {
            return Ok(x.clone());
        }
        let c = x.dim(1)?;
        let normed = self.norm.forward(x)?;
        let w_gamma = self.gamma.broadcast_div(&self.gamma.sum_all()?)?.reshape((1, c, 1, 1))?;
        let reweights = candle_nn::ops::sigmoid(&normed.broadcast_mul(&w_gamma)?)?;
        let informative = reweights.gt(self.threshold)?;
        let w1 = informative.where_cond(&reweights.ones_like()?, &reweights)?;
        let w2 = informative.where_cond(&reweights.zeros_like()?, &reweights)?;
        let x1 = (w1 * x)?;
        let x2 = (w2 * x)?;
        let half = c / 2;
        let (x11, x12) = (x1.narrow(1, 0, half)?, x1.narrow(1, half, c - half)?);
        let (x21, x22) = (x2.narrow(1, 0, half)?, x2.narrow(1, half, c - half)?);
        if half * 2 != c {
            // Odd widths cannot be cross-swapped; fall back to the plain sum.
            return Ok((x1 + x2)?);
        }
        Ok(Tensor::cat(&[(x11 + x22)?, (x12 + x21)?], 1)?)
    }
}

/// Channel reconstruction unit: split/squeeze, group-wise plus point-wise
/// transform of the upper part, cheap reuse of the lower part, and
/// pooled-softmax fusion.
#[derive(Clone, Debug)]
pub struct Cru {
    up_channels: usize,
    squeeze_up: Conv,
    squeeze_low: Conv,
    gwc: Conv,
    pwc1: Conv,
    pwc2: Conv,
    bypass: bool,
}

impl Cru {
    /// Split ratio 1/2, squeeze ratio 2, group size 2, group kernel 3.
    pub fn new(vb: VarBuilder, channels: usize, bypass: bool) -> Result<Self> {
        let up = channels / 2;
        let low = channels - up;
        let up_sq = (up / 2).max(1);
        let low_sq = (low / 2).max(1);
        let groups = if up_sq % 2 == 0 && channels % 2 == 0 { 2 } else { 1 };
        Ok(Self {
            up_channels: up,
            squeeze_up: conv(vb.pp("squeeze1"), up, up_sq, ConvSpec::k1().no_bias())?,
            squeeze_low: conv(vb.pp("squeeze2"), low, low_sq, ConvSpec::k1().no_bias())?,
            gwc: conv(vb.pp("gwc"), up_sq, channels, ConvSpec::k3().groups(groups))?,
            pwc1: conv(vb.pp("pwc1"), up_sq, channels, ConvSpec::k1().no_bias())?,
            pwc2: conv(
                vb.pp("pwc2"),
                low_sq,
                channels - low_sq,
                ConvSpec::k1().no_bias(),
            )?,
            bypass,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.bypass {
            return Ok(x.clone());
        }
        let c = x.dim(1)?;
        let up = self.squeeze_up.forward(&x.narrow(1, 0, self.up_channels)?)?;
        let low = self
            .squeeze_low
            .forward(&x.narrow(1, self.up_channels, c - self.up_channels)?)?;
        let y1 = (self.gwc.forward(&up)? + self.pwc1.forward(&up)?)?;
        let y2 = Tensor::cat(&[self.pwc2.forward(&low)?, low], 1)?;
        let out = Tensor::cat(&[y1, y2], 1)?;
        let pooled = out.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let weights = candle_nn::ops::softmax(&pooled, 1)?;
        let out = out.broadcast_mul(&weights)?;
        Ok((out.narrow(1, 0, c)? + out.narrow(1, c, c)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(32, 16), 16);
        assert_eq!(group_count(24, 16), 12);
        assert_eq!(group_count(4, 16), 4);
        assert_eq!(group_count(7, 4), 1);
    }

    #[test]
    fn units_preserve_shape() {
        let store = ParamStore::new(1);
        let vb = store.var_builder(DType::F64, &Device::Cpu);
        let sru = Sru::new(vb.pp("sru"), 16, 16, 0.5, false).unwrap();
        let cru = Cru::new(vb.pp("cru"), 16, false).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 16, 6, 5), &Device::Cpu).unwrap();
        assert_eq!(sru.forward(&x).unwrap().dims(), x.dims());
        assert_eq!(cru.forward(&x).unwrap().dims(), x.dims());
    }
}
