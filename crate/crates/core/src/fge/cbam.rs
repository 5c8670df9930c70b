//! Channel and spatial attention (CBAM design).

use candle_core::{Tensor, D};
use candle_nn::{Module, VarBuilder};

use crate::error::Result;
use crate::nn::{conv, Conv, ConvSpec};

/// Shared two-layer MLP over average- and max-pooled channel descriptors.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    fc1: Conv,
    fc2: Conv,
}

impl ChannelAttention {
    pub fn new(vb: VarBuilder, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            fc1: conv(vb.pp("fc1"), channels, hidden, ConvSpec::k1().no_bias())?,
            fc2: conv(vb.pp("fc2"), hidden, channels, ConvSpec::k1().no_bias())?,
        })
    }

    /// `(N, C, 1, 1)` attention weights in (0, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let avg = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let max = x.max_keepdim(D::Minus1)?.max_keepdim(D::Minus2)?;
        let mlp = |t: &Tensor| -> Result<Tensor> {
            Ok(self.fc2.forward(&self.fc1.forward(t)?.relu()?)?)
        };
        Ok(candle_nn::ops::sigmoid(&(mlp(&avg)? + mlp(&max)?)?)?)
    }
}

/// 7×7 convolution over stacked channel-wise mean and max maps.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    conv: Conv,
}

impl SpatialAttention {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        let spec = ConvSpec {
            kernel: 7,
            ..ConvSpec::k3().no_bias()
        };
        Ok(Self {
            conv: conv(vb.pp("conv"), 2, 1, spec)?,
        })
    }

    /// `(N, 1, H, W)` attention weights in (0, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let avg = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        let stacked = Tensor::cat(&[avg, max], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.conv.forward(&stacked)?)?)
    }
}
