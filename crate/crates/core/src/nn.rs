//! Layer constructors with explicit initialisation.

use candle_core::Tensor;
use candle_nn::init::DEFAULT_KAIMING_NORMAL;
use candle_nn::{Init, Linear, Module, VarBuilder};

use crate::error::Result;

/// Square 2-D convolution, "same" padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub const fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    pub const fn k1() -> Self {
        Self {
            kernel: 1,
            ..Self::k3()
        }
    }

    pub const fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub const fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub const fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub const fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

/// 2-D convolution layer.
///
/// Ungrouped convolutions are computed as one matrix product over shifted
/// copies of the input (im2col by slicing). On CPU this is markedly faster
/// than the generic kernel at the small spatial sizes of the coarse levels,
/// and its backward pass is a plain matrix product as well. Grouped
/// convolutions use candle's kernel.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Option<Tensor>, spec: ConvSpec) -> Self {
        Self { weight, bias, spec }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    fn padding(&self) -> usize {
        self.spec.dilation * (self.spec.kernel - 1) / 2
    }

    fn forward_generic(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(
            &self.weight,
            self.padding(),
            self.spec.stride,
            self.spec.dilation,
            self.spec.groups,
        )?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }

    fn forward_unfolded(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let ConvSpec {
            kernel: k,
            stride: s,
            dilation: d,
            ..
        } = self.spec;
        let cout = self.weight.dim(0)?;
        let p = self.padding();
        let (ho, wo) = ((h + 2 * p - d * (k - 1) - 1) / s + 1, (w + 2 * p - d * (k - 1) - 1) / s + 1);
        let cols = if k == 1 && s == 1 {
            x.reshape((n, c, h * w))?
        } else {
            let xp = if p > 0 {
                x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?
            } else {
                x.clone()
            };
            let mut taps = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    let mut t = xp.narrow(2, dy * d, (ho - 1) * s + 1)?.narrow(3, dx * d, (wo - 1) * s + 1)?;
                    if s > 1 {
                        // keep every s-th row and column
                        t = t
                            .pad_with_zeros(2, 0, s - 1)?
                            .pad_with_zeros(3, 0, s - 1)?
                            .reshape((n, c, ho, s, wo, s))?
                            .narrow(3, 0, 1)?
                            .narrow(5, 0, 1)?
                            .reshape((n, c, ho, wo))?;
                    }
                    taps.push(t);
                }
            }
            Tensor::stack(&taps, 2)?.reshape((n, c * k * k, ho * wo))?
        };
        let wm = self.weight.reshape((cout, c * k * k))?;
        let mut y = wm.broadcast_matmul(&cols)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.reshape((1, cout, 1))?)?;
        }
        y.reshape((n, cout, ho, wo))
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        if self.spec.groups == 1 {
            self.forward_unfolded(x)
        } else {
            self.forward_generic(x)
        }
    }
}

pub fn conv(vb: VarBuilder, cin: usize, cout: usize, spec: ConvSpec) -> Result<Conv> {
    conv_with_init(vb, cin, cout, spec, DEFAULT_KAIMING_NORMAL)
}

pub fn conv_with_init(
    vb: VarBuilder,
    cin: usize,
    cout: usize,
    spec: ConvSpec,
    init: Init,
) -> Result<Conv> {
    let k = spec.kernel;
    let weight = vb.get_with_hints((cout, cin / spec.groups, k, k), "weight", init)?;
    let bias = if spec.bias {
        Some(vb.get_with_hints(cout, "bias", Init::Const(0.0))?)
    } else {
        None
    };
    Ok(Conv::new(weight, bias, spec))
}

pub fn linear(vb: VarBuilder, din: usize, dout: usize, weight_init: Init) -> Result<Linear> {
    let weight = vb.get_with_hints((dout, din), "weight", weight_init)?;
    let bias = vb.get_with_hints(dout, "bias", Init::Const(0.0))?;
    Ok(Linear::new(weight, Some(bias)))
}

/// `relu(conv(x))`.
#[derive(Clone, Debug)]
pub struct ConvRelu {
    conv: Conv,
}

impl ConvRelu {
    pub fn new(vb: VarBuilder, cin: usize, cout: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: conv(vb, cin, cout, spec)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?.relu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn unfolded_matches_generic_kernel() {
        let store = ParamStore::new(5);
        let vb = store.var_builder(DType::F64, &Device::Cpu);
        let x = Tensor::randn(0f64, 1.0, (2, 3, 10, 12), &Device::Cpu).unwrap();
        for (i, spec) in [
            ConvSpec::k3(),
            ConvSpec::k1(),
            ConvSpec::k3().stride(2),
            ConvSpec::k3().dilation(3).no_bias(),
            ConvSpec { kernel: 7, ..ConvSpec::k3() },
        ]
        .into_iter()
        .enumerate()
        {
            let c = conv(vb.pp(format!("c{i}")), 3, 4, spec).unwrap();
            let a = c.forward_unfolded(&x).unwrap();
            let b = c.forward_generic(&x).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "{spec:?}: {d}");
        }
    }
}
