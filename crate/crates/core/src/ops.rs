//! Small tensor kernels that candle does not ship in the form we need.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor};

use crate::error::{Result, SomaError};

/// Element-wise square root whose derivative is defined as 0 at 0.
///
/// Plain `sqrt` back-propagates `g / (2 sqrt(x))`, which turns a perfect
/// prediction into NaN gradients through any RMSE or end-point norm.
struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("safe-sqrt expects contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|x| x.sqrt()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|x| x.sqrt()).collect()),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    other.dtype(),
                    "safe-sqrt",
                ))
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let positive = res.gt(0.0)?;
        let scaled = grad_res.div(&res.affine(2.0, 0.0)?)?;
        let zeros = scaled.zeros_like()?;
        Ok(Some(positive.where_cond(&scaled, &zeros)?))
    }
}

pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SafeSqrt)?)
}

/// Row-stochastic matrix (out × in) for 1-D linear interpolation with the
/// align-corners convention: output samples 0 and `out-1` coincide with
/// input samples 0 and `in-1`.
pub fn interpolation_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for i in 0..out {
        let src = if out > 1 {
            i as f64 * (inp - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        };
        let i0 = (src.floor() as usize).min(inp - 1);
        let frac = src - i0 as f64;
        m[i * inp + i0] += 1.0 - frac;
        if i0 + 1 < inp {
            m[i * inp + i0 + 1] += frac;
        }
    }
    m
}

/// Bilinear resampling of `(N, C, h, w)` to `(N, C, height, width)`,
/// align-corners convention, written as two interpolation matmuls so it is
/// differentiable with respect to the input.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 || height == 0 || width == 0 {
        return Err(SomaError::Shape(format!(
            "cannot resample {h}x{w} to {height}x{width}"
        )));
    }
    if h == height && w == width {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let ry = Tensor::from_vec(interpolation_matrix(height, h), (height, h), dev)?.to_dtype(dtype)?;
    let rx_t = Tensor::from_vec(interpolation_matrix(width, w), (width, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let flat = x.reshape((n * c, h, w))?;
    let cols = flat.broadcast_matmul(&rx_t)?;
    let out = ry.broadcast_matmul(&cols)?;
    Ok(out.reshape((n, c, height, width))?)
}

/// Depthwise 2-D convolution (cross-correlation, as in every deep-learning
/// framework) of `(N, C, H, W)` with per-channel kernels `(C, 1, k, k)`,
/// zero padding `padding` and dilation `dilation`. Output keeps `(H, W)`
/// when `padding == dilation * (k - 1) / 2`.
pub fn depthwise_conv2d(
    x: &Tensor,
    kernels: &Tensor,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (kc, one, kh, kw) = kernels.dims4()?;
    if kc != c || one != 1 {
        return Err(SomaError::Shape(format!(
            "depthwise kernels {:?} do not match {c} channels",
            kernels.dims()
        )));
    }
    let out_h = h + 2 * padding - dilation * (kh - 1);
    let out_w = w + 2 * padding - dilation * (kw - 1);
    let padded = x
        .pad_with_zeros(2, padding, padding)?
        .pad_with_zeros(3, padding, padding)?;
    let mut acc: Option<Tensor> = None;
    for i in 0..kh {
        for j in 0..kw {
            let window = padded
                .narrow(2, i * dilation, out_h)?
                .narrow(3, j * dilation, out_w)?;
            let tap = kernels.narrow(2, i, 1)?.narrow(3, j, 1)?.reshape((1, c, 1, 1))?;
            let term = window.broadcast_mul(&tap)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("kernel has at least one tap"))
}

/// Reads a small tensor back to the host as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    #[test]
    fn safe_sqrt_has_zero_gradient_at_zero() {
        let x = Var::from_vec(vec![0.0f64, 4.0], 2, &Device::Cpu).unwrap();
        let y = safe_sqrt(x.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, 2.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.25]);
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (o, i) in [(8, 4), (5, 9), (16, 16), (3, 1)] {
            let m = interpolation_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
        let k = Tensor::randn(0f64, 1.0, (3, 1, 3, 3), &dev).unwrap();
        for d in 1..=3 {
            let ours = depthwise_conv2d(&x, &k, d, d).unwrap();
            let reference = x.conv2d(&k, d, 1, d, 3).unwrap();
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }
}
