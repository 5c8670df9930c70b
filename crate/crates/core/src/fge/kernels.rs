//! Fixed bank of rotated Sobel-like 3×3 derivative kernels.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::ops;

/// Number of directions in the bank.
pub const DIRECTIONS: usize = 8;

/// Horizontal-derivative Sobel stencil, rows indexed by `y`, columns by `x`.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Eight 3×3 kernels; kernel `i` differentiates along `i * 22.5°`
/// (`x` to the right, `y` downwards, so 90° is the downward derivative).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientKernelBank {
    kernels: [[[f64; 3]; 3]; DIRECTIONS],
}

impl GradientKernelBank {
    pub fn angle_deg(index: usize) -> f64 {
        index as f64 * 180.0 / DIRECTIONS as f64
    }

    pub fn kernel(&self, index: usize) -> &[[f64; 3]; 3] {
        &self.kernels[index]
    }

    pub fn kernels(&self) -> &[[[f64; 3]; 3]; DIRECTIONS] {
        &self.kernels
    }

    /// `(8, 1, 3, 3)` tensor for use as a convolution weight.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.kernels.iter().flatten().flatten().copied().collect();
        ops::tensor_from_f64(flat, &[DIRECTIONS, 1, 3, 3], dtype, device)
    }

    /// Plain-text dump: one header line per kernel followed by its three rows.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, k) in self.kernels.iter().enumerate() {
            let _ = writeln!(s, "# theta = {:.1} deg", Self::angle_deg(i));
            for row in k {
                let _ = writeln!(s, "{:>10.6} {:>10.6} {:>10.6}", row[0], row[1], row[2]);
            }
        }
        s
    }
}

/// Bilinear lookup into the Sobel stencil at continuous `(x, y)` offsets in
/// `[-1, 1]²`, zero outside the stencil.
fn sample_sobel(x: f64, y: f64) -> f64 {
    let at = |xi: i64, yi: i64| -> f64 {
        if (-1..=1).contains(&xi) && (-1..=1).contains(&yi) {
            SOBEL_X[(yi + 1) as usize][(xi + 1) as usize]
        } else {
            0.0
        }
    };
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    at(xi, yi) * (1.0 - fx) * (1.0 - fy)
        + at(xi + 1, yi) * fx * (1.0 - fy)
        + at(xi, yi + 1) * (1.0 - fx) * fy
        + at(xi + 1, yi + 1) * fx * fy
}

/// Rotates the Sobel stencil continuously by each bank angle, resamples it
/// onto the 3×3 grid, re-centres it to zero sum and rescales it to the
/// Sobel derivative gain.
///
/// Bilinear resampling alone attenuates the off-axis kernels (gain ≈ 6
/// against 8 on the axes), which lets the axis kernels win on diagonal
/// edges.
pub fn build_kernel_bank() -> GradientKernelBank {
    let mut kernels = [[[0.0; 3]; 3]; DIRECTIONS];
    for (i, k) in kernels.iter_mut().enumerate() {
        let t = GradientKernelBank::angle_deg(i).to_radians();
        let (s, c) = t.sin_cos();
        for (r, row) in k.iter_mut().enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                let (x, y) = (col as f64 - 1.0, r as f64 - 1.0);
                // Inverse rotation of the output position into the base stencil.
                let u = c * x + s * y;
                let w = -s * x + c * y;
                *v = sample_sobel(clean(u), clean(w));
            }
        }
        let mean = k.iter().flatten().sum::<f64>() / 9.0;
        for v in k.iter_mut().flatten() {
            *v -= mean;
        }
        let gain = derivative_gain(k);
        for v in k.iter_mut().flatten() {
            *v *= SOBEL_GAIN / gain;
        }
    }
    GradientKernelBank { kernels }
}

/// Response of the Sobel stencil to a unit-slope ramp along its axis.
const SOBEL_GAIN: f64 = 8.0;

/// Norm of the kernel's response to unit-slope ramps along `x` and `y`.
fn derivative_gain(k: &[[f64; 3]; 3]) -> f64 {
    let (mut gx, mut gy) = (0.0, 0.0);
    for (r, row) in k.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            gx += v * (c as f64 - 1.0);
            gy += v * (r as f64 - 1.0);
        }
    }
    gx.hypot(gy)
}

// Snap values within rounding noise of an integer so quarter turns stay exact.
fn clean(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-12 {
        r
    } else {
        v
    }
}
