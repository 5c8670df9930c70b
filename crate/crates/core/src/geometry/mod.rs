//! Coordinate conventions, displacement-field algebra and differentiable
//! warping.
//!
//! Conventions used everywhere in the crate:
//!
//! * A [`DisplacementField`] is stored as an `(N, 2, H_l, W_l)` tensor.
//!   Channel 0 is the horizontal (column, `x`) component and channel 1 the
//!   vertical (row, `y`) component, both in pixels of the field's own level.
//! * Warping is backward: `warp(f, D)(x) = f(x + D(x))`, sampled bilinearly.
//!   A field lives on the grid of the reference (optical) image and points
//!   into the moving (SAR) image, so `warp(sar, D)` is aligned with the
//!   optical image.
//! * Normalized coordinates put the *centres* of the corner pixels at ±1
//!   (align-corners). [`affine_to_flow`] is the only place where affine
//!   parameters meet pixel units.

mod io;

pub use io::{read_field, write_field, FIELD_MAGIC};

use std::fmt;

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, SomaError};
use crate::ops;

/// Pyramid level, identified by its downsampling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    L1,
    L2,
    L4,
    L8,
    L16,
}

impl Level {
    /// All levels, finest first.
    pub const ALL: [Level; 5] = [Level::L1, Level::L2, Level::L4, Level::L8, Level::L16];
    /// All levels in processing order, coarsest first.
    pub const COARSE_TO_FINE: [Level; 5] =
        [Level::L16, Level::L8, Level::L4, Level::L2, Level::L1];

    pub fn factor(self) -> usize {
        match self {
            Level::L1 => 1,
            Level::L2 => 2,
            Level::L4 => 4,
            Level::L8 => 8,
            Level::L16 => 16,
        }
    }

    pub fn from_factor(factor: usize) -> Result<Level> {
        match factor {
            1 => Ok(Level::L1),
            2 => Ok(Level::L2),
            4 => Ok(Level::L4),
            8 => Ok(Level::L8),
            16 => Ok(Level::L16),
            other => Err(SomaError::Invalid(format!(
                "pyramid level must be one of 1, 2, 4, 8, 16 (got {other})"
            ))),
        }
    }

    /// Spatial size of this level for an `(height, width)` input.
    pub fn size_of(self, height: usize, width: usize) -> (usize, usize) {
        (height / self.factor(), width / self.factor())
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.factor())
    }
}

/// What bilinear sampling returns outside the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    #[default]
    Zeros,
    Border,
}

/// Dense per-pixel displacement, `(N, 2, H_l, W_l)`, in pixels of `level`.
#[derive(Clone, Debug)]
pub struct DisplacementField {
    data: Tensor,
    level: Level,
}

impl DisplacementField {
    pub fn new(data: Tensor, level: Level) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims[1] != 2 {
            return Err(SomaError::Shape(format!(
                "displacement field must be (N, 2, H, W), got {dims:?}"
            )));
        }
        Ok(Self { data, level })
    }

    pub fn zeros(
        batch: usize,
        height: usize,
        width: usize,
        level: Level,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Self::new(Tensor::zeros((batch, 2, height, width), dtype, device)?, level)
    }

    /// Field with the same displacement `(dx, dy)` at every pixel.
    pub fn constant(
        batch: usize,
        height: usize,
        width: usize,
        level: Level,
        (dx, dy): (f64, f64),
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let v = Tensor::new(&[dx, dy], device)?
            .to_dtype(dtype)?
            .reshape((1, 2, 1, 1))?
            .broadcast_as((batch, 2, height, width))?
            .contiguous()?;
        Self::new(v, level)
    }

    /// Builds a single-sample field from row-major per-pixel `[dx, dy]`.
    pub fn from_pixels(
        pixels: &[[f64; 2]],
        height: usize,
        width: usize,
        level: Level,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(SomaError::Shape(format!(
                "{} pixels given for a {height}x{width} field",
                pixels.len()
            )));
        }
        let mut planar = vec![0.0; 2 * height * width];
        for (i, p) in pixels.iter().enumerate() {
            planar[i] = p[0];
            planar[height * width + i] = p[1];
        }
        let t = ops::tensor_from_f64(planar, &[1, 2, height, width], dtype, device)?;
        Self::new(t, level)
    }

    /// Row-major per-pixel `[dx, dy]` of sample `index`.
    pub fn to_pixels(&self, index: usize) -> Result<Vec<[f64; 2]>> {
        let (_, h, w) = self.dims();
        let v = ops::to_f64_vec(&self.data.narrow(0, index, 1)?)?;
        let hw = h * w;
        Ok((0..hw).map(|i| [v[i], v[hw + i]]).collect())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn level(&self) -> Level {
        self.level
    }

    /// `(batch, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[2], d[3])
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn device(&self) -> &Device {
        self.data.device()
    }

    /// Checks the shape contract `(H/l, W/l)` for an `(height, width)` input.
    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let (_, h, w) = self.dims();
        let expected = self.level.size_of(height, width);
        if (h, w) != expected {
            return Err(SomaError::Shape(format!(
                "field at level {} is {h}x{w}, expected {}x{} for a {height}x{width} input",
                self.level, expected.0, expected.1
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> Result<bool> {
        ops::all_finite(&self.data)
    }

    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
            level: self.level,
        }
    }

    /// Sample `index` as a batch of one.
    pub fn sample(&self, index: usize) -> Result<Self> {
        Self::new(self.data.narrow(0, index, 1)?, self.level)
    }

    pub fn add(&self, other: &DisplacementField) -> Result<Self> {
        self.check_compatible(other)?;
        Self::new((&self.data + &other.data)?, self.level)
    }

    pub fn sub(&self, other: &DisplacementField) -> Result<Self> {
        self.check_compatible(other)?;
        Self::new((&self.data - &other.data)?, self.level)
    }

    fn check_compatible(&self, other: &DisplacementField) -> Result<()> {
        if self.level != other.level {
            return Err(SomaError::Invalid(format!(
                "level mismatch: {} vs {}",
                self.level, other.level
            )));
        }
        if self.data.dims() != other.data.dims() {
            return Err(SomaError::Shape(format!(
                "field shapes differ: {:?} vs {:?}",
                self.data.dims(),
                other.data.dims()
            )));
        }
        Ok(())
    }
}

/// A 2×3 affine matrix on host memory, in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix(pub [[f64; 3]; 2]);

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn apply(&self, (u, v): (f64, f64)) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * u + m[0][1] * v + m[0][2],
            m[1][0] * u + m[1][1] * v + m[1][2],
        )
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn compose(&self, inner: &AffineMatrix) -> AffineMatrix {
        let a = &self.0;
        let b = &inner.0;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            out[r][2] += a[r][2];
        }
        AffineMatrix(out)
    }

    pub fn inverse(&self) -> Result<AffineMatrix> {
        let [[a, b, tx], [c, d, ty]] = self.0;
        let det = a * d - b * c;
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(SomaError::Invalid("affine matrix is singular".into()));
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineMatrix([
            [ia, ib, -(ia * tx + ib * ty)],
            [ic, id, -(ic * tx + id * ty)],
        ]))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Batched affine parameters θ, `(N, 2, 3)`, in normalized coordinates.
#[derive(Clone, Debug)]
pub struct AffineParams {
    theta: Tensor,
}

impl AffineParams {
    pub fn new(theta: Tensor) -> Result<Self> {
        let dims = theta.dims();
        if dims.len() != 3 || dims[1] != 2 || dims[2] != 3 {
            return Err(SomaError::Shape(format!(
                "affine parameters must be (N, 2, 3), got {dims:?}"
            )));
        }
        Ok(Self { theta })
    }

    pub fn identity(batch: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_matrices(&vec![AffineMatrix::IDENTITY; batch], dtype, device)
    }

    pub fn from_matrices(matrices: &[AffineMatrix], dtype: DType, device: &Device) -> Result<Self> {
        let flat: Vec<f64> = matrices.iter().flat_map(|m| m.0.into_iter().flatten()).collect();
        let t = ops::tensor_from_f64(flat, &[matrices.len(), 2, 3], dtype, device)?;
        Self::new(t)
    }

    pub fn matrices(&self) -> Result<Vec<AffineMatrix>> {
        let v = ops::to_f64_vec(&self.theta)?;
        Ok(v.chunks_exact(6)
            .map(|c| AffineMatrix([[c[0], c[1], c[2]], [c[3], c[4], c[5]]]))
            .collect())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.theta
    }

    pub fn batch(&self) -> usize {
        self.theta.dims()[0]
    }
}

/// Which coordinates a [`Grid`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridConvention {
    /// `coords(x) == x`, in pixels.
    Pixels,
    /// Align-corners normalized coordinates in `[-1, 1]`.
    Normalized,
}

/// Every pixel's own coordinates, `(2, H, W)` with channel 0 = `x`.
#[derive(Clone, Debug)]
pub struct Grid {
    coords: Tensor,
    convention: GridConvention,
}

impl Grid {
    pub fn new(
        height: usize,
        width: usize,
        convention: GridConvention,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let hw = height * width;
        let mut v = vec![0.0; 2 * hw];
        for y in 0..height {
            for x in 0..width {
                let (cx, cy) = match convention {
                    GridConvention::Pixels => (x as f64, y as f64),
                    GridConvention::Normalized => (
                        pixel_to_normalized(x as f64, width),
                        pixel_to_normalized(y as f64, height),
                    ),
                };
                v[y * width + x] = cx;
                v[hw + y * width + x] = cy;
            }
        }
        let coords = ops::tensor_from_f64(v, &[2, height, width], dtype, device)?;
        Ok(Self { coords, convention })
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn convention(&self) -> GridConvention {
        self.convention
    }
}

/// Pixel coordinate to align-corners normalized coordinate along an axis of `size`.
pub fn pixel_to_normalized(p: f64, size: usize) -> f64 {
    2.0 * p / (size as f64 - 1.0) - 1.0
}

pub fn normalized_to_pixel(u: f64, size: usize) -> f64 {
    (u + 1.0) * (size as f64 - 1.0) / 2.0
}

/// Dense field induced by θ on an `height × width` grid at `level`:
/// `D(x) = P(θ · N(x)) − x`. Differentiable with respect to θ.
pub fn affine_to_flow(
    theta: &AffineParams,
    height: usize,
    width: usize,
    level: Level,
) -> Result<DisplacementField> {
    if height < 2 || width < 2 {
        return Err(SomaError::Invalid(format!(
            "affine_to_flow needs at least 2x2 pixels, got {height}x{width}"
        )));
    }
    if !ops::all_finite(theta.tensor())? {
        return Err(SomaError::Invalid("affine parameters contain non-finite values".into()));
    }
    let t = theta.tensor();
    let (n, dtype, dev) = (theta.batch(), t.dtype(), t.device());
    let hw = height * width;

    // P(A N(x)) - x = s * ((A - I) N(x)) because P(N(x)) = x; subtracting the
    // identity first keeps the identity transform exactly zero.
    let identity = AffineParams::identity(1, dtype, dev)?;
    let delta = t.broadcast_sub(identity.tensor())?;
    let norm = Grid::new(height, width, GridConvention::Normalized, dtype, dev)?;
    let homog = Tensor::cat(
        &[
            norm.coords().reshape((2, hw))?,
            Tensor::ones((1, hw), dtype, dev)?,
        ],
        0,
    )?;
    let mapped = delta.broadcast_matmul(&homog)?; // (N, 2, HW)
    let sx = (width as f64 - 1.0) / 2.0;
    let sy = (height as f64 - 1.0) / 2.0;
    let scale = ops::tensor_from_f64(vec![sx, sy], &[1, 2, 1], dtype, dev)?;
    let disp = mapped.broadcast_mul(&scale)?;
    DisplacementField::new(disp.reshape((n, 2, height, width))?, level)
}

/// Backward bilinear warp: `out(x) = feature(x + field(x))`.
///
/// `feature` is `(N, C, H, W)` on the field's grid. Gradients flow to both
/// the feature and the field (through the interpolation weights).
pub fn warp(feature: &Tensor, field: &DisplacementField, padding: Padding) -> Result<Tensor> {
    let (n, c, h, w) = feature.dims4()?;
    let (fnb, fh, fw) = field.dims();
    if n != fnb || h != fh || w != fw {
        return Err(SomaError::Shape(format!(
            "cannot warp a {:?} feature with a {:?} field",
            feature.dims(),
            field.tensor().dims()
        )));
    }
    let dtype = feature.dtype();
    let dev = feature.device();
    let hw = h * w;
    let field_t = field.tensor().to_dtype(dtype)?;
    let grid = Grid::new(h, w, GridConvention::Pixels, dtype, dev)?;
    let pos = field_t.broadcast_add(&grid.coords().unsqueeze(0)?)?;
    let mut sx = pos.narrow(1, 0, 1)?.reshape((n, hw))?;
    let mut sy = pos.narrow(1, 1, 1)?.reshape((n, hw))?;
    if padding == Padding::Border {
        sx = sx.clamp(0.0, (w - 1) as f64)?;
        sy = sy.clamp(0.0, (h - 1) as f64)?;
    }
    let x0 = sx.detach().floor()?;
    let y0 = sy.detach().floor()?;
    let fx = (&sx - &x0)?;
    let fy = (&sy - &y0)?;
    let gx = fx.affine(-1.0, 1.0)?;
    let gy = fy.affine(-1.0, 1.0)?;
    let x1 = x0.affine(1.0, 1.0)?;
    let y1 = y0.affine(1.0, 1.0)?;

    let flat = feature.reshape((n, c, hw))?;
    let corners = [
        (&x0, &y0, (&gx * &gy)?),
        (&x1, &y0, (&fx * &gy)?),
        (&x0, &y1, (&gx * &fy)?),
        (&x1, &y1, (&fx * &fy)?),
    ];
    let mut out: Option<Tensor> = None;
    for (cx, cy, weight) in corners {
        let inside = cx
            .ge(0.0)?
            .mul(&cx.le((w - 1) as f64)?)?
            .mul(&cy.ge(0.0)?)?
            .mul(&cy.le((h - 1) as f64)?)?
            .to_dtype(dtype)?;
        let cxc = cx.clamp(0.0, (w - 1) as f64)?;
        let cyc = cy.clamp(0.0, (h - 1) as f64)?;
        let idx = cyc
            .affine(w as f64, 0.0)?
            .add(&cxc)?
            .to_dtype(DType::U32)?
            .unsqueeze(1)?
            .broadcast_as((n, c, hw))?
            .contiguous()?;
        let vals = flat.gather(&idx, 2)?;
        let term = vals.broadcast_mul(&(weight * inside)?.unsqueeze(1)?)?;
        out = Some(match out {
            Some(o) => (o + term)?,
            None => term,
        });
    }
    Ok(out.expect("four corners").reshape((n, c, h, w))?)
}

/// Residual composition `result(x) = prev(x + delta(x)) + delta(x)`.
///
/// `prev` is sampled bilinearly with border replication, so fields keep
/// extrapolating sensibly where `x + delta(x)` leaves the grid.
pub fn compose(prev: &DisplacementField, delta: &DisplacementField) -> Result<DisplacementField> {
    if prev.level() != delta.level() {
        return Err(SomaError::Invalid(format!(
            "cannot compose fields at levels {} and {}",
            prev.level(),
            delta.level()
        )));
    }
    if prev.tensor().dims() != delta.tensor().dims() {
        return Err(SomaError::Shape(format!(
            "cannot compose fields of shapes {:?} and {:?}",
            prev.tensor().dims(),
            delta.tensor().dims()
        )));
    }
    let sampled = warp(prev.tensor(), delta, Padding::Border)?;
    DisplacementField::new((sampled + delta.tensor())?, delta.level())
}

/// Bilinear spatial upsampling to a finer level; displacement values are
/// rescaled by `level / target` so they stay in target-level pixels.
pub fn upsample_field(field: &DisplacementField, target: Level) -> Result<DisplacementField> {
    if target >= field.level() {
        return Err(SomaError::Invalid(format!(
            "upsampling needs a finer target level: {} -> {}",
            field.level(),
            target
        )));
    }
    let ratio = field.level().factor() / target.factor();
    let (_, h, w) = field.dims();
    let resized = ops::resize_bilinear(field.tensor(), h * ratio, w * ratio)?;
    DisplacementField::new(resized.affine(ratio as f64, 0.0)?, target)
}

/// Per-pixel end-point error `‖a(x) − b(x)‖₂`, shape `(N, H, W)`.
pub fn endpoint_error(a: &DisplacementField, b: &DisplacementField) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let sq = (a.tensor() - b.tensor())?.sqr()?.sum(1)?;
    ops::safe_sqrt(&sq)
}

/// Per-sample RMSE of the end-point error, shape `(N,)`.
pub fn field_rmse_per_sample(a: &DisplacementField, b: &DisplacementField) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let sq = (a.tensor() - b.tensor())?.sqr()?.sum(1)?; // (N, H, W)
    let (n, _, _) = a.dims();
    let mse = sq.reshape((n, ()))?.mean(1)?;
    ops::safe_sqrt(&mse)
}

/// `sqrt(mean_x ‖a(x) − b(x)‖²)`, averaged over the batch. Scalar tensor.
pub fn field_rmse(a: &DisplacementField, b: &DisplacementField) -> Result<Tensor> {
    Ok(field_rmse_per_sample(a, b)?.mean(0)?)
}

fn check_same_shape(a: &DisplacementField, b: &DisplacementField) -> Result<()> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(SomaError::Shape(format!(
            "field shapes differ: {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEV: Device = Device::Cpu;

    #[test]
    fn level_roundtrip_and_rejects_unknown_factor() {
        for l in Level::ALL {
            assert_eq!(Level::from_factor(l.factor()).unwrap(), l);
        }
        assert!(Level::from_factor(3).is_err());
    }

    #[test]
    fn grid_pixels_are_exact() {
        let g = Grid::new(3, 4, GridConvention::Pixels, DType::F64, &DEV).unwrap();
        let v = g.coords().to_vec3::<f64>().unwrap();
        assert_eq!(v[0][2][3], 3.0);
        assert_eq!(v[1][2][3], 2.0);
        let n = Grid::new(3, 5, GridConvention::Normalized, DType::F64, &DEV).unwrap();
        let v = n.coords().to_vec3::<f64>().unwrap();
        assert_eq!(v[0][0][0], -1.0);
        assert_eq!(v[0][0][4], 1.0);
        assert_eq!(v[1][1][0], 0.0);
    }

    #[test]
    fn affine_matrix_inverse_and_compose() {
        let m = AffineMatrix([[0.9, -0.1, 0.2], [0.05, 1.1, -0.3]]);
        let id = m.compose(&m.inverse().unwrap());
        for r in 0..2 {
            for c in 0..3 {
                assert!((id.0[r][c] - AffineMatrix::IDENTITY.0[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_to_flow_rejects_nonfinite_and_tiny_grids() {
        let bad = AffineParams::from_matrices(
            &[AffineMatrix([[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0]])],
            DType::F64,
            &DEV,
        )
        .unwrap();
        assert!(matches!(
            affine_to_flow(&bad, 8, 8, Level::L1),
            Err(SomaError::Invalid(_))
        ));
        let id = AffineParams::identity(1, DType::F64, &DEV).unwrap();
        assert!(affine_to_flow(&id, 1, 8, Level::L1).is_err());
    }

    #[test]
    fn warp_rejects_shape_mismatch() {
        let f = Tensor::zeros((1, 3, 5, 5), DType::F64, &DEV).unwrap();
        let d = DisplacementField::zeros(1, 4, 5, Level::L1, DType::F64, &DEV).unwrap();
        assert!(matches!(warp(&f, &d, Padding::Zeros), Err(SomaError::Shape(_))));
    }

    #[test]
    fn compose_rejects_level_mismatch() {
        let a = DisplacementField::zeros(1, 4, 4, Level::L4, DType::F64, &DEV).unwrap();
        let b = DisplacementField::zeros(1, 4, 4, Level::L8, DType::F64, &DEV).unwrap();
        assert!(matches!(compose(&a, &b), Err(SomaError::Invalid(_))));
    }

    #[test]
    fn upsample_rejects_coarser_target() {
        let a = DisplacementField::zeros(1, 4, 4, Level::L4, DType::F64, &DEV).unwrap();
        assert!(upsample_field(&a, Level::L8).is_err());
        assert!(upsample_field(&a, Level::L4).is_err());
    }

    #[test]
    fn border_padding_replicates_edges() {
        let f = Tensor::arange(0f64, 4.0, &DEV).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let d = DisplacementField::constant(1, 2, 2, Level::L1, (5.0, 0.0), DType::F64, &DEV)
            .unwrap();
        let out = warp(&f, &d, Padding::Border).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![1.0, 1.0, 3.0, 3.0]);
    }
}
