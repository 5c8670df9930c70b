//! Random geometric perturbations that manufacture ground-truth warps.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Result, SomaError};
use crate::geometry::{
    affine_to_flow, warp, AffineMatrix, AffineParams, DisplacementField, Level, Padding,
};

/// Bounds of the uniform perturbation distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    /// Per-axis translation bound in pixels.
    pub max_translation_px: f64,
    /// Scale is drawn from `[1 - scale_delta, 1 + scale_delta]`.
    pub scale_delta: f64,
    pub max_rotation_deg: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            max_translation_px: 32.0,
            scale_delta: 0.2,
            max_rotation_deg: 5.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    /// Larger translations and rotations for robustness experiments.
    pub fn extended() -> Self {
        Self {
            max_translation_px: 50.0,
            max_rotation_deg: 20.0,
            ..Self::default()
        }
    }

    /// No perturbation at all.
    pub fn none() -> Self {
        Self {
            max_translation_px: 0.0,
            scale_delta: 0.0,
            max_rotation_deg: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = [self.max_translation_px, self.scale_delta, self.max_rotation_deg];
        if b.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SomaError::Config("perturbation bounds must be finite and >= 0".into()));
        }
        if self.scale_delta >= 1.0 {
            return Err(SomaError::Config("scale_delta must be below 1".into()));
        }
        Ok(())
    }
}

/// The drawn parameters of one perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation_px: (f64, f64),
}

impl Perturbation {
    pub const IDENTITY: Perturbation = Perturbation {
        rotation_deg: 0.0,
        scale: 1.0,
        translation_px: (0.0, 0.0),
    };

    /// Rotation and scale about the image centre, then translation, in pixel
    /// coordinates: `y = c + s·R·(x − c) + t`.
    pub fn pixel_matrix(&self, height: usize, width: usize) -> AffineMatrix {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (a, b, c, d) = (self.scale * cos, -self.scale * sin, self.scale * sin, self.scale * cos);
        let (tx, ty) = self.translation_px;
        AffineMatrix([
            [a, b, cx - a * cx - b * cy + tx],
            [c, d, cy - c * cx - d * cy + ty],
        ])
    }

    /// The same map in normalized coordinates.
    pub fn matrix(&self, height: usize, width: usize) -> AffineMatrix {
        pixel_to_normalized_matrix(&self.pixel_matrix(height, width), height, width)
    }
}

/// Conjugates a pixel-space affine map into normalized coordinates.
pub fn pixel_to_normalized_matrix(m: &AffineMatrix, height: usize, width: usize) -> AffineMatrix {
    let sx = 2.0 / (width as f64 - 1.0);
    let sy = 2.0 / (height as f64 - 1.0);
    // N(x) = S x - 1, P(u) = S^-1 (u + 1)
    let to_norm = AffineMatrix([[sx, 0.0, -1.0], [0.0, sy, -1.0]]);
    let to_pix = AffineMatrix([[1.0 / sx, 0.0, 1.0 / sx], [0.0, 1.0 / sy, 1.0 / sy]]);
    to_norm.compose(&m.compose(&to_pix))
}

/// Draws every parameter uniformly within its bound.
pub fn sample_perturbation(spec: &PerturbationSpec, rng: &mut impl Rng) -> Perturbation {
    let mut sym = |bound: f64| {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let rotation_deg = sym(spec.max_rotation_deg);
    let scale = 1.0 + sym(spec.scale_delta);
    let tx = sym(spec.max_translation_px);
    let ty = sym(spec.max_translation_px);
    Perturbation {
        rotation_deg,
        scale,
        translation_px: (tx, ty),
    }
}

/// Output of [`apply_perturbation`].
#[derive(Clone, Debug)]
pub struct Perturbed {
    /// `(1, 1, H, W)` SAR tile resampled so that `sar'(θ x) = sar(x)`.
    pub sar: Tensor,
    /// `(1, 2, H, W)` ground truth on the optical grid:
    /// `warp(sar', gt) ≈ sar` wherever `mask` is 1.
    pub gt: DisplacementField,
    /// `(1, H, W)`, 1 where `x + gt(x)` lies inside the frame.
    pub mask: Tensor,
}

/// Warps a SAR tile `(C, H, W)` by θ and returns it with its ground truth.
pub fn apply_perturbation(
    optical: &Tensor,
    sar: &Tensor,
    theta: &AffineMatrix,
) -> Result<Perturbed> {
    let (_, ho, wo) = optical.dims3()?;
    let (cs, h, w) = sar.dims3()?;
    if (ho, wo) != (h, w) {
        return Err(SomaError::Shape(format!(
            "optical {ho}x{wo} and SAR {h}x{w} tiles differ in size"
        )));
    }
    let dev = sar.device();
    let forward = AffineParams::from_matrices(&[*theta], DType::F64, dev)?;
    let inverse = AffineParams::from_matrices(&[theta.inverse()?], DType::F64, dev)?;
    let gt = affine_to_flow(&forward, h, w, Level::L1)?;
    let backward = affine_to_flow(&inverse, h, w, Level::L1)?;
    let sar64 = sar.to_dtype(DType::F64)?.reshape((1, cs, h, w))?;
    let warped = warp(&sar64, &backward, Padding::Zeros)?.to_dtype(sar.dtype())?;
    let mask = inside_mask(&gt)?;
    Ok(Perturbed {
        sar: warped,
        gt,
        mask,
    })
}

/// `(N, H, W)` f32 mask of pixels whose target `x + field(x)` is inside the frame.
pub fn inside_mask(field: &DisplacementField) -> Result<Tensor> {
    let (n, h, w) = field.dims();
    let eps = 1e-9;
    let mut m = Vec::with_capacity(n * h * w);
    for s in 0..n {
        for (i, p) in field.to_pixels(s)?.iter().enumerate() {
            let x = (i % w) as f64 + p[0];
            let y = (i / w) as f64 + p[1];
            let inside =
                x >= -eps && x <= (w - 1) as f64 + eps && y >= -eps && y <= (h - 1) as f64 + eps;
            m.push(if inside { 1f32 } else { 0.0 });
        }
    }
    Ok(Tensor::from_vec(m, (n, h, w), &Device::Cpu)?.to_device(field.device())?)
}
