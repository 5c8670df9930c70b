//! Training objective.
//!
//! ```text
//! total = warp + λ·cons + α_c·cert + α_d·delta + α_u·uni
//! ```
//!
//! RMSE always means the Euclidean end-point error, root-mean-squared over
//! pixels, per sample, then averaged over the batch. An optional validity
//! mask `(N, H, W)` of zeros and ones restricts every full-resolution term
//! to valid pixels.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Result, SomaError};
use crate::geometry::{endpoint_error, upsample_field, DisplacementField, Level};
use crate::glam::MatchResult;
use crate::ops;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// λ on the affine/flow consistency term.
    pub consistency: f64,
    /// α_c on the certainty term.
    pub certainty: f64,
    /// α_d on the residual supervision term.
    pub delta: f64,
    /// α_u on the uniformity term.
    pub uniformity: f64,
    /// Per-level weights of the residual supervision term.
    pub level_weights: BTreeMap<Level, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            consistency: 0.5,
            certainty: 0.1,
            delta: 0.1,
            uniformity: 0.1,
            level_weights: [
                (Level::L8, 0.125),
                (Level::L4, 0.25),
                (Level::L2, 0.5),
                (Level::L1, 1.0),
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.consistency, self.certainty, self.delta, self.uniformity];
        if all
            .iter()
            .chain(self.level_weights.values())
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(SomaError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Scalar tensors of every term, still attached to the graph.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub warp: Tensor,
    pub cons: Tensor,
    pub cert: Tensor,
    pub delta: Tensor,
    pub uni: Tensor,
    pub total: Tensor,
}

/// Plain values of a [`LossBreakdown`], one training-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub warp: f64,
    pub cons: f64,
    pub cert: f64,
    pub delta: f64,
    pub uni: f64,
    pub total: f64,
}

impl LossValues {
    pub const TERMS: [&'static str; 6] = ["warp", "cons", "cert", "delta", "uni", "total"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.warp, self.cons, self.cert, self.delta, self.uni, self.total]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.as_array())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

impl LossBreakdown {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            warp: ops::scalar(&self.warp)?,
            cons: ops::scalar(&self.cons)?,
            cert: ops::scalar(&self.cert)?,
            delta: ops::scalar(&self.delta)?,
            uni: ops::scalar(&self.uni)?,
            total: ops::scalar(&self.total)?,
        })
    }
}

fn check_mask(mask: Option<&Tensor>, field: &DisplacementField) -> Result<()> {
    if let Some(m) = mask {
        if m.dims() != [field.dims().0, field.dims().1, field.dims().2] {
            return Err(SomaError::Shape(format!(
                "mask {:?} does not match field {:?}",
                m.dims(),
                field.tensor().dims()
            )));
        }
    }
    Ok(())
}

fn check_pair(a: &DisplacementField, b: &DisplacementField) -> Result<()> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(SomaError::Shape(format!(
            "field shapes differ: {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    Ok(())
}

/// `(N,)` masked mean of an `(N, H, W)` map; samples with an empty mask give 0.
fn masked_mean_per_sample(values: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let n = values.dim(0)?;
    let flat = values.reshape((n, ()))?;
    match mask {
        None => Ok(flat.mean(1)?),
        Some(m) => {
            let m = m.to_dtype(values.dtype())?.reshape((n, ()))?;
            let num = (flat * &m)?.sum(1)?;
            let den = m.sum(1)?.clamp(1.0, f64::INFINITY)?;
            Ok((num / den)?)
        }
    }
}

/// Masked end-point RMSE per sample, `(N,)`.
pub fn rmse_per_sample(
    a: &DisplacementField,
    b: &DisplacementField,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    check_pair(a, b)?;
    check_mask(mask, a)?;
    let sq = (a.tensor() - b.tensor())?.sqr()?.sum(1)?;
    ops::safe_sqrt(&masked_mean_per_sample(&sq, mask)?)
}

fn rmse(a: &DisplacementField, b: &DisplacementField, mask: Option<&Tensor>) -> Result<Tensor> {
    Ok(rmse_per_sample(a, b, mask)?.mean(0)?)
}

fn check_gt(result: &MatchResult, gt: &DisplacementField) -> Result<()> {
    if gt.level() != Level::L1 {
        return Err(SomaError::Invalid(format!(
            "ground truth must be at level 1, got {}",
            gt.level()
        )));
    }
    check_pair(&result.final_field, gt)
}

/// `RMSE(Ŵ_1, W_gt)`.
pub fn warp_loss(result: &MatchResult, gt: &DisplacementField, mask: Option<&Tensor>) -> Result<Tensor> {
    check_gt(result, gt)?;
    rmse(&result.final_field, gt, mask)
}

/// `Σ_l RMSE(Ŵ_l^f, Ŵ_l^a)` over the levels where both decoders ran, each
/// at its own resolution.
pub fn consistency_loss(result: &MatchResult) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for out in result.levels.values() {
        if let (Some(f), Some(a)) = (&out.flow, &out.affine) {
            let term = rmse(f, a, None)?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| {
        SomaError::Invalid("consistency needs at least one level with both affine and flow".into())
    })
}

/// `mean_x (σ(p̂(x)) − exp(−‖Ŵ_1(x) − W_gt(x)‖))²`; logits are `(N, H, W)`.
pub fn certainty_loss(
    logits: &Tensor,
    predicted: &DisplacementField,
    gt: &DisplacementField,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    check_pair(predicted, gt)?;
    check_mask(mask, predicted)?;
    let (n, h, w) = predicted.dims();
    if logits.dims() != [n, h, w] {
        return Err(SomaError::Shape(format!(
            "certainty logits {:?} do not match field {:?}",
            logits.dims(),
            predicted.tensor().dims()
        )));
    }
    let target = endpoint_error(predicted, gt)?.neg()?.exp()?;
    let p = candle_nn::ops::sigmoid(&logits.to_dtype(target.dtype())?)?;
    let sq = (p - target)?.sqr()?;
    Ok(masked_mean_per_sample(&sq, mask)?.mean(0)?)
}

/// `Σ_l w_l · mean|up(Ŵ_l^f) − (W_gt − up(Ŵ_l^prev))|` over pixels and both
/// channels.
pub fn delta_loss(
    result: &MatchResult,
    gt: &DisplacementField,
    level_weights: &BTreeMap<Level, f64>,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    check_gt(result, gt)?;
    check_mask(mask, gt)?;
    let to_full = |f: &DisplacementField| -> Result<DisplacementField> {
        if f.level() == Level::L1 {
            Ok(f.clone())
        } else {
            upsample_field(f, Level::L1)
        }
    };
    let mut total: Option<Tensor> = None;
    for (level, weight) in level_weights {
        let out = result.level(*level).ok_or_else(|| {
            SomaError::Invalid(format!("residual supervision: no output at level {level}"))
        })?;
        let flow = out.flow.as_ref().ok_or_else(|| {
            SomaError::Invalid(format!("residual supervision: no flow at level {level}"))
        })?;
        let residual = to_full(flow)?;
        let prev = to_full(&out.prev)?;
        let gap = (gt.tensor() - prev.tensor())?;
        let abs = (residual.tensor() - gap)?.abs()?.mean(1)?; // (N, H, W), mean of 2 channels
        let term = masked_mean_per_sample(&abs, mask)?.mean(0)?.affine(*weight, 0.0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| SomaError::Invalid("residual supervision has no weighted levels".into()))
}

/// Population standard deviation of the four quadrant RMSEs.
pub fn uniformity_loss(
    predicted: &DisplacementField,
    gt: &DisplacementField,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    check_pair(predicted, gt)?;
    check_mask(mask, predicted)?;
    let (_, h, w) = predicted.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SomaError::Invalid(format!(
            "uniformity needs even dimensions, got {h}x{w}"
        )));
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut quads = Vec::with_capacity(4);
    for (y, x) in [(0, 0), (0, hw), (hh, 0), (hh, hw)] {
        let crop = |f: &DisplacementField| -> Result<DisplacementField> {
            DisplacementField::new(f.tensor().narrow(2, y, hh)?.narrow(3, x, hw)?, f.level())
        };
        let m = match mask {
            Some(m) => Some(m.narrow(1, y, hh)?.narrow(2, x, hw)?),
            None => None,
        };
        quads.push(rmse_per_sample(&crop(predicted)?, &crop(gt)?, m.as_ref())?);
    }
    let r = Tensor::stack(&quads, 1)?; // (N, 4)
    let var = r.broadcast_sub(&r.mean_keepdim(1)?)?.sqr()?.mean(1)?;
    Ok(ops::safe_sqrt(&var)?.mean(0)?)
}

/// Weighted sum of all five terms. Levels without both decoders contribute
/// nothing to the consistency term; a missing certainty map contributes 0.
pub fn total_loss(
    result: &MatchResult,
    gt: &DisplacementField,
    weights: &LossWeights,
    mask: Option<&Tensor>,
) -> Result<LossBreakdown> {
    let zero = || -> Result<Tensor> {
        Ok(Tensor::zeros((), gt.dtype(), gt.device())?)
    };
    let warp = warp_loss(result, gt, mask)?;
    let has_coupled = result
        .levels
        .values()
        .any(|o| o.flow.is_some() && o.affine.is_some());
    let cons = if has_coupled { consistency_loss(result)? } else { zero()? };
    let cert = match &result.certainty_logits {
        Some(l) => certainty_loss(l, &result.final_field, gt, mask)?,
        None => zero()?,
    };
    let delta = delta_loss(result, gt, &weights.level_weights, mask)?;
    let uni = uniformity_loss(&result.final_field, gt, mask)?;
    let total = (&warp
        + cons.affine(weights.consistency, 0.0)?
        + cert.affine(weights.certainty, 0.0)?
        + delta.affine(weights.delta, 0.0)?
        + uni.affine(weights.uniformity, 0.0)?)?;
    Ok(LossBreakdown {
        warp,
        cons,
        cert,
        delta,
        uni,
        total,
    })
}
