//! Hierarchical affine/flow matcher.
//!
//! Levels are processed coarse to fine. At every level the SAR features are
//! warped by the accumulated estimate of the previous level (upsampled), the
//! pair `[φ_o, warp(φ_s)]` is concatenated and handed to the decoders active
//! at that level:
//!
//! * affine only (default: 16): `Ŵ_l = compose(Ŵ_prev, affine_to_flow(θ_l))`
//! * affine + flow (default: 8, 4): the flow residual advances the estimate,
//!   `Ŵ_l = compose(Ŵ_prev, Ŵ_f)`, while `Ŵ_a = affine_to_flow(θ_l)` is kept
//!   for the consistency term of the loss
//! * flow only (default: 2, 1): `Ŵ_l = compose(Ŵ_prev, Ŵ_f)`; at level 1 the
//!   certainty head branches off the flow decoder.
//!
//! Every decoder head is zero-initialised, so an untrained matcher is the
//! identity registration.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Init, Linear, Module, VarBuilder};

use crate::encoder::{ChannelSchedule, FeaturePyramid};
use crate::error::{Result, SomaError};
use crate::geometry::{
    affine_to_flow, compose, upsample_field, warp, AffineParams, DisplacementField, Grid,
    GridConvention, Level, Padding,
};
use crate::nn::{conv, conv_with_init, Conv, linear, ConvRelu, ConvSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct GlamConfig {
    /// With `false` the matcher degrades to a flow-only pyramid over all five levels.
    pub enabled: bool,
    pub affine_levels: Vec<Level>,
    pub flow_levels: Vec<Level>,
    /// Hidden width of the decoders at each level, finest first.
    pub decoder_channels: [usize; 5],
    /// Hidden width of the affine MLP.
    pub affine_hidden: usize,
}

impl Default for GlamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            affine_levels: vec![Level::L16, Level::L8, Level::L4],
            flow_levels: vec![Level::L8, Level::L4, Level::L2, Level::L1],
            decoder_channels: [32, 64, 64, 64, 64],
            affine_hidden: 64,
        }
    }
}

impl GlamConfig {
    /// `(affine levels, flow levels)` actually used, after applying `enabled`.
    pub fn effective_levels(&self) -> (BTreeSet<Level>, BTreeSet<Level>) {
        if self.enabled {
            (
                self.affine_levels.iter().copied().collect(),
                self.flow_levels.iter().copied().collect(),
            )
        } else {
            (BTreeSet::new(), Level::ALL.iter().copied().collect())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (affine, flow) = self.effective_levels();
        if !flow.contains(&Level::L1) {
            return Err(SomaError::Config(
                "the flow decoder must run at level 1 (it carries the certainty head)".into(),
            ));
        }
        if affine.union(&flow).max() != Some(&Level::L16) {
            return Err(SomaError::Config("matching must start at level 16".into()));
        }
        Ok(())
    }

    fn hidden(&self, level: Level) -> usize {
        self.decoder_channels[Level::ALL.iter().position(|l| *l == level).expect("level")]
    }
}

/// Two 3×3 conv blocks, global average pooling and a two-layer MLP whose
/// output layer starts at zero, added to the identity transform.
///
/// Two normalized coordinate channels are appended to the input so pooled
/// features can express position.
#[derive(Clone, Debug)]
pub struct AffineRegressor {
    c1: ConvRelu,
    c2: ConvRelu,
    fc1: Linear,
    fc2: Linear,
}

impl AffineRegressor {
    pub fn new(vb: VarBuilder, in_channels: usize, hidden: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(Self {
            c1: ConvRelu::new(vb.pp("c1"), in_channels + 2, hidden, ConvSpec::k3())?,
            c2: ConvRelu::new(vb.pp("c2"), hidden, hidden, ConvSpec::k3())?,
            fc1: linear(vb.pp("fc1"), hidden, mlp_hidden, candle_nn::init::DEFAULT_KAIMING_NORMAL)?,
            fc2: linear(vb.pp("fc2"), mlp_hidden, 6, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<AffineParams> {
        let (n, _, h, w) = x.dims4()?;
        let coords = Grid::new(h, w, GridConvention::Normalized, x.dtype(), x.device())?
            .coords()
            .unsqueeze(0)?
            .broadcast_as((n, 2, h, w))?;
        let x = Tensor::cat(&[x, &coords], 1)?;
        let f = self.c2.forward(&self.c1.forward(&x)?)?;
        let pooled = f.mean(D::Minus1)?.mean(D::Minus1)?;
        let out = self.fc2.forward(&self.fc1.forward(&pooled)?.relu()?)?;
        let identity = AffineParams::identity(1, x.dtype(), x.device())?;
        AffineParams::new(out.reshape((n, 2, 3))?.broadcast_add(identity.tensor())?)
    }
}

/// Three 3×3 conv blocks; the last one is a zero-initialised 2-channel head.
#[derive(Clone, Debug)]
pub struct FlowRegressor {
    c1: ConvRelu,
    c2: ConvRelu,
    head: Conv,
}

impl FlowRegressor {
    pub fn new(vb: VarBuilder, in_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            c1: ConvRelu::new(vb.pp("c1"), in_channels, hidden, ConvSpec::k3())?,
            c2: ConvRelu::new(vb.pp("c2"), hidden, hidden, ConvSpec::k3())?,
            head: conv_with_init(vb.pp("head"), hidden, 2, ConvSpec::k3(), Init::Const(0.0))?,
        })
    }

    /// `(residual field tensor (N, 2, h, w), penultimate features)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.c2.forward(&self.c1.forward(x)?)?;
        Ok((self.head.forward(&f)?, f))
    }
}

/// One 3×3 conv to a single logit channel.
#[derive(Clone, Debug)]
pub struct CertaintyHead {
    conv: Conv,
}

impl CertaintyHead {
    pub fn new(vb: VarBuilder, in_channels: usize) -> Result<Self> {
        Ok(Self {
            conv: conv(vb, in_channels, 1, ConvSpec::k3())?,
        })
    }

    /// `(N, H, W)` logits.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(features)?.squeeze(1)?)
    }
}

/// Everything one level produced.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: Level,
    /// Accumulated estimate entering this level, at this level (`Ŵ_prev`).
    pub prev: DisplacementField,
    pub theta: Option<AffineParams>,
    /// `affine_to_flow(θ_l)` (`Ŵ_a`).
    pub affine: Option<DisplacementField>,
    /// Residual flow (`Ŵ_f`).
    pub flow: Option<DisplacementField>,
    /// Accumulated estimate leaving this level (`Ŵ_l`).
    pub accumulated: DisplacementField,
}

#[derive(Clone, Debug)]
pub struct MatchResult {
    pub final_field: DisplacementField,
    /// `(N, H, W)` certainty logits; `None` on the inference path.
    pub certainty_logits: Option<Tensor>,
    pub levels: BTreeMap<Level, LevelOutput>,
}

impl MatchResult {
    pub fn affine_levels(&self) -> Vec<Level> {
        self.levels
            .values()
            .filter(|o| o.affine.is_some())
            .map(|o| o.level)
            .collect()
    }

    pub fn flow_levels(&self) -> Vec<Level> {
        self.levels
            .values()
            .filter(|o| o.flow.is_some())
            .map(|o| o.level)
            .collect()
    }

    pub fn level(&self, level: Level) -> Option<&LevelOutput> {
        self.levels.get(&level)
    }
}

#[derive(Debug)]
pub struct Glam {
    affine: BTreeMap<Level, AffineRegressor>,
    flow: BTreeMap<Level, FlowRegressor>,
    certainty: CertaintyHead,
    projections: Option<(Conv, Conv)>,
    config: GlamConfig,
}

impl Glam {
    /// `project_coarse` adds per-modality 1×1 projections on the level-16
    /// features (used when those come from a shared frozen encoder).
    pub fn new(
        vb: VarBuilder,
        schedule: &ChannelSchedule,
        config: GlamConfig,
        project_coarse: bool,
    ) -> Result<Self> {
        config.validate()?;
        let (affine_levels, flow_levels) = config.effective_levels();
        let mut affine = BTreeMap::new();
        for l in &affine_levels {
            let cin = 2 * schedule.width(*l);
            affine.insert(
                *l,
                AffineRegressor::new(
                    vb.pp(format!("affine{}", l.factor())),
                    cin,
                    config.hidden(*l),
                    config.affine_hidden,
                )?,
            );
        }
        let mut flow = BTreeMap::new();
        for l in &flow_levels {
            let cin = 2 * schedule.width(*l);
            flow.insert(
                *l,
                FlowRegressor::new(vb.pp(format!("flow{}", l.factor())), cin, config.hidden(*l))?,
            );
        }
        let certainty = CertaintyHead::new(vb.pp("certainty"), config.hidden(Level::L1))?;
        let projections = if project_coarse {
            let c = schedule.width(Level::L16);
            Some((
                conv(vb.pp("proj16.optical"), c, c, ConvSpec::k1())?,
                conv(vb.pp("proj16.sar"), c, c, ConvSpec::k1())?,
            ))
        } else {
            None
        };
        Ok(Self {
            affine,
            flow,
            certainty,
            projections,
            config,
        })
    }

    pub fn config(&self) -> &GlamConfig {
        &self.config
    }

    pub fn affine_regressor(&self, level: Level) -> Option<&AffineRegressor> {
        self.affine.get(&level)
    }

    pub fn flow_regressor(&self, level: Level) -> Option<&FlowRegressor> {
        self.flow.get(&level)
    }

    pub fn certainty_head(&self) -> &CertaintyHead {
        &self.certainty
    }

    /// Runs the full coarse-to-fine estimate. Certainty logits are only
    /// computed when `with_certainty` is set; they never feed back into the
    /// fields.
    pub fn match_pyramids(
        &self,
        optical: &FeaturePyramid,
        sar: &FeaturePyramid,
        with_certainty: bool,
    ) -> Result<MatchResult> {
        let (n, h, w) = optical.input_dims();
        if sar.input_dims() != (n, h, w) {
            return Err(SomaError::Shape(format!(
                "pyramids built from different inputs: {:?} vs {:?}",
                optical.input_dims(),
                sar.input_dims()
            )));
        }
        for l in Level::ALL {
            if optical.level(l).dims() != sar.level(l).dims() {
                return Err(SomaError::Shape(format!(
                    "level {l}: optical {:?} vs sar {:?}",
                    optical.level(l).dims(),
                    sar.level(l).dims()
                )));
            }
        }
        let dtype = optical.level(Level::L1).dtype();
        let dev = optical.level(Level::L1).device().clone();

        let mut levels = BTreeMap::new();
        let mut current: Option<DisplacementField> = None;
        let mut logits = None;
        for level in Level::COARSE_TO_FINE {
            let has_affine = self.affine.contains_key(&level);
            let has_flow = self.flow.contains_key(&level);
            if !has_affine && !has_flow {
                continue;
            }
            let (hl, wl) = level.size_of(h, w);
            let mut fo = optical.level(level).clone();
            let mut fs = sar.level(level).clone();
            if level == Level::L16 {
                if let Some((po, ps)) = &self.projections {
                    fo = po.forward(&fo)?;
                    fs = ps.forward(&fs)?;
                }
            }
            let (prev, warped) = match &current {
                None => (DisplacementField::zeros(n, hl, wl, level, dtype, &dev)?, fs),
                Some(c) => {
                    let p = upsample_field(c, level)?;
                    let ws = warp(&fs, &p, Padding::Zeros)?;
                    (p, ws)
                }
            };
            let input = Tensor::cat(&[&fo, &warped], 1)?;

            let (theta, affine_field) = match self.affine.get(&level) {
                Some(reg) => {
                    let theta = reg.forward(&input)?;
                    let field = affine_to_flow(&theta, hl, wl, level)?;
                    (Some(theta), Some(field))
                }
                None => (None, None),
            };
            let flow = match self.flow.get(&level) {
                Some(reg) => {
                    let (f, features) = reg.forward(&input)?;
                    if level == Level::L1 && with_certainty {
                        logits = Some(self.certainty.forward(&features)?);
                    }
                    Some(DisplacementField::new(f, level)?)
                }
                None => None,
            };
            let step = flow
                .as_ref()
                .or(affine_field.as_ref())
                .expect("at least one decoder");
            let accumulated = compose(&prev, step)?;
            current = Some(accumulated.clone());
            levels.insert(
                level,
                LevelOutput {
                    level,
                    prev,
                    theta,
                    affine: affine_field,
                    flow,
                    accumulated,
                },
            );
        }
        let last = current.ok_or_else(|| SomaError::Config("no active matching level".into()))?;
        let final_field = if last.level() == Level::L1 {
            last
        } else {
            upsample_field(&last, Level::L1)?
        };
        Ok(MatchResult {
            final_field,
            certainty_logits: logits,
            levels,
        })
    }
}

/// Convenience for tests and examples: a zero field at level 1 for `(n, h, w)`.
pub fn identity_field(n: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<DisplacementField> {
    DisplacementField::zeros(n, h, w, Level::L1, dtype, dev)
}
