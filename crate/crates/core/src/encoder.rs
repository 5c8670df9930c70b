//! Dual feature pyramids.
//!
//! Each modality has its own trainable backbone producing levels 1, 2, 4
//! and 8. Level 16 comes from a shared coarse encoder (frozen) when one is
//! configured, otherwise from a fifth trainable backbone stage.
//!
//! Backbone layout, per modality:
//!
//! | level | layers |
//! |-------|--------|
//! | 1     | 1×1 input projection → 3×3 conv |
//! | 2,4,8 | 3×3 stride-2 conv → residual block (two 3×3 convs) |
//! | 16    | same stage shape, only without a coarse encoder |

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Module, VarBuilder};

use crate::error::{Result, SomaError};
use crate::geometry::Level;
use crate::nn::{conv, Conv, ConvRelu, ConvSpec};
use crate::ops;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Optical,
    Sar,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Optical => "optical",
            Modality::Sar => "sar",
        }
    }
}

/// Channel width per level, finest first (`[C_1, C_2, C_4, C_8, C_16]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSchedule(pub [usize; 5]);

impl ChannelSchedule {
    pub const DESK: ChannelSchedule = ChannelSchedule([32, 64, 128, 256, 64]);

    pub fn width(&self, level: Level) -> usize {
        self.0[Level::ALL.iter().position(|l| *l == level).expect("known level")]
    }
}

impl Default for ChannelSchedule {
    fn default() -> Self {
        Self::DESK
    }
}

/// Five feature maps `(N, C_l, H/l, W/l)` for one modality.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: BTreeMap<Level, Tensor>,
    modality: Modality,
}

impl FeaturePyramid {
    pub fn new(levels: BTreeMap<Level, Tensor>, modality: Modality) -> Result<Self> {
        for l in Level::ALL {
            if !levels.contains_key(&l) {
                return Err(SomaError::Shape(format!("pyramid lacks level {l}")));
            }
        }
        Ok(Self { levels, modality })
    }

    pub fn level(&self, level: Level) -> &Tensor {
        &self.levels[&level]
    }

    pub fn replace(&mut self, level: Level, features: Tensor) {
        self.levels.insert(level, features);
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// `(N, H, W)` of the full-resolution input this pyramid was built from.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        let d = self.levels[&Level::L1].dims();
        (d[0], d[2], d[3])
    }

    /// Checks spatial sizes against `(height, width)` and widths against `schedule`.
    pub fn validate(&self, height: usize, width: usize, schedule: &ChannelSchedule) -> Result<()> {
        for (l, t) in &self.levels {
            let (_, c, h, w) = t.dims4()?;
            let expected = l.size_of(height, width);
            if (h, w) != expected || c != schedule.width(*l) {
                return Err(SomaError::Shape(format!(
                    "level {l}: got {c}x{h}x{w}, expected {}x{}x{}",
                    schedule.width(*l),
                    expected.0,
                    expected.1
                )));
            }
        }
        Ok(())
    }
}

/// A pluggable producer of the level-16 feature map.
///
/// Implementations may emit any grid size; [`adapt_coarse_grid`] resamples it
/// to `H/16 × W/16`. A frozen encoder must be deterministic and must not let
/// gradients reach its parameters.
pub trait CoarseEncoder: Send + Sync + fmt::Debug {
    /// `(N, C_in, H, W)` image to `(N, channels, h, w)` features.
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn channels(&self) -> usize;
    fn frozen(&self) -> bool;
    fn parameter_count(&self) -> usize;
    fn parameter_hash(&self) -> Result<String>;
}

/// Seeded, randomly initialised, frozen convolutional encoder: four
/// stride-2 3×3 convolutions on the channel-mean image.
///
/// Stands in for a pretrained self-supervised backbone so the full
/// pipeline runs offline.
#[derive(Debug)]
pub struct RandomCoarseEncoder {
    store: ParamStore,
    convs: Vec<Conv>,
    channels: usize,
}

impl RandomCoarseEncoder {
    pub fn new(channels: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed);
        let vb = store.var_builder(dtype, device);
        let widths = [1, (channels / 4).max(8), (channels / 2).max(8), channels, channels];
        let convs = (0..4)
            .map(|i| {
                conv(
                    vb.pp(format!("coarse.{i}")),
                    widths[i],
                    widths[i + 1],
                    ConvSpec::k3().stride(2),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            store,
            convs,
            channels,
        })
    }
}

impl CoarseEncoder for RandomCoarseEncoder {
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = image.detach().mean_keepdim(1)?;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(&x)?;
            if i + 1 < self.convs.len() {
                x = x.relu()?;
            }
        }
        Ok(x.detach())
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn frozen(&self) -> bool {
        true
    }

    fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    fn parameter_hash(&self) -> Result<String> {
        self.store.hash()
    }
}

/// Bilinear resampling of a coarse-encoder grid `(N, C, h, w)` to `target`;
/// identity when the sizes already match.
pub fn adapt_coarse_grid(raw: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = raw.dims4()?;
    if h == 0 || w == 0 {
        return Err(SomaError::Shape("coarse grid must be at least 1x1".into()));
    }
    ops::resize_bilinear(raw, target.0, target.1)
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvRelu,
    a: ConvRelu,
    b: Conv,
}

impl Stage {
    fn new(vb: VarBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            down: ConvRelu::new(vb.pp("down"), cin, cout, ConvSpec::k3().stride(2))?,
            a: ConvRelu::new(vb.pp("a"), cout, cout, ConvSpec::k3())?,
            b: conv(vb.pp("b"), cout, cout, ConvSpec::k3())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.down.forward(x)?;
        let r = self.b.forward(&self.a.forward(&d)?)?;
        Ok((d + r)?.relu()?)
    }
}

/// Trainable backbone of one modality.
#[derive(Clone, Debug)]
pub struct Backbone {
    input: Conv,
    stem: ConvRelu,
    stages: Vec<Stage>,
    in_channels: usize,
}

impl Backbone {
    pub fn new(
        vb: VarBuilder,
        in_channels: usize,
        schedule: &ChannelSchedule,
        with_l16: bool,
    ) -> Result<Self> {
        let w = schedule.0;
        let input = conv(vb.pp("input"), in_channels, w[0], ConvSpec::k1())?;
        let stem = ConvRelu::new(vb.pp("stem"), w[0], w[0], ConvSpec::k3())?;
        let n_stages = if with_l16 { 4 } else { 3 };
        let stages = (0..n_stages)
            .map(|i| Stage::new(vb.pp(format!("stage{}", 2usize << i)), w[i], w[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input,
            stem,
            stages,
            in_channels,
        })
    }

    /// Features at levels 1, 2, 4, 8 (and 16 when the backbone owns it).
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.stem.forward(&self.input.forward(image)?)?;
        let mut out = vec![x.clone()];
        for s in &self.stages {
            x = s.forward(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub schedule: ChannelSchedule,
    pub optical_channels: usize,
    pub sar_channels: usize,
    /// Take level 16 from the coarse encoder rather than the backbones.
    pub use_coarse: bool,
}

/// Both backbones plus the optional shared coarse encoder.
#[derive(Debug)]
pub struct Encoder {
    optical: Backbone,
    sar: Backbone,
    coarse: Option<Arc<dyn CoarseEncoder>>,
    config: EncoderConfig,
}

impl Encoder {
    pub fn new(
        vb: VarBuilder,
        config: EncoderConfig,
        coarse: Option<Arc<dyn CoarseEncoder>>,
    ) -> Result<Self> {
        if config.use_coarse {
            match &coarse {
                None => {
                    return Err(SomaError::Config(
                        "coarse encoder enabled but no encoder was supplied".into(),
                    ))
                }
                Some(c) if c.channels() != config.schedule.width(Level::L16) => {
                    return Err(SomaError::Config(format!(
                        "coarse encoder emits {} channels, schedule expects {}",
                        c.channels(),
                        config.schedule.width(Level::L16)
                    )))
                }
                _ => {}
            }
        }
        let with_l16 = !config.use_coarse;
        Ok(Self {
            optical: Backbone::new(
                vb.pp("optical"),
                config.optical_channels,
                &config.schedule,
                with_l16,
            )?,
            sar: Backbone::new(vb.pp("sar"), config.sar_channels, &config.schedule, with_l16)?,
            coarse: if config.use_coarse { coarse } else { None },
            config,
        })
    }

    pub fn coarse(&self) -> Option<&Arc<dyn CoarseEncoder>> {
        self.coarse.as_ref()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `(N, C_in, H, W)` image to its five-level pyramid.
    pub fn encode(&self, image: &Tensor, modality: Modality) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(SomaError::Shape(format!(
                "input size {h}x{w} is not divisible by 16"
            )));
        }
        let backbone = match modality {
            Modality::Optical => &self.optical,
            Modality::Sar => &self.sar,
        };
        if c != backbone.in_channels {
            return Err(SomaError::Shape(format!(
                "{} encoder expects {} input channels, got {c}",
                modality.name(),
                backbone.in_channels
            )));
        }
        let feats = backbone.forward(image)?;
        let mut levels: BTreeMap<Level, Tensor> =
            Level::ALL.iter().copied().zip(feats).collect();
        if let Some(coarse) = &self.coarse {
            let raw = coarse.encode(image)?;
            levels.insert(Level::L16, adapt_coarse_grid(&raw, (h / 16, w / 16))?);
        }
        let pyr = FeaturePyramid::new(levels, modality)?;
        pyr.validate(h, w, &self.config.schedule)?;
        Ok(pyr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(use_coarse: bool) -> EncoderConfig {
        EncoderConfig {
            schedule: ChannelSchedule([8, 8, 16, 16, 16]),
            optical_channels: 3,
            sar_channels: 1,
            use_coarse,
        }
    }

    #[test]
    fn missing_coarse_encoder_is_a_config_error() {
        let store = ParamStore::new(0);
        let r = Encoder::new(store.var_builder(DType::F32, &Device::Cpu), config(true), None);
        assert!(matches!(r, Err(SomaError::Config(_))));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        let store = ParamStore::new(0);
        let enc = Encoder::new(store.var_builder(DType::F32, &Device::Cpu), config(false), None)
            .unwrap();
        let img = Tensor::zeros((1, 1, 40, 48), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&img, Modality::Sar), Err(SomaError::Shape(_))));
    }

    #[test]
    fn backbone_owns_level_16_without_coarse_encoder() {
        let store = ParamStore::new(0);
        let enc = Encoder::new(store.var_builder(DType::F32, &Device::Cpu), config(false), None)
            .unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 3, 32, 64), &Device::Cpu).unwrap();
        let p = enc.encode(&img, Modality::Optical).unwrap();
        assert_eq!(p.level(Level::L16).dims(), &[2, 16, 2, 4]);
        assert!(store.vars().iter().any(|(n, _)| n.starts_with("optical.stage16")));
    }
}
