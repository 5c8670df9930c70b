//! The full registration network: two backbones (plus the optional frozen
//! coarse encoder), the gradient enhancer and the matcher.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::encoder::{ChannelSchedule, CoarseEncoder, Encoder, EncoderConfig, Modality, RandomCoarseEncoder};
use crate::error::{Result, SomaError};
use crate::fge::{Fge, FgeConfig};
use crate::glam::{Glam, GlamConfig, MatchResult};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub schedule: ChannelSchedule,
    pub optical_channels: usize,
    pub sar_channels: usize,
    /// Take level 16 from the frozen coarse encoder.
    pub dino: bool,
    /// Seed of the stand-in coarse encoder's weights.
    pub coarse_seed: u64,
    pub fge: FgeConfig,
    pub glam: GlamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            schedule: ChannelSchedule::DESK,
            optical_channels: 3,
            sar_channels: 1,
            dino: true,
            coarse_seed: 7,
            fge: FgeConfig::default(),
            glam: GlamConfig::default(),
        }
    }
}

/// The component-analysis configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    Baseline,
    Dino,
    Fge,
    Glam,
    DinoFge,
    DinoGlam,
    FgeGlam,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Baseline,
        Ablation::Dino,
        Ablation::Fge,
        Ablation::Glam,
        Ablation::DinoFge,
        Ablation::DinoGlam,
        Ablation::FgeGlam,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Dino => "dino",
            Ablation::Fge => "fge",
            Ablation::Glam => "glam",
            Ablation::DinoFge => "dino_fge",
            Ablation::DinoGlam => "dino_glam",
            Ablation::FgeGlam => "fge_glam",
            Ablation::Full => "full",
        }
    }

    /// `(dino, fge, glam)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::Baseline => (false, false, false),
            Ablation::Dino => (true, false, false),
            Ablation::Fge => (false, true, false),
            Ablation::Glam => (false, false, true),
            Ablation::DinoFge => (true, true, false),
            Ablation::DinoGlam => (true, false, true),
            Ablation::FgeGlam => (false, true, true),
            Ablation::Full => (true, true, true),
        }
    }

    /// Sets the three component flags on `config`.
    pub fn apply(self, config: &mut ModelConfig) {
        let (dino, fge, glam) = self.flags();
        config.dino = dino;
        config.fge.enabled = fge;
        config.glam.enabled = glam;
    }

    pub fn of(config: &ModelConfig) -> Ablation {
        let flags = (config.dino, config.fge.enabled, config.glam.enabled);
        *Ablation::ALL
            .iter()
            .find(|a| a.flags() == flags)
            .expect("every flag combination is a configuration")
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = SomaError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| SomaError::Invalid(format!("unknown ablation `{s}`")))
    }
}

/// Network instance with its parameter store.
#[derive(Debug)]
pub struct Soma {
    store: ParamStore,
    encoder: Encoder,
    fge: Fge,
    glam: Glam,
    config: ModelConfig,
    dtype: DType,
    device: Device,
}

impl Soma {
    /// Builds the network; all trainable parameters are drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let coarse: Option<Arc<dyn CoarseEncoder>> = if config.dino {
            Some(Arc::new(RandomCoarseEncoder::new(
                config.schedule.width(crate::geometry::Level::L16),
                config.coarse_seed,
                dtype,
                device,
            )?))
        } else {
            None
        };
        Self::with_coarse(config, seed, dtype, device, coarse)
    }

    /// Builds the network around a caller-supplied coarse encoder.
    pub fn with_coarse(
        config: ModelConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
        coarse: Option<Arc<dyn CoarseEncoder>>,
    ) -> Result<Self> {
        let store = ParamStore::new(seed);
        let vb = store.var_builder(dtype, device);
        let encoder = Encoder::new(
            vb.pp("encoder"),
            EncoderConfig {
                schedule: config.schedule,
                optical_channels: config.optical_channels,
                sar_channels: config.sar_channels,
                use_coarse: config.dino,
            },
            coarse,
        )?;
        let fge = Fge::new(vb.pp("fge"), &store, &config.schedule, &config.fge)?;
        let glam = Glam::new(vb.pp("glam"), &config.schedule, config.glam.clone(), config.dino)?;
        Ok(Self {
            store,
            encoder,
            fge,
            glam,
            config,
            dtype,
            device: device.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn fge(&self) -> &Fge {
        &self.fge
    }

    pub fn glam(&self) -> &Glam {
        &self.glam
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn ablation(&self) -> Ablation {
        Ablation::of(&self.config)
    }

    /// Trainable parameter count (the frozen coarse encoder is excluded).
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// `"<trainable>+<frozen>"` parameter counts, distinct across the
    /// component configurations.
    pub fn signature(&self) -> String {
        let frozen = self.encoder.coarse().map_or(0, |c| c.parameter_count());
        format!("{}+{}", self.parameter_count(), frozen)
    }

    /// `(N, C_o, H, W)` optical and `(N, 1, H, W)` SAR batches to the match.
    pub fn forward(&self, optical: &Tensor, sar: &Tensor, with_certainty: bool) -> Result<MatchResult> {
        let optical = optical.to_dtype(self.dtype)?;
        let sar = sar.to_dtype(self.dtype)?;
        let po = self.fge.enhance_pyramid(&self.encoder.encode(&optical, Modality::Optical)?)?;
        let ps = self.fge.enhance_pyramid(&self.encoder.encode(&sar, Modality::Sar)?)?;
        self.glam.match_pyramids(&po, &ps, with_certainty)
    }
}
