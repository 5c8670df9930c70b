//! Run configuration in plain `key = value` text.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected, missing
//! keys keep their defaults, and [`RunConfig::serialize`] always writes every
//! key so a run directory records all effective values. Lists are
//! comma-separated; level weights are written `level:weight`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::PerturbationSpec;
use crate::encoder::ChannelSchedule;
use crate::error::{Result, SomaError};
use crate::geometry::Level;
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear warm-up length in epochs.
    pub warmup_epochs: f64,
    /// Stop after this many optimizer steps in total; 0 means no limit.
    pub max_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 4,
            warmup_epochs: 5.0,
            max_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    /// Training perturbations (evaluation splits use their manifests).
    pub perturbation: PerturbationSpec,
    /// Use only the first `train_limit` training tiles; 0 means all.
    pub train_limit: usize,
    /// Exclude out-of-frame ground-truth pixels from the losses.
    pub mask_padding: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/mini"),
            height: 128,
            width: 128,
            perturbation: PerturbationSpec::default(),
            train_limit: 0,
            mask_padding: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// Seeded, single-worker execution.
    pub deterministic: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "soma".into(),
            seed: 0,
            deterministic: true,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn levels_to_string(levels: &[Level]) -> String {
    list(&levels.iter().map(|l| l.factor()).collect::<Vec<_>>())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| SomaError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(SomaError::Config(format!("`{key}`: expected a boolean, got `{other}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s)).collect()
}

fn parse_array5(key: &str, v: &str) -> Result<[usize; 5]> {
    let items: Vec<usize> = parse_list(key, v)?;
    items
        .try_into()
        .map_err(|_| SomaError::Config(format!("`{key}` needs exactly 5 values")))
}

fn parse_levels(key: &str, v: &str) -> Result<Vec<Level>> {
    let mut levels = parse_list::<usize>(key, v)?
        .into_iter()
        .map(|f| Level::from_factor(f).map_err(|e| SomaError::Config(format!("`{key}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    levels.sort_by(|a, b| b.cmp(a));
    levels.dedup();
    Ok(levels)
}

impl RunConfig {
    /// Every key with its current value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let o = &self.optim;
        let l = &self.loss;
        vec![
            ("run.name", self.name.clone()),
            ("run.seed", self.seed.to_string()),
            ("run.deterministic", self.deterministic.to_string()),
            ("data.root", d.root.display().to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.max_translation_px", d.perturbation.max_translation_px.to_string()),
            ("data.scale_delta", d.perturbation.scale_delta.to_string()),
            ("data.max_rotation_deg", d.perturbation.max_rotation_deg.to_string()),
            ("data.perturbation_seed", d.perturbation.seed.to_string()),
            ("data.train_limit", d.train_limit.to_string()),
            ("data.mask_padding", d.mask_padding.to_string()),
            ("model.channels", list(&m.schedule.0)),
            ("model.optical_channels", m.optical_channels.to_string()),
            ("model.sar_channels", m.sar_channels.to_string()),
            ("dino.enabled", m.dino.to_string()),
            ("dino.seed", m.coarse_seed.to_string()),
            ("fge.enabled", m.fge.enabled.to_string()),
            ("fge.gate_threshold", m.fge.gate_threshold.to_string()),
            ("fge.norm_groups", m.fge.norm_groups.to_string()),
            ("fge.attention_reduction", m.fge.attention_reduction.to_string()),
            ("fge.smoothing_sigma", m.fge.smoothing_sigma.to_string()),
            ("glam.enabled", m.glam.enabled.to_string()),
            ("glam.affine_levels", levels_to_string(&m.glam.affine_levels)),
            ("glam.flow_levels", levels_to_string(&m.glam.flow_levels)),
            ("glam.decoder_channels", list(&m.glam.decoder_channels)),
            ("glam.affine_hidden", m.glam.affine_hidden.to_string()),
            ("loss.lambda_cons", l.consistency.to_string()),
            ("loss.alpha_cert", l.certainty.to_string()),
            ("loss.alpha_delta", l.delta.to_string()),
            ("loss.alpha_uni", l.uniformity.to_string()),
            (
                "loss.level_weights",
                l.level_weights
                    .iter()
                    .rev()
                    .map(|(lv, w)| format!("{}:{}", lv.factor(), w))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("optim.lr", o.lr.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.epochs", o.epochs.to_string()),
            ("optim.batch_size", o.batch_size.to_string()),
            ("optim.warmup_epochs", o.warmup_epochs.to_string()),
            ("optim.max_steps", o.max_steps.to_string()),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the serialized form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.serialize().as_bytes()))
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.data;
        let m = &mut self.model;
        let o = &mut self.optim;
        let l = &mut self.loss;
        match key {
            "run.name" => self.name = v.to_string(),
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.deterministic" => self.deterministic = parse_bool(key, v)?,
            "data.root" => d.root = PathBuf::from(v),
            "data.height" => d.height = parse_num(key, v)?,
            "data.width" => d.width = parse_num(key, v)?,
            "data.max_translation_px" => d.perturbation.max_translation_px = parse_num(key, v)?,
            "data.scale_delta" => d.perturbation.scale_delta = parse_num(key, v)?,
            "data.max_rotation_deg" => d.perturbation.max_rotation_deg = parse_num(key, v)?,
            "data.perturbation_seed" => d.perturbation.seed = parse_num(key, v)?,
            "data.train_limit" => d.train_limit = parse_num(key, v)?,
            "data.mask_padding" => d.mask_padding = parse_bool(key, v)?,
            "model.channels" => m.schedule = ChannelSchedule(parse_array5(key, v)?),
            "model.optical_channels" => m.optical_channels = parse_num(key, v)?,
            "model.sar_channels" => m.sar_channels = parse_num(key, v)?,
            "dino.enabled" => m.dino = parse_bool(key, v)?,
            "dino.seed" => m.coarse_seed = parse_num(key, v)?,
            "fge.enabled" => m.fge.enabled = parse_bool(key, v)?,
            "fge.gate_threshold" => m.fge.gate_threshold = parse_num(key, v)?,
            "fge.norm_groups" => m.fge.norm_groups = parse_num(key, v)?,
            "fge.attention_reduction" => m.fge.attention_reduction = parse_num(key, v)?,
            "fge.smoothing_sigma" => m.fge.smoothing_sigma = parse_num(key, v)?,
            "glam.enabled" => m.glam.enabled = parse_bool(key, v)?,
            "glam.affine_levels" => m.glam.affine_levels = parse_levels(key, v)?,
            "glam.flow_levels" => m.glam.flow_levels = parse_levels(key, v)?,
            "glam.decoder_channels" => m.glam.decoder_channels = parse_array5(key, v)?,
            "glam.affine_hidden" => m.glam.affine_hidden = parse_num(key, v)?,
            "loss.lambda_cons" => l.consistency = parse_num(key, v)?,
            "loss.alpha_cert" => l.certainty = parse_num(key, v)?,
            "loss.alpha_delta" => l.delta = parse_num(key, v)?,
            "loss.alpha_uni" => l.uniformity = parse_num(key, v)?,
            "loss.level_weights" => {
                let mut w = BTreeMap::new();
                for item in v.split(',').filter(|s| !s.trim().is_empty()) {
                    let (lv, wt) = item.split_once(':').ok_or_else(|| {
                        SomaError::Config(format!("`{key}`: expected level:weight, got `{item}`"))
                    })?;
                    let level = Level::from_factor(parse_num(key, lv)?)
                        .map_err(|e| SomaError::Config(format!("`{key}`: {e}")))?;
                    w.insert(level, parse_num(key, wt)?);
                }
                l.level_weights = w;
            }
            "optim.lr" => o.lr = parse_num(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse_num(key, v)?,
            "optim.beta1" => o.beta1 = parse_num(key, v)?,
            "optim.beta2" => o.beta2 = parse_num(key, v)?,
            "optim.eps" => o.eps = parse_num(key, v)?,
            "optim.epochs" => o.epochs = parse_num(key, v)?,
            "optim.batch_size" => o.batch_size = parse_num(key, v)?,
            "optim.warmup_epochs" => o.warmup_epochs = parse_num(key, v)?,
            "optim.max_steps" => o.max_steps = parse_num(key, v)?,
            other => return Err(SomaError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SomaError::Config(format!("line {}: expected `key = value`", no + 1))
            })?;
            c.set(k.trim(), v)
                .map_err(|e| SomaError::Config(format!("line {}: {e}", no + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SomaError::io(path, e))?;
        Self::parse(&text).map_err(|e| SomaError::load(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.serialize()).map_err(|e| SomaError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SomaError::Config(m));
        if self.data.height % 16 != 0 || self.data.width % 16 != 0 || self.data.height == 0 {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 16",
                self.data.height, self.data.width
            ));
        }
        if self.model.schedule.0.contains(&0) || self.model.glam.decoder_channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.optim.batch_size == 0 {
            return bad("optim.batch_size must be positive".into());
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("optimizer settings out of range".into());
        }
        if self.optim.warmup_epochs < 0.0 || self.optim.weight_decay < 0.0 {
            return bad("warm-up and weight decay must be non-negative".into());
        }
        self.data.perturbation.validate()?;
        self.loss.validate()?;
        self.model.glam.validate()?;
        Ok(())
    }
}

/// Named presets shipped under `configs/`.
pub fn preset(name: &str) -> Result<RunConfig> {
    let text = match name {
        "reference" => include_str!("../../../configs/reference.cfg"),
        "desk" => include_str!("../../../configs/desk.cfg"),
        other => return Err(SomaError::Config(format!("unknown preset `{other}`"))),
    };
    RunConfig::parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_of_defaults() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("fge.enabld = true").is_err());
        assert!(RunConfig::parse("optim.lr 3").is_err());
    }
}
