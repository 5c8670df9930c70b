//! Inference entry points: split evaluation and single-pair registration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, read_raster, write_raster, Batch, PerturbationSpec, Split};
use crate::error::{Result, SomaError};
use crate::eval::{evaluate_pair, write_report, EvalRecord, ReportFiles, THRESHOLDS};
use crate::geometry::{warp, write_field, DisplacementField, Level, Padding};
use crate::model::Soma;

/// Rebuilds the network stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint, device: &Device) -> Result<Soma> {
    let model = Soma::new(ckpt.config.model.clone(), ckpt.config.seed, DType::F32, device)?;
    model.store().load_tensors(&ckpt.params)?;
    Ok(model)
}

/// Records of every pair of `split` under its fixed manifest.
pub fn evaluate_model(
    model: &Soma,
    data_root: &Path,
    split: Split,
    batch_size: usize,
    mask_padding: bool,
) -> Result<Vec<EvalRecord>> {
    let ds = load_dataset(data_root, split, &PerturbationSpec::none())?;
    if ds.is_empty() {
        return Err(SomaError::Config(format!(
            "no {split} tiles under {}",
            data_root.join(split.name()).display()
        )));
    }
    let channels = model.config().optical_channels;
    let mut records = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let pairs = chunk
            .iter()
            .map(|&i| ds.pair(i, 0, channels))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::collate(&pairs, DType::F32, model.device())?;
        let result = model.forward(&batch.optical, &batch.sar, false)?;
        for (k, id) in batch.ids.iter().enumerate() {
            let pred = result.final_field.sample(k)?;
            let gt = batch.gt.sample(k)?;
            let mask = batch.mask.narrow(0, k, 1)?;
            records.push(evaluate_pair(id, &pred, &gt, mask_padding.then_some(&mask))?);
        }
    }
    Ok(records)
}

/// One evaluated checkpoint.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: String,
    pub records: Vec<EvalRecord>,
}

/// Evaluates each checkpoint on `split` and writes `metrics.csv` plus one
/// `errors_<method>.csv` per checkpoint into `out_dir`. The method label is
/// the component configuration of the checkpoint; `data_root` overrides
/// the dataset root stored in the checkpoints.
pub fn evaluate(
    checkpoints: &[PathBuf],
    split: Split,
    data_root: Option<&Path>,
    out_dir: &Path,
) -> Result<(Vec<MethodRun>, ReportFiles)> {
    if checkpoints.is_empty() {
        return Err(SomaError::Config("no checkpoint to evaluate".into()));
    }
    let device = Device::Cpu;
    let mut runs: Vec<MethodRun> = Vec::new();
    for path in checkpoints {
        let ckpt = Checkpoint::load(path, &device)?;
        let model = load_model(&ckpt, &device)?;
        let mut method = model.ablation().name().to_string();
        if runs.iter().any(|r| r.method == method) {
            method = format!("{method}_{}", ckpt.config.name);
        }
        if runs.iter().any(|r| r.method == method) {
            return Err(SomaError::Config(format!("two checkpoints share the label `{method}`")));
        }
        let root = data_root.map_or_else(|| ckpt.config.data.root.clone(), Path::to_path_buf);
        let records = evaluate_model(
            &model,
            &root,
            split,
            ckpt.config.optim.batch_size,
            ckpt.config.data.mask_padding,
        )?;
        runs.push(MethodRun { method, records });
    }
    let methods: Vec<(String, Vec<EvalRecord>)> =
        runs.iter().map(|r| (r.method.clone(), r.records.clone())).collect();
    let files = write_report(out_dir, &methods, &THRESHOLDS)?;
    Ok((runs, files))
}

/// Zero-pads `(C, H, W)` at the bottom and right to multiples of 16.
fn pad_to_16(image: &Tensor) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    let ph = h.div_ceil(16) * 16 - h;
    let pw = w.div_ceil(16) * 16 - w;
    Ok(image.pad_with_zeros(1, 0, ph)?.pad_with_zeros(2, 0, pw)?)
}

/// Inverts a displacement field by fixed-point iteration of
/// `inv(y) = -field(y + inv(y))`.
pub fn invert_field(field: &DisplacementField, iterations: usize) -> Result<DisplacementField> {
    let neg = field.tensor().neg()?;
    let mut inv = DisplacementField::new(neg.clone(), field.level())?;
    for _ in 0..iterations {
        let sampled = warp(field.tensor(), &inv, Padding::Border)?;
        inv = DisplacementField::new(sampled.neg()?, field.level())?;
    }
    Ok(inv)
}

/// Files written by [`register`].
#[derive(Clone, Debug)]
pub struct Registration {
    /// Optical image resampled into the SAR frame (8-bit PNG).
    pub warped_png: PathBuf,
    /// The same raster at full precision, tensor `warped`.
    pub warped_raw: PathBuf,
    /// Field applied to the optical image to produce the warped raster.
    pub field: PathBuf,
    /// Network output: for each optical pixel, the offset of its SAR match.
    pub match_field: PathBuf,
    pub height: usize,
    pub width: usize,
}

pub const WARPED_PNG: &str = "warped_optical.png";
pub const WARPED_RAW: &str = "warped_optical.safetensors";
pub const FIELD_FILE: &str = "field.somafld";
pub const MATCH_FIELD_FILE: &str = "match_field.somafld";
const INVERSION_STEPS: usize = 30;

/// Registers an optical image onto a SAR image. Inputs whose sides are not
/// multiples of 16 are zero-padded for the network and cropped back.
pub fn register(ckpt_path: &Path, optical: &Path, sar: &Path, out_dir: &Path) -> Result<Registration> {
    let device = Device::Cpu;
    let ckpt = Checkpoint::load(ckpt_path, &device)?;
    let model = load_model(&ckpt, &device)?;
    let opt = read_raster(optical, model.config().optical_channels)?;
    let sar_img = read_raster(sar, model.config().sar_channels)?;
    let (_, h, w) = opt.dims3()?;
    if sar_img.dims()[1..] != [h, w] {
        return Err(SomaError::Shape(format!(
            "optical is {h}x{w} but SAR is {}x{}",
            sar_img.dims()[1],
            sar_img.dims()[2]
        )));
    }
    let result = model.forward(
        &pad_to_16(&opt)?.unsqueeze(0)?,
        &pad_to_16(&sar_img)?.unsqueeze(0)?,
        false,
    )?;
    let forward = result.final_field.tensor().narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?;
    let forward = DisplacementField::new(forward, Level::L1)?;
    let field = invert_field(&forward, INVERSION_STEPS)?;
    let warped = warp(&opt.unsqueeze(0)?, &field, Padding::Zeros)?.squeeze(0)?;

    let files = Registration {
        warped_png: out_dir.join(WARPED_PNG),
        warped_raw: out_dir.join(WARPED_RAW),
        field: out_dir.join(FIELD_FILE),
        match_field: out_dir.join(MATCH_FIELD_FILE),
        height: h,
        width: w,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| SomaError::io(out_dir, e))?;
    write_raster(&files.warped_png, &warped, false)?;
    candle_core::safetensors::save(&HashMap::from([("warped".to_string(), warped)]), &files.warped_raw)?;
    write_field(&files.field, &field)?;
    write_field(&files.match_field, &forward)?;
    Ok(files)
}

/// Reads the full-precision warped raster written by [`register`].
pub fn read_warped(path: &Path) -> Result<Tensor> {
    let mut map = candle_core::safetensors::load(path, &Device::Cpu)?;
    map.remove("warped")
        .ok_or_else(|| SomaError::load(path, "no `warped` tensor"))
}
