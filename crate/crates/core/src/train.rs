//! Training loop: encode, enhance, match, loss, optimizer step.
//!
//! A run directory receives `config.cfg` (every effective value),
//! `train_log.csv` (one row per optimizer step) and
//! `checkpoints/epoch_<k>.safetensors` after every epoch plus
//! `checkpoints/last.safetensors` when the run stops.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::data::{load_dataset, Batch, Dataset, Split};
use crate::error::{Result, SomaError};
use crate::losses::{total_loss, LossValues};
use crate::model::Soma;
use crate::optim::{warmup_lr, AdamW};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,warp,cons,cert,delta,uni,total";
pub const CONFIG_FILE: &str = "config.cfg";

/// Model plus optimizer; one call to [`Trainer::step`] per batch.
#[derive(Debug)]
pub struct Trainer {
    model: Soma,
    optimizer: AdamW,
    config: RunConfig,
}

impl Trainer {
    pub fn new(config: RunConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let model = Soma::new(config.model.clone(), config.seed, DType::F32, device)?;
        let optimizer = AdamW::new(model.store().vars(), config.optim.clone())?;
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn model(&self) -> &Soma {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.optimizer.steps()
    }

    /// Learning rate of the next step given the epoch length.
    pub fn next_lr(&self, steps_per_epoch: usize) -> f64 {
        let warmup = (self.config.optim.warmup_epochs * steps_per_epoch as f64).round() as usize;
        warmup_lr(self.config.optim.lr, self.steps(), warmup)
    }

    /// Loss of `batch` without updating anything.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossValues> {
        let result = self.model.forward(&batch.optical, &batch.sar, true)?;
        let mask = self.config.data.mask_padding.then_some(&batch.mask);
        total_loss(&result, &batch.gt, &self.config.loss, mask)?.values()
    }

    /// One optimizer step. A non-finite loss aborts before any update and
    /// names the first offending term.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<LossValues> {
        let result = self.model.forward(&batch.optical, &batch.sar, true)?;
        let mask = self.config.data.mask_padding.then_some(&batch.mask);
        let losses = total_loss(&result, &batch.gt, &self.config.loss, mask)?;
        let values = losses.values()?;
        if let Some(term) = values.first_non_finite() {
            return Err(SomaError::NonFiniteLoss {
                term,
                step: self.steps() + 1,
            });
        }
        let grads = losses.total.backward()?;
        self.optimizer.step(&grads, lr)?;
        Ok(values)
    }

    pub fn checkpoint(&self, epoch: usize, rng: RngState) -> Checkpoint {
        Checkpoint {
            params: self.model.store().tensors(),
            optimizer: self.optimizer.state(),
            epoch,
            step: self.steps(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            rng,
        }
    }

    /// Restores parameters and optimizer state; the configuration hashes
    /// must agree.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config_hash != self.config.hash() {
            return Err(SomaError::Config(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        self.model.store().load_tensors(&ckpt.params)?;
        self.optimizer.load_state(&ckpt.optimizer, ckpt.step)
    }
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub log: PathBuf,
    pub last_checkpoint: PathBuf,
    pub steps: usize,
    pub epochs: usize,
    /// Loss rows of this invocation, in step order.
    pub history: Vec<(usize, LossValues)>,
    /// Hash of the frozen coarse encoder before and after training.
    pub frozen_hash: Option<(String, String)>,
}

fn order_stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_DA7A)
}

fn append_log(path: &Path, step: usize, v: &LossValues) -> Result<()> {
    let new = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| SomaError::io(path, e))?;
    let mut line = String::new();
    if new {
        line.push_str(LOG_HEADER);
        line.push('\n');
    }
    line.push_str(&step.to_string());
    for x in v.as_array() {
        line.push_str(&format!(",{x}"));
    }
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| SomaError::io(path, e))
}

/// Reads `train_log.csv` back as `(step, values)` rows.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<(usize, LossValues)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| SomaError::load(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| SomaError::load(path, e))?;
        let n = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| SomaError::load(path, format!("bad value `{}`", &rec[i])))
        };
        out.push((
            n(0)? as usize,
            LossValues {
                warp: n(1)?,
                cons: n(2)?,
                cert: n(3)?,
                delta: n(4)?,
                uni: n(5)?,
                total: n(6)?,
            },
        ));
    }
    Ok(out)
}

fn open_train_split(config: &RunConfig) -> Result<(Dataset, Vec<usize>)> {
    let ds = load_dataset(&config.data.root, Split::Train, &config.data.perturbation)?;
    let n = match config.data.train_limit {
        0 => ds.len(),
        k => k.min(ds.len()),
    };
    if n == 0 {
        return Err(SomaError::Config(format!(
            "no training tiles under {}",
            config.data.root.join("train").display()
        )));
    }
    // fail fast on unreadable tiles and size mismatches
    for i in 0..n {
        let pair = ds.pair(i, 0, config.model.optical_channels)?;
        if pair.size() != (config.data.height, config.data.width) {
            return Err(SomaError::Config(format!(
                "tile `{}` is {:?}, the configuration expects {}x{}",
                pair.meta.tile_id,
                pair.size(),
                config.data.height,
                config.data.width
            )));
        }
    }
    Ok((ds, (0..n).collect()))
}

/// Runs (or resumes) training into `run_dir`.
pub fn train(config: &RunConfig, run_dir: impl AsRef<Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    let run_dir = run_dir.as_ref().to_path_buf();
    let device = Device::Cpu;
    config.validate()?;
    let (dataset, indices) = open_train_split(config)?;
    let mut trainer = Trainer::new(config.clone(), &device)?;

    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| SomaError::io(&ckpt_dir, e))?;
    config.save(run_dir.join(CONFIG_FILE))?;
    let log = run_dir.join(LOG_FILE);

    let mut stream = order_stream(config.seed);
    let mut epoch = 0;
    let mut skip = 0;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path, &device)?;
        trainer.restore(&ckpt)?;
        if ckpt.rng.seed != config.seed {
            return Err(SomaError::Config("checkpoint RNG seed differs from the configuration".into()));
        }
        stream.set_word_pos(ckpt.rng.word_pos);
        epoch = ckpt.epoch;
        skip = ckpt.rng.batches_done;
    } else if log.exists() {
        fs::remove_file(&log).map_err(|e| SomaError::io(&log, e))?;
    }

    let frozen_before = match trainer.model().encoder().coarse() {
        Some(c) => Some(c.parameter_hash()?),
        None => None,
    };
    let bs = config.optim.batch_size;
    let steps_per_epoch = indices.len().div_ceil(bs);
    let max_steps = match config.optim.max_steps {
        0 => usize::MAX,
        k => k,
    };
    let mut history = Vec::new();
    let mut last_rng = RngState {
        seed: config.seed,
        word_pos: stream.get_word_pos(),
        batches_done: 0,
    };
    let mut last_epoch = epoch;
    'epochs: while epoch < config.optim.epochs && trainer.steps() < max_steps {
        let epoch_start = stream.get_word_pos();
        let mut order = indices.clone();
        order.shuffle(&mut stream);
        for (b, chunk) in order.chunks(bs).enumerate() {
            if b < skip {
                continue;
            }
            let pairs = chunk
                .iter()
                .map(|&i| dataset.pair(i, epoch, config.model.optical_channels))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::collate(&pairs, DType::F32, &device)?;
            let lr = trainer.next_lr(steps_per_epoch);
            let values = trainer.step(&batch, lr)?;
            let step = trainer.steps();
            append_log(&log, step, &values)?;
            log::info!(
                "epoch {} step {step} lr {lr:.2e} total {:.4} warp {:.4}",
                epoch + 1,
                values.total,
                values.warp
            );
            history.push((step, values));
            if trainer.steps() >= max_steps && b + 1 < steps_per_epoch {
                last_rng = RngState {
                    seed: config.seed,
                    word_pos: epoch_start,
                    batches_done: b + 1,
                };
                last_epoch = epoch;
                break 'epochs;
            }
        }
        skip = 0;
        epoch += 1;
        last_rng = RngState {
            seed: config.seed,
            word_pos: stream.get_word_pos(),
            batches_done: 0,
        };
        last_epoch = epoch;
        trainer
            .checkpoint(epoch, last_rng)
            .save(ckpt_dir.join(format!("epoch_{epoch:04}.safetensors")))?;
    }
    let last_checkpoint = ckpt_dir.join("last.safetensors");
    trainer.checkpoint(last_epoch, last_rng).save(&last_checkpoint)?;

    let frozen_hash = match (frozen_before, trainer.model().encoder().coarse()) {
        (Some(before), Some(c)) => Some((before, c.parameter_hash()?)),
        _ => None,
    };
    Ok(TrainOutcome {
        run_dir,
        log,
        last_checkpoint,
        steps: trainer.steps(),
        epochs: last_epoch,
        history,
        frozen_hash,
    })
}
