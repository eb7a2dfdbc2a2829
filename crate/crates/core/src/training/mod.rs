//! Optimization loop with checkpoint series and bitwise resumption.
//!
//! Batch order is a pure function of `(seed, epoch)` and crop offsets of
//! `(seed, epoch, utterance id)`, so a checkpoint only needs the parameters,
//! the optimizer moments and a position `(epoch, batch)` to resume.

mod data;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{crop, crop_offset, epoch_batches, load_utterances, split_indices, Batch, Utterance};
pub use optim::{clip_grad_norm, collect_grads, global_norm, learning_rate, AdamW, AdamWConfig, Schedule};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossTerms, TensorLoss, TensorLossTerms};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, IfCorrNet, InitOptions, ModelConfig, ModelInputs};
use crate::signal::{read_wav, stft, write_wav, Spectrogram, Waveform, WavFormat, SAMPLE_RATE};
use crate::synth::Manifest;
use crate::tensor_stft::TensorStft;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub max_epochs: u64,
    /// Stops after this many optimizer steps in total, mid-epoch if needed.
    pub max_steps: Option<u64>,
    pub segment_seconds: f64,
    pub batch_size: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub val_fraction: f64,
    /// Sequential batch preparation. Parallel preparation produces the same
    /// values but is not covered by the reproducibility guarantee.
    pub deterministic: bool,
    pub precision: Precision,
    /// Keep a numbered checkpoint every this many epochs (the best and the
    /// final checkpoints are always kept).
    pub save_every_epochs: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            betas: [0.9, 0.98],
            adam_eps: 1e-8,
            schedule: Schedule::Constant,
            warmup_steps: 1000,
            max_epochs: 40,
            max_steps: None,
            segment_seconds: 4.0,
            batch_size: 2,
            grad_clip: Some(5.0),
            seed: 0,
            val_fraction: 0.1,
            deterministic: true,
            precision: Precision::F32,
            save_every_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self, loss: &LossConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.segment_samples() < loss.max_fft() {
            return bad(format!(
                "segment of {} samples is shorter than the largest loss FFT {}",
                self.segment_samples(),
                loss.max_fft()
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr and adam_eps must be positive, weight_decay non-negative".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} must lie in [0, 1)", self.val_fraction));
        }
        if self.save_every_epochs == 0 {
            return bad("save_every_epochs must be >= 1".into());
        }
        if self.schedule == Schedule::WarmupCosine && self.max_steps.map_or(true, |m| m <= self.warmup_steps) {
            return bad("the warmup-cosine schedule needs max_steps greater than warmup_steps".into());
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    pub epoch_loss_sum: f64,
    pub epoch_loss_count: u64,
    pub best_loss: Option<f64>,
    pub best_step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_time: f64,
    pub loss_tf: f64,
    pub loss_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedTrainState {
    state: TrainState,
    optimizer_steps: u64,
    train_config: TrainConfig,
    loss_config: LossConfig,
}

pub struct Trainer {
    model: IfCorrNet,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    opt: AdamW,
    loss: TensorLoss,
    synth: TensorStft,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: IfCorrNet, cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<Self> {
        cfg.validate(loss_cfg)?;
        let dtype = model.dtype();
        let opt = AdamW::new(cfg.adamw(), model.params())?;
        let loss = TensorLoss::new(loss_cfg, dtype, &Device::Cpu)?;
        let synth = TensorStft::new(model.config().stft, dtype, &Device::Cpu)?;
        Ok(Self {
            model,
            cfg: cfg.clone(),
            loss_cfg: loss_cfg.clone(),
            opt,
            loss,
            synth,
            state: TrainState::default(),
        })
    }

    /// Fresh model initialized from `cfg.seed` at `cfg.precision`.
    pub fn from_config(model_cfg: &ModelConfig, cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<Self> {
        let model = IfCorrNet::new(
            model_cfg,
            InitOptions {
                seed: cfg.seed,
                dtype: cfg.precision.dtype(),
                zero_head: true,
            },
        )?;
        Self::new(model, cfg, loss_cfg)
    }

    /// Restores model, optimizer and position from a training checkpoint.
    /// `cfg` may differ from the stored one (for example a larger
    /// `max_steps`).
    pub fn resume(path: &Path, cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let saved: SavedTrainState = ckpt
            .meta
            .train_state
            .clone()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Data(format!("{}: no training state", path.display())))?;
        let model = IfCorrNet::from_checkpoint_as(&ckpt, cfg.precision.dtype())?;
        let mut t = Self::new(model, cfg, loss_cfg)?;
        t.opt.restore(saved.optimizer_steps, &ckpt.tensors, cfg.precision.dtype())?;
        t.state = saved.state;
        Ok(t)
    }

    pub fn model(&self) -> &IfCorrNet {
        &self.model
    }

    pub fn into_model(self) -> IfCorrNet {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = CheckpointMeta::for_model(self.model.config());
        meta.train_state = Some(serde_json::to_value(SavedTrainState {
            state: self.state.clone(),
            optimizer_steps: self.opt.steps(),
            train_config: self.cfg.clone(),
            loss_config: self.loss_cfg.clone(),
        })?);
        let mut tensors = self.model.parameter_tensors();
        tensors.extend(self.opt.state_tensors());
        save_checkpoint(path, &meta, &tensors)
    }

    fn spectrograms(&self, waves: &[Vec<f64>]) -> Result<Vec<Spectrogram>> {
        let cfg = self.model.config().stft;
        if self.cfg.deterministic {
            waves.iter().map(|w| stft(w, cfg)).collect()
        } else {
            waves.par_iter().map(|w| stft(w, cfg)).collect()
        }
    }

    /// Differentiable loss of the model on a batch.
    pub fn batch_loss(&self, batch: &Batch) -> Result<TensorLossTerms> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let len = batch.mixture[0].len();
        if batch.mixture.iter().chain(&batch.target).any(|x| x.len() != len) {
            return Err(Error::Shape("batch items differ in length".into()));
        }
        let specs = self.spectrograms(&batch.mixture)?;
        let refs: Vec<&Spectrogram> = specs.iter().collect();
        let dtype = self.model.dtype();
        let inputs = ModelInputs::from_spectrograms(&refs, self.model.config(), dtype)?;
        let out = self.model.forward(&inputs)?;
        let est = self.synth.inverse(&out.y_re, &out.y_im, len)?;
        let target = Tensor::from_vec(batch.target.concat(), (batch.len(), len), &Device::Cpu)?.to_dtype(dtype)?;
        self.loss.compute(&est, &target)
    }

    pub fn eval_loss(&self, batch: &Batch) -> Result<LossTerms> {
        self.batch_loss(batch)?.values()
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(self.cfg.lr, self.cfg.schedule, self.cfg.warmup_steps, self.cfg.max_steps, self.state.step)
    }

    /// Forward, backward, clip, update. Returns the pre-update loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let terms = self.batch_loss(batch)?;
        let values = terms.values()?;
        if !values.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}; batch ids: {}",
                self.state.step + 1,
                batch.ids.join(", ")
            )));
        }
        let grads = terms.total.backward()?;
        let mut grads = collect_grads(self.model.params(), &grads);
        let norm = match self.cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c)?,
            None => global_norm(&grads)?,
        };
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at step {}; batch ids: {}",
                self.state.step + 1,
                batch.ids.join(", ")
            )));
        }
        let lr = self.current_lr();
        self.opt.step(self.model.params(), &grads, lr)?;
        self.state.step += 1;
        Ok(StepRecord {
            step: self.state.step,
            loss_time: values.time,
            loss_tf: values.tf,
            loss_total: values.total,
            lr,
        })
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_log.jsonl";
pub const NAN_DUMP: &str = "nan_batch.json";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best: PathBuf,
    pub last: PathBuf,
    pub records: Vec<StepRecord>,
}

fn step_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.safetensors"))
}

/// Points `link` at `target` (a file in the same directory): a relative
/// symlink where supported, otherwise a copy.
fn link_entry(dir: &Path, name: &str, target: &Path) -> Result<PathBuf> {
    let link = dir.join(name);
    if link.symlink_metadata().is_ok() {
        std::fs::remove_file(&link)?;
    }
    #[cfg(unix)]
    {
        if let Some(file) = target.file_name() {
            if std::os::unix::fs::symlink(file, &link).is_ok() {
                return Ok(link);
            }
        }
    }
    std::fs::copy(target, &link)?;
    Ok(link)
}

fn mean_loss(trainer: &Trainer, utts: &[Utterance], segment: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in utts.chunks(trainer.cfg.batch_size) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let batch = Batch::from_utterances(&refs, segment, trainer.cfg.seed, None);
        sum += trainer.eval_loss(&batch)?.total * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(sum / n as f64)
}

/// Trains on `manifest`, writing `checkpoints/`, `train_log.jsonl` and
/// `val_log.jsonl` under `out_dir`. With `resume`, continues from a
/// checkpoint written by an earlier run and appends to the logs.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    manifest: &Manifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::Data("training manifest is empty".into()));
    }
    cfg.validate(loss_cfg)?;
    let (train_idx, val_idx) = split_indices(manifest.len(), cfg.val_fraction);
    let train_utts = load_utterances(manifest, &train_idx)?;
    let val_utts = load_utterances(manifest, &val_idx)?;
    let segment = cfg.segment_samples();

    let mut trainer = match resume {
        Some(p) => Trainer::resume(p, cfg, loss_cfg)?,
        None => Trainer::from_config(model_cfg, cfg, loss_cfg)?,
    };
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir)?;
    let open_log = |name: &str| -> Result<std::fs::File> {
        let mut o = std::fs::OpenOptions::new();
        o.create(true);
        if resume.is_some() {
            o.append(true);
        } else {
            o.write(true).truncate(true);
        }
        Ok(o.open(out_dir.join(name))?)
    };
    let mut log = std::io::BufWriter::new(open_log(TRAIN_LOG)?);
    let mut val_log = std::io::BufWriter::new(open_log(VAL_LOG)?);

    let mut records = Vec::new();
    let mut best = ckpt_dir.join("best.safetensors");
    let mut last_saved: Option<(u64, PathBuf)> = None;
    if resume.is_none() {
        let p = step_path(&ckpt_dir, 0);
        trainer.save(&p)?;
        best = link_entry(&ckpt_dir, "best.safetensors", &p)?;
        last_saved = Some((0, p));
    }

    let steps_left = |t: &Trainer| cfg.max_steps.map_or(true, |m| t.state.step < m);
    'epochs: while trainer.state.epoch < cfg.max_epochs {
        let epoch = trainer.state.epoch;
        let batches = epoch_batches(&(0..train_utts.len()).collect::<Vec<_>>(), cfg.batch_size, cfg.seed, epoch);
        while trainer.state.batch_in_epoch < batches.len() {
            if !steps_left(&trainer) {
                break 'epochs;
            }
            let idx = &batches[trainer.state.batch_in_epoch];
            let refs: Vec<&Utterance> = idx.iter().map(|&i| &train_utts[i]).collect();
            let batch = Batch::from_utterances(&refs, segment, cfg.seed, Some(epoch));
            let rec = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e @ Error::Numerical(_)) => {
                    let dump = serde_json::json!({ "step": trainer.state.step + 1, "epoch": epoch, "batch_ids": batch.ids });
                    std::fs::write(out_dir.join(NAN_DUMP), serde_json::to_string_pretty(&dump)?)?;
                    log.flush()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            log::debug!("step {} loss {:.5}", rec.step, rec.loss_total);
            records.push(rec);
            trainer.state.batch_in_epoch += 1;
            trainer.state.epoch_loss_sum += rec.loss_total;
            trainer.state.epoch_loss_count += 1;
        }

        let metric = if val_utts.is_empty() {
            trainer.state.epoch_loss_sum / trainer.state.epoch_loss_count.max(1) as f64
        } else {
            mean_loss(&trainer, &val_utts, segment)?
        };
        serde_json::to_writer(
            &mut val_log,
            &serde_json::json!({ "epoch": epoch, "step": trainer.state.step, "loss": metric, "held_out": !val_utts.is_empty() }),
        )?;
        val_log.write_all(b"\n")?;
        log::info!("epoch {epoch} step {} selection loss {metric:.5}", trainer.state.step);
        trainer.state.epoch += 1;
        trainer.state.batch_in_epoch = 0;
        trainer.state.epoch_loss_sum = 0.0;
        trainer.state.epoch_loss_count = 0;
        let improved = trainer.state.best_loss.map_or(true, |b| metric < b);
        if improved {
            trainer.state.best_loss = Some(metric);
            trainer.state.best_step = Some(trainer.state.step);
        }
        let keep = trainer.state.epoch % cfg.save_every_epochs == 0 || trainer.state.epoch == cfg.max_epochs;
        if improved || keep {
            let p = step_path(&ckpt_dir, trainer.state.step);
            trainer.save(&p)?;
            if improved {
                best = link_entry(&ckpt_dir, "best.safetensors", &p)?;
            }
            last_saved = Some((trainer.state.step, p));
        }
    }
    log.flush()?;
    val_log.flush()?;

    let final_path = match last_saved {
        Some((s, p)) if s == trainer.state.step && p.exists() => {
            // the position may have advanced (epoch bookkeeping) since that save
            trainer.save(&p)?;
            p
        }
        _ => {
            let p = step_path(&ckpt_dir, trainer.state.step);
            trainer.save(&p)?;
            p
        }
    };
    if !best.exists() {
        best = link_entry(&ckpt_dir, "best.safetensors", &final_path)?;
    }
    let last = link_entry(&ckpt_dir, "last.safetensors", &final_path)?;
    Ok(TrainOutcome {
        state: trainer.state,
        best,
        last,
        records,
    })
}

/// Full-utterance enhancement of a WAV file; the output has the input's
/// length.
pub fn infer(checkpoint: &Path, wav_in: &Path, wav_out: &Path, format: WavFormat) -> Result<Waveform> {
    let model = IfCorrNet::load(checkpoint)?;
    let x = read_wav(wav_in)?;
    x.require_pipeline_rate()?;
    let y = Waveform::new(model.enhance_waveform(x.samples())?, SAMPLE_RATE)?;
    write_wav(wav_out, &y, format)?;
    Ok(y)
}
