use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::config::KeyValues;
use crate::metrics::{mssim, SsimParams};
use crate::model::{CameraMode, MaeModel, RunConfig};
use crate::nn::Parameters;
use crate::patching::{sample_mask, MaskPlan};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

use super::checkpoint::{load_checkpoint, load_optimizer, save_checkpoint, save_optimizer};
use super::data::{DataConfig, Sample, Split};
use super::optim::{AdamW, AdamWConfig};
use super::report::{EpochRecord, TrainReport};
use super::schedule::{cosine_lr, warmup_factor};

/// Seed-hash tag of evaluation masks; epochs never reach it.
const EVAL_TAG: u64 = u64::MAX;
/// Seed-hash tag of the per-epoch sample order.
const SHUFFLE_TAG: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Length of the cosine schedule; defaults to `epochs`.
    pub schedule_epochs: Option<usize>,
    pub lr0: f64,
    pub lr_min: f64,
    /// Epochs of linear warmup applied on top of the cosine rate.
    pub warmup_epochs: f64,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    /// Checkpoint after every this many epochs (and after the last).
    pub checkpoint_every: usize,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 57,
            schedule_epochs: None,
            lr0: 1e-4,
            lr_min: 0.0,
            warmup_epochs: 0.0,
            optim: AdamWConfig::default(),
            batch_size: 8,
            checkpoint_every: 5,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_schedule(&self) -> usize {
        self.schedule_epochs.unwrap_or(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size and checkpoint_every must be positive".into(),
            ));
        }
        if self.data.n_train == 0 {
            return Err(Error::Config("the training split is empty".into()));
        }
        if self.total_schedule() < self.epochs {
            return Err(Error::Config(
                "schedule_epochs is shorter than epochs".into(),
            ));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return Err(Error::Config(
                "warmup_epochs must be finite and non-negative".into(),
            ));
        }
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let o = &self.optim;
        let mut s = format!(
            "train.epochs = {}\ntrain.lr = {}\ntrain.lr_min = {}\ntrain.warmup_epochs = {}\ntrain.beta1 = {}\ntrain.beta2 = {}\n\
             train.eps = {}\ntrain.weight_decay = {}\ntrain.batch_size = {}\ntrain.checkpoint_every = {}\n",
            self.epochs,
            self.lr0,
            self.lr_min,
            self.warmup_epochs,
            o.beta1,
            o.beta2,
            o.eps,
            o.weight_decay,
            self.batch_size,
            self.checkpoint_every
        );
        if let Some(n) = self.schedule_epochs {
            s.push_str(&format!("train.schedule_epochs = {n}\n"));
        }
        s.push_str(&self.data.to_text());
        s
    }

    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            epochs: kv.take_or("train.epochs", d.epochs)?,
            schedule_epochs: kv.take("train.schedule_epochs")?,
            lr0: kv.take_or("train.lr", d.lr0)?,
            lr_min: kv.take_or("train.lr_min", d.lr_min)?,
            warmup_epochs: kv.take_or("train.warmup_epochs", d.warmup_epochs)?,
            optim: AdamWConfig {
                beta1: kv.take_or("train.beta1", d.optim.beta1)?,
                beta2: kv.take_or("train.beta2", d.optim.beta2)?,
                eps: kv.take_or("train.eps", d.optim.eps)?,
                weight_decay: kv.take_or("train.weight_decay", d.optim.weight_decay)?,
            },
            batch_size: kv.take_or("train.batch_size", d.batch_size)?,
            checkpoint_every: kv.take_or("train.checkpoint_every", d.checkpoint_every)?,
            data: DataConfig::from_key_values(kv)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a run file holding model, training and data keys.
pub fn load_run_config(text: &str) -> Result<(RunConfig, TrainConfig)> {
    let mut kv = KeyValues::parse(text)?;
    let run = RunConfig::from_key_values(&mut kv)?;
    let train = TrainConfig::from_key_values(&mut kv)?;
    kv.finish()?;
    Ok((run, train))
}

/// Training mask of `sample` in `epoch`.
pub fn sample_plan(run: &RunConfig, epoch: usize, sample: usize) -> Result<MaskPlan> {
    sample_mask(
        run.n_patches(),
        run.mask_ratio,
        derive_seed(&[run.seed, epoch as u64, sample as u64]),
    )
}

/// Fixed evaluation mask of `sample` in `split`.
pub fn eval_plan(run: &RunConfig, split: Split, sample: usize) -> Result<MaskPlan> {
    sample_mask(
        run.n_patches(),
        run.mask_ratio,
        derive_seed(&[run.seed, EVAL_TAG, split.id(), sample as u64]),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub index: usize,
    pub loss: f64,
    /// MSSIM of the clamped reconstruction against the target.
    pub mssim_full: f64,
    /// MSSIM of the target with its masked patches replaced by the
    /// reconstruction.
    pub mssim_masked: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<EvalSample>,
    pub mean_loss: f64,
    pub mean_full: f64,
    pub mean_masked: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,loss,mssim_full,mssim_masked\n");
        for e in &self.samples {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.index, e.loss, e.mssim_full, e.mssim_masked
            ));
        }
        s.push_str(&format!(
            "mean,{},{},{}\n",
            self.mean_loss, self.mean_full, self.mean_masked
        ));
        s
    }
}

/// Scores `model` on `samples` under fixed `plans`.
pub fn evaluate(
    model: &MaeModel<f32>,
    samples: &[Sample],
    plans: &[MaskPlan],
    mode: CameraMode,
) -> Result<EvalReport> {
    if samples.len() != plans.len() {
        return Err(Error::contract(
            "evaluate",
            "one mask plan per sample required",
        ));
    }
    let params = SsimParams::default();
    let mut out = Vec::with_capacity(samples.len());
    for (index, (s, plan)) in samples.iter().zip(plans).enumerate() {
        let f = model.forward_mode(&s.lidar, Some(&s.camera), mode, plan)?;
        out.push(EvalSample {
            index,
            loss: f.loss,
            mssim_full: mssim(&f.clamped_reconstruction(), &s.lidar, &params)?,
            mssim_masked: mssim(&f.masked_composite(&s.lidar)?, &s.lidar, &params)?,
        });
    }
    let n = out.len().max(1) as f64;
    Ok(EvalReport {
        mean_loss: out.iter().map(|e| e.loss).sum::<f64>() / n,
        mean_full: out.iter().map(|e| e.mssim_full).sum::<f64>() / n,
        mean_masked: out.iter().map(|e| e.mssim_masked).sum::<f64>() / n,
        samples: out,
    })
}

/// Loads a checkpoint (refusing a digest other than `expected_digest`)
/// and evaluates it on `split` of `data`.
pub fn evaluate_checkpoint(
    path: &Path,
    expected_digest: Option<&str>,
    data: &DataConfig,
    split: Split,
    mode: CameraMode,
) -> Result<EvalReport> {
    let ck = load_checkpoint(path, expected_digest)?;
    let samples = data.load_split(&ck.config, split)?;
    let plans = (0..samples.len())
        .map(|i| eval_plan(&ck.config, split, i))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&ck.model, &samples, &plans, mode)
}

/// Owns the model, its optimizer and the in-memory datasets of one run.
pub struct Trainer {
    pub run: RunConfig,
    pub config: TrainConfig,
    pub model: MaeModel<f32>,
    pub optimizer: AdamW<f32>,
    pub report: TrainReport,
    /// Next epoch to run.
    pub epoch: usize,
    grads: MaeModel<f32>,
    train_set: Vec<Sample>,
    val_set: Vec<Sample>,
    val_plans: Vec<MaskPlan>,
}

impl Trainer {
    pub fn new(run: &RunConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = MaeModel::<f32>::new(run)?;
        let optimizer = AdamW::new(&model, config.optim);
        Self::with_state(run, config, model, optimizer, 0, TrainReport::default())
    }

    fn with_state(
        run: &RunConfig,
        config: &TrainConfig,
        model: MaeModel<f32>,
        optimizer: AdamW<f32>,
        epoch: usize,
        mut report: TrainReport,
    ) -> Result<Self> {
        let train_set = config.data.load_split(run, Split::Train)?;
        let val_set = config.data.load_split(run, Split::Val)?;
        let val_plans = (0..val_set.len())
            .map(|i| eval_plan(run, Split::Val, i))
            .collect::<Result<Vec<_>>>()?;
        report.digest = run.digest();
        Ok(Self {
            run: run.clone(),
            config: config.clone(),
            grads: model.zeros_like(),
            model,
            optimizer,
            report,
            epoch,
            train_set,
            val_set,
            val_plans,
        })
    }

    pub fn train_set(&self) -> &[Sample] {
        &self.train_set
    }

    pub fn val_set(&self) -> &[Sample] {
        &self.val_set
    }

    pub fn val_plans(&self) -> &[MaskPlan] {
        &self.val_plans
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        let mut rng = SplitMix64::new(derive_seed(&[self.run.seed, SHUFFLE_TAG, epoch as u64]));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.next_below(i as u64 + 1) as usize);
        }
        order
    }

    /// Runs one epoch of updates followed by validation.
    pub fn run_epoch(&mut self, started: Instant) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let order = self.order(epoch);
        let bs = self.config.batch_size;
        let steps = order.len().div_ceil(bs);
        let total = self.config.total_schedule() as f64;
        let lr_at = |step: usize| {
            let t = epoch as f64 + step as f64 / steps as f64;
            let warm = warmup_factor(t, 1.0 / steps as f64, self.config.warmup_epochs);
            Ok::<_, Error>(warm * cosine_lr(t, total, self.config.lr0, self.config.lr_min)?)
        };
        let lr_start = lr_at(0)?;
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(bs).enumerate() {
            self.grads.zero_grad();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &self.train_set[i];
                let plan = sample_plan(&self.run, epoch, i)?;
                let out = self
                    .model
                    .forward_backward(
                        &s.lidar,
                        Some(&s.camera),
                        CameraMode::Full,
                        &plan,
                        &mut self.grads,
                    )
                    .map_err(|e| match e {
                        Error::Numerical { path } => Error::Diverged {
                            epoch,
                            batch,
                            loss: f64::NAN,
                            at: format!("sample {i}, {path}"),
                        },
                        e => e,
                    })?;
                batch_loss += out.loss;
            }
            let scale = 1.0 / chunk.len() as f32;
            self.grads.visit_mut("", &mut |_, t| {
                t.data_mut().iter_mut().for_each(|g| *g *= scale)
            });
            batch_loss /= chunk.len() as f64;
            let mut finite = true;
            self.grads.visit("", &mut |_, t| finite &= t.all_finite());
            if !batch_loss.is_finite() || !finite {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: batch_loss,
                    at: "gradients".into(),
                });
            }
            self.optimizer
                .update(&mut self.model, &self.grads, lr_at(batch)?)?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let (cam, zero) = self.validate()?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_mssim_camera: cam,
            val_mssim_no_camera: zero,
            lr: lr_start,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        if !rec.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: steps,
                loss: rec.train_loss,
                at: "validation".into(),
            });
        }
        info!(
            "epoch {epoch}: loss {:.5}, val mssim {:.4} (camera) / {:.4} (no camera), lr {:.3e}",
            rec.train_loss, rec.val_mssim_camera, rec.val_mssim_no_camera, rec.lr
        );
        self.epoch += 1;
        self.report.wall_time_s = rec.elapsed_s;
        self.report.records.push(rec.clone());
        Ok(rec)
    }

    /// Mean full-image validation MSSIM with camera and with zero tokens.
    pub fn validate(&self) -> Result<(f64, f64)> {
        if self.val_set.is_empty() {
            return Ok((0.0, 0.0));
        }
        let cam = evaluate(
            &self.model,
            &self.val_set,
            &self.val_plans,
            CameraMode::Full,
        )?;
        let zero = evaluate(
            &self.model,
            &self.val_set,
            &self.val_plans,
            CameraMode::ZeroTokens,
        )?;
        Ok((cam.mean_full, zero.mean_full))
    }

    /// Trains up to `config.epochs`, writing report rows and checkpoints
    /// into `out_dir`.
    pub fn run_to_end(&mut self, out_dir: &Path) -> Result<TrainReport> {
        let started = Instant::now();
        let report_path = out_dir.join("report.csv");
        let digest = self.run.digest();
        while self.epoch < self.config.epochs {
            let rec = self.run_epoch(started)?;
            TrainReport::append(&report_path, &rec, &digest)?;
            if self.epoch % self.config.checkpoint_every == 0 || self.epoch == self.config.epochs {
                self.save(out_dir)?;
            }
        }
        save_checkpoint(&out_dir.join("model.bin"), &self.model, self.epoch)?;
        Ok(self.report.clone())
    }

    /// Writes the checkpoint pair for the current epoch count.
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let (m, o) = checkpoint_paths(out_dir, self.epoch);
        save_checkpoint(&m, &self.model, self.epoch)?;
        save_optimizer(&o, &self.optimizer, &self.run, self.epoch)
    }
}

fn checkpoint_paths(dir: &Path, epoch: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("model_e{epoch:04}.bin")),
        dir.join(format!("optim_e{epoch:04}.bin")),
    )
}

fn run_file_text(run: &RunConfig, config: &TrainConfig) -> String {
    format!("{}{}", run.to_text(), config.to_text())
}

/// Fresh run into `out_dir` (created if missing).
pub fn train(run: &RunConfig, config: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, run_file_text(run, config)).map_err(|e| Error::io(&cfg_path, e))?;
    let mut trainer = Trainer::new(run, config)?;
    trainer
        .report
        .write_prefix(&out_dir.join("report.csv"), 0)?;
    trainer.run_to_end(out_dir)
}

/// Continues the run in `out_dir` from its latest checkpoint, optionally
/// extending it to `epochs`. Report rows past that checkpoint are dropped
/// and recomputed.
pub fn resume(out_dir: &Path, epochs: Option<usize>) -> Result<TrainReport> {
    let cfg_path = out_dir.join("config.txt");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let (run, mut config) = load_run_config(&text)?;
    if let Some(n) = epochs {
        config.epochs = n;
        config.validate()?;
        fs::write(&cfg_path, run_file_text(&run, &config)).map_err(|e| Error::io(&cfg_path, e))?;
    }
    let latest = (1..=config.epochs.max(latest_on_disk(out_dir)))
        .rev()
        .find(|&e| {
            checkpoint_paths(out_dir, e).0.exists() && checkpoint_paths(out_dir, e).1.exists()
        });
    let report_path = out_dir.join("report.csv");
    let report = TrainReport::load(&report_path)?;
    if !report.records.is_empty() && report.digest != run.digest() {
        return Err(Error::DigestMismatch {
            expected: run.digest(),
            found: report.digest,
        });
    }
    let (model, optimizer, epoch) = match latest {
        Some(e) => {
            let (m, o) = checkpoint_paths(out_dir, e);
            let ck = load_checkpoint(&m, Some(&run.digest()))?;
            let (opt, _) = load_optimizer(&o, &ck.model)?;
            (ck.model, opt, e)
        }
        None => {
            let model = MaeModel::<f32>::new(&run)?;
            let opt = AdamW::new(&model, config.optim);
            (model, opt, 0)
        }
    };
    if report.records.len() < epoch {
        return Err(Error::Format(format!(
            "report.csv has {} rows but the checkpoint is at epoch {epoch}",
            report.records.len()
        )));
    }
    report.write_prefix(&report_path, epoch)?;
    let mut kept = report;
    kept.records.truncate(epoch);
    info!("resuming {} at epoch {epoch}", out_dir.display());
    let mut trainer = Trainer::with_state(&run, &config, model, optimizer, epoch, kept)?;
    trainer.run_to_end(out_dir)
}

fn latest_on_disk(dir: &Path) -> usize {
    fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("model_e")?
                .strip_suffix(".bin")?
                .parse()
                .ok()
        })
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_file_round_trip() {
        let run = RunConfig {
            seed: 4,
            ..RunConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 3,
            schedule_epochs: Some(10),
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (r, t) = load_run_config(&run_file_text(&run, &cfg)).unwrap();
        assert_eq!((r, t), (run, cfg));
        assert!(load_run_config("train.epochs = 3\ntrain.typo = 1\n").is_err());
        assert!(load_run_config("train.batch_size = 0\n").is_err());
    }

    #[test]
    fn masks_depend_on_epoch_and_sample_only() {
        let run = RunConfig::default();
        let a = sample_plan(&run, 2, 5).unwrap();
        assert_eq!(a, sample_plan(&run, 2, 5).unwrap());
        assert_ne!(a.permutation, sample_plan(&run, 3, 5).unwrap().permutation);
        assert_ne!(a.permutation, sample_plan(&run, 2, 6).unwrap().permutation);
        assert_ne!(
            a.permutation,
            eval_plan(&run, Split::Train, 5).unwrap().permutation
        );
    }
}
