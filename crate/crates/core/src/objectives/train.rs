//! The training loop: seeded per-epoch shuffling, optimizer and EMA updates,
//! loss logging, and per-epoch checkpoints that a later run can resume from.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{assemble_batch, Batch, CropMode};
use super::model::PolicyModel;
use super::optim::{AdamW, AdamWConfig};
use super::{ema_decay_at, ema_update, scalar, variant_loss};
use crate::checkpoint::{checkpoint_name, latest_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::dataset::DemoDataset;
use crate::data::DatasetStats;
use crate::error::{invalid, Error, Result};

pub const LOSS_LOG: &str = "loss.csv";

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_ddpm: f64,
    /// Reconstruction loss, or the contrastive loss for that variant.
    pub l_recon: Option<f64>,
    pub l_total: f64,
    pub lr: f64,
}

/// RNG driving the shuffle, crops and noise of epoch `epoch` (1-based).
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd6e8_feb8_6659_fd93) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Every `(episode, t)` window start in the dataset.
pub fn all_samples(ds: &DemoDataset) -> Vec<(usize, usize)> {
    ds.episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.len).map(move |t| (e, t))).collect()
}

pub struct Trainer {
    pub model: PolicyModel,
    pub opt: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub stats: DatasetStats,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, ds: &DemoDataset) -> Result<Self> {
        check_dataset(cfg, ds)?;
        let t = &cfg.train;
        let opt = AdamW::new(AdamWConfig { lr: t.lr, beta1: t.betas.0, beta2: t.betas.1, eps: t.adam_eps, weight_decay: t.weight_decay });
        Ok(Self { model: PolicyModel::new(cfg)?, opt, epoch: 0, step: 0, stats: ds.stats.clone() })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self { model: ck.to_model()?, opt: ck.to_optimizer()?, epoch: ck.epoch, step: ck.step, stats: ck.stats.clone() })
    }

    pub fn config(&self) -> &RunConfig {
        self.model.config()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.opt), self.epoch, self.step, &self.stats)
    }

    /// Loss, backward pass, optimizer update, EMA update.
    pub fn train_step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<TrainRecord> {
        let loss = variant_loss(&self.model, batch, rng)?;
        let grads = loss.total.backward()?;
        self.opt.step(self.model.params(), &grads)?;
        let t = &self.model.config().train;
        ema_update(self.model.ema_params(), self.model.params(), ema_decay_at(t.ema_decay, t.ema_warmup, self.step as usize))?;
        self.step += 1;
        let aux = match (&loss.recon, &loss.curl) {
            (Some(r), _) => Some(scalar(r)?),
            (None, Some(c)) => Some(scalar(c)?),
            _ => None,
        };
        Ok(TrainRecord { epoch: self.epoch + 1, step: self.step, l_ddpm: scalar(&loss.ddpm)?, l_recon: aux, l_total: scalar(&loss.total)?, lr: self.opt.cfg.lr })
    }

    /// One pass over a shuffled copy of every window start. At most
    /// `max_steps` batches are taken when given.
    pub fn run_epoch(&mut self, ds: &DemoDataset, max_steps: Option<usize>, mut on_step: impl FnMut(&TrainRecord)) -> Result<Vec<TrainRecord>> {
        let cfg = self.model.config().clone();
        let mut rng = epoch_rng(cfg.train.seed, self.epoch + 1);
        let mut samples = all_samples(ds);
        samples.shuffle(&mut rng);
        let min_batch = if cfg.model.variant == crate::config::Variant::Curl { 2 } else { 1 };
        let mut records = Vec::new();
        for chunk in samples.chunks(cfg.train.batch_size) {
            if max_steps.is_some_and(|n| records.len() >= n) {
                break;
            }
            if chunk.len() < min_batch {
                continue;
            }
            let batch = assemble_batch(ds, chunk, &cfg, self.model.dtype(), CropMode::Random, &mut rng)?;
            let rec = self.train_step(&batch, &mut rng)?;
            if !rec.l_total.is_finite() {
                return invalid(format!("training diverged at step {}", rec.step));
            }
            on_step(&rec);
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }
}

fn check_dataset(cfg: &RunConfig, ds: &DemoDataset) -> Result<()> {
    let m = &cfg.model;
    if ds.total_steps() < m.history + m.horizon - 1 {
        return invalid(format!("dataset has {} steps, shorter than one window of {}", ds.total_steps(), m.history + m.horizon - 1));
    }
    let t = &cfg.task;
    if ds.image_hw() != t.image_hw || ds.cameras() != t.cameras || ds.action_dim() != t.action_dim || ds.lowdim_dim() != t.lowdim_dim {
        return invalid("dataset shapes do not match the task configuration");
    }
    Ok(())
}

/// Summary of a [`train`] call.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Mean total loss of every epoch, including epochs from a resumed run.
    pub epoch_means: Vec<f64>,
    pub final_epoch: usize,
    pub steps: u64,
}

fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Integrity(format!("loss log: {e}")))?;
    rdr.deserialize().map(|r| r.map_err(|e| Error::Integrity(format!("loss log: {e}")))).collect()
}

fn write_log(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

fn epoch_means(records: &[TrainRecord]) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in records {
        if sums.len() < r.epoch {
            sums.resize(r.epoch, (0.0, 0));
        }
        sums[r.epoch - 1].0 += r.l_total;
        sums[r.epoch - 1].1 += 1;
    }
    sums.into_iter().map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect()
}

/// Trains for `cfg.train.epochs` epochs, writing `loss.csv` and one
/// checkpoint per epoch into `out`. With `resume`, continues from the latest
/// checkpoint there; its configuration must match `cfg` apart from the epoch
/// count.
pub fn train(cfg: &RunConfig, ds: &DemoDataset, out: &Path, resume: bool) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let log_path = out.join(LOSS_LOG);
    let (mut trainer, mut log) = match latest_checkpoint(out)?.filter(|_| resume) {
        Some((_, dir)) => {
            let mut ck = Checkpoint::load(&dir)?;
            let mut expected = ck.config.clone();
            expected.train.epochs = cfg.train.epochs;
            if &expected != cfg {
                return Err(Error::Config("configuration differs from the checkpoint being resumed".into()));
            }
            if ck.stats != ds.stats {
                return Err(Error::Integrity("dataset differs from the one the checkpoint was trained on".into()));
            }
            ck.config = expected;
            let t = Trainer::from_checkpoint(&ck)?;
            let log: Vec<TrainRecord> = read_log(&log_path)?.into_iter().filter(|r| r.epoch <= t.epoch).collect();
            log::info!("resuming from epoch {} (step {})", t.epoch, t.step);
            (t, log)
        }
        None => (Trainer::new(cfg, ds)?, Vec::new()),
    };
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    write_log(&log_path, &log)?;
    while trainer.epoch < cfg.train.epochs {
        let records = trainer.run_epoch(ds, None, |_| {})?;
        let mean = records.iter().map(|r| r.l_total).sum::<f64>() / records.len().max(1) as f64;
        log::info!("epoch {} steps {} mean loss {mean:.5}", trainer.epoch, trainer.step);
        log.extend(records);
        write_log(&log_path, &log)?;
        trainer.checkpoint().save(&out.join(checkpoint_name(trainer.epoch)))?;
    }
    Ok(TrainSummary { epoch_means: epoch_means(&log), final_epoch: trainer.epoch, steps: trainer.step })
}
