//! The training loop: batching, per-mode losses, Adam updates with a
//! staircase schedule, divergence handling, telemetry and checkpoints.

use std::io::{Read, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{cifar10_int_with_std, Batches, Dataset, INTERP_NOISE_STD};
use crate::energy::{egm, softmax_probs};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, JemSampler, LossConfig, LossMode};
use crate::metrics::{ece, EceReport, DEFAULT_ECE_BINS};
use crate::nn::{AdamConfig, AdamState, LrSchedule, Model, ModelSpec};
use crate::sampler::{ReplayBuffer, SgldConfig};

// Stream ids keep the independent random consumers apart.
const SAMPLER_STREAM_BASE: u64 = 1 << 32;
const PROBE_STREAM: u64 = 7;
const INTERP_STREAM_BASE: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergencePolicy {
    /// Drop the batch without an update and keep going.
    #[default]
    SkipBatch,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sampler: SgldConfig,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    /// `None` runs at the constant Adam learning rate.
    pub schedule: Option<LrSchedule>,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub divergence_policy: DivergencePolicy,
    pub probe_size: usize,
    /// Train on midpoints of consecutive batches plus Gaussian noise of this
    /// standard deviation (the CIFAR10-Int construction).
    pub interpolate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 150,
            batch_size: 64,
            seed: 0,
            sampler: SgldConfig::default(),
            buffer_capacity: ReplayBuffer::DEFAULT_CAPACITY,
            reinit_prob: ReplayBuffer::DEFAULT_REINIT_PROB,
            schedule: None,
            adam: AdamConfig::default(),
            checkpoint_interval: 0,
            checkpoint_dir: None,
            divergence_policy: DivergencePolicy::SkipBatch,
            probe_size: 512,
            interpolate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.loss.mode == LossMode::Jem {
            self.sampler.validate()?;
            if self.buffer_capacity == 0 {
                return Err(Error::Config("JEM needs buffer_capacity >= 1".into()));
            }
            if !(0.0..=1.0).contains(&self.reinit_prob) {
                return Err(Error::Config("reinit_prob must be in [0, 1]".into()));
            }
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if self.checkpoint_interval > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint_interval needs checkpoint_dir".into()));
        }
        if matches!(self.interpolate, Some(s) if !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("interpolate noise std must be >= 0".into()));
        }
        Ok(())
    }

    /// Interpolation with the default `N(0, 0.001)` perturbation.
    pub fn with_default_interpolation(mut self) -> Self {
        self.interpolate = Some(INTERP_NOISE_STD);
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            Some(s) => s.lr_at(epoch),
            None => self.adam.lr,
        }
    }
}

/// One completed epoch. Loss columns average over the batches that produced
/// an update; `eval_accuracy` is NaN when no evaluation set was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_other: f64,
    pub eval_accuracy: f64,
    pub mean_egm: f64,
    pub diverged_chains: usize,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        if self.records.is_empty() {
            out.write_record([
                "epoch",
                "lr",
                "loss_total",
                "loss_ce",
                "loss_other",
                "eval_accuracy",
                "mean_egm",
                "diverged_chains",
                "skipped_batches",
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let records = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub ece: EceReport,
}

const EVAL_CHUNK: usize = 256;

/// Accuracy, mean max-softmax confidence and ECE over `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset, n_bins: usize) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let parts = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let probs = softmax_probs(&model.logits(&dataset.inputs.select_rows(chunk)?)?)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    let row = probs.row(r);
                    let (arg, conf) = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (k, &p)| if p > b.1 { (k, p) } else { b });
                    (conf, arg == dataset.labels[i])
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let (conf, correct): (Vec<f64>, Vec<bool>) = parts.into_iter().flatten().unzip();
    let n = conf.len() as f64;
    Ok(Evaluation {
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        mean_confidence: conf.iter().sum::<f64>() / n,
        ece: ece(&conf, &correct, n_bins)?,
    })
}

/// Mean `||dE/dx||` over the rows of `x`, computed in parallel chunks.
pub fn mean_egm(model: &Model, x: &Tensor) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("mean_egm"));
    }
    let idx: Vec<usize> = (0..x.rows()).collect();
    let sums = idx
        .par_chunks(64)
        .map(|c| Ok(egm(model, &x.select_rows(c)?)?.iter().sum::<f64>()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / x.rows() as f64)
}

/// Fixed subset of at most `size` training rows used for EGM telemetry.
pub fn probe_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROBE_STREAM);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(size.min(n));
    idx.sort_unstable();
    idx
}

impl Checkpoint {
    /// Freshly initialized model and optimizer for `config`.
    pub fn init(spec: ModelSpec, config: &TrainConfig) -> Result<Self> {
        let model = Model::init(spec, config.seed)?;
        let adam = AdamState::new(config.adam, &model.params);
        let rng = sampler_rng(config.seed, 0);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            rng: RngState::capture(config.seed, &rng),
            meta: serde_json::json!({ "mode": config.loss.mode.as_str() }),
        })
    }
}

fn sampler_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLER_STREAM_BASE + epoch as u64);
    rng
}

/// Trains a fresh model described by `spec` for `config.epochs` epochs.
pub fn train(config: &TrainConfig, spec: ModelSpec, train_set: &Dataset, eval_set: Option<&Dataset>) -> Result<(Checkpoint, RunLog)> {
    config.validate()?;
    resume(config, Checkpoint::init(spec, config)?, train_set, eval_set)
}

/// Continues `checkpoint` up to `config.epochs` completed epochs.
///
/// Every random stream is keyed by epoch, so in the CE and NG-EBM modes the
/// result is bit-identical to an uninterrupted run. The JEM replay buffer is
/// not part of the checkpoint and restarts empty.
pub fn resume(
    config: &TrainConfig,
    mut checkpoint: Checkpoint,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
) -> Result<(Checkpoint, RunLog)> {
    config.validate()?;
    let spec = &checkpoint.model.spec;
    if train_set.input_shape() != spec.input_shape.as_slice() {
        return Err(Error::InputShape {
            expected: spec.input_shape.clone(),
            got: train_set.input_shape().to_vec(),
        });
    }
    if train_set.num_classes > spec.num_classes {
        return Err(Error::LabelOutOfRange {
            label: train_set.num_classes - 1,
            classes: spec.num_classes,
        });
    }
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let mut log = RunLog::default();
    if checkpoint.epoch >= config.epochs {
        return Ok((checkpoint, log));
    }
    let batches = Batches::new(train_set, config.batch_size, config.seed)?;
    let probe = train_set
        .inputs
        .select_rows(&probe_indices(train_set.len(), config.probe_size, config.seed))?;
    let mut buffer = if config.loss.mode == LossMode::Jem {
        Some(
            ReplayBuffer::new(
                train_set.input_shape().to_vec(),
                config.buffer_capacity,
                config.reinit_prob,
                config.seed.wrapping_add(1),
            )?
            .with_sanity_bound(config.sampler.bound()),
        )
    } else {
        None
    };

    for epoch in checkpoint.epoch..config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = sampler_rng(config.seed, epoch);
        let mut interp_rng = ChaCha8Rng::seed_from_u64(config.seed);
        interp_rng.set_stream(INTERP_STREAM_BASE + epoch as u64);
        let (mut sum_total, mut sum_ce, mut sum_other) = (0.0, 0.0, 0.0);
        let (mut applied, mut skipped, mut diverged) = (0usize, 0usize, 0usize);

        for (b, (batch, prev)) in batches.epoch(epoch).enumerate() {
            let x = match config.interpolate {
                Some(std) => {
                    let other = match &prev {
                        Some(p) if p.x.shape() == batch.x.shape() => &p.x,
                        _ => &batch.x,
                    };
                    cifar10_int_with_std(&batch.x, other, std, &mut interp_rng)?
                }
                None => batch.x,
            };
            let model = &checkpoint.model;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let jem = buffer.as_mut().map(|buffer| JemSampler {
                buffer,
                config: &config.sampler,
                rng: &mut rng,
            });
            let (loss, breakdown) = combined_loss(&mut tape, &config.loss, model, &params, &x, &batch.y, jem)?;
            diverged += breakdown.diverged_chains;
            let grads = tape.backward(loss, &params, false)?.into_tensors();
            let bad = if !breakdown.total.is_finite() {
                Some(format!("non-finite loss {}", breakdown.total))
            } else {
                grads
                    .iter()
                    .zip(model.params.names())
                    .find(|(g, _)| !g.all_finite())
                    .map(|(_, name)| format!("non-finite gradient for `{name}`"))
            };
            if let Some(reason) = bad {
                match config.divergence_policy {
                    DivergencePolicy::SkipBatch => {
                        skipped += 1;
                        continue;
                    }
                    DivergencePolicy::Abort => {
                        return Err(Error::TrainingAborted { epoch, batch: b, reason });
                    }
                }
            }
            checkpoint.adam.step(&mut checkpoint.model.params, &grads, lr)?;
            sum_total += breakdown.total;
            sum_ce += breakdown.cross_entropy;
            sum_other += breakdown.other;
            applied += 1;
        }

        checkpoint.epoch = epoch + 1;
        checkpoint.rng = RngState::capture(config.seed, &sampler_rng(config.seed, epoch + 1));
        let denom = applied.max(1) as f64;
        let nan_if_empty = |s: f64| if applied == 0 { f64::NAN } else { s / denom };
        let eval_accuracy = match eval_set {
            Some(ds) => evaluate(&checkpoint.model, ds, DEFAULT_ECE_BINS)?.accuracy,
            None => f64::NAN,
        };
        log.records.push(EpochRecord {
            epoch,
            lr,
            loss_total: nan_if_empty(sum_total),
            loss_ce: nan_if_empty(sum_ce),
            loss_other: nan_if_empty(sum_other),
            eval_accuracy,
            mean_egm: mean_egm(&checkpoint.model, &probe)?,
            diverged_chains: diverged,
            skipped_batches: skipped,
        });
        if config.checkpoint_interval > 0 && checkpoint.epoch.is_multiple_of(config.checkpoint_interval) {
            if let Some(dir) = &config.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                checkpoint.save(&dir.join(format!("epoch_{:04}.ckpt", checkpoint.epoch)))?;
            }
        }
    }
    Ok((checkpoint, log))
}
