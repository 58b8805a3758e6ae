//! The training loop: deterministic shuffling and augmentation, composite
//! objective, optimizer and running-statistic updates, and step logs.

use std::path::Path;
use std::time::Instant;

use ndarray::ArrayD;

use crate::data::{apply_transform, stack_batch, SampleRecord, Split, Transform};
use crate::error::{Error, Result};
use crate::loss::{total_loss_on, FeatureExtractor, LossWeights};
use crate::model::{build_model, forward_open, Mode, ModelConfig, ParameterStore};
use crate::train::optimizer::AdamW;

/// How the learning rate evolves over epochs. Both shapes are pure
/// functions of the epoch index, so a resumed run sees the same rates
/// as an uninterrupted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    /// The configured rate at every step.
    #[default]
    Constant,
    /// Half-cosine decay from the configured rate towards zero across
    /// the configured number of epochs.
    Cosine,
}

impl LrSchedule {
    pub fn label(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!(
                "unknown learning-rate schedule {other:?} (expected constant or cosine)"
            ))),
        }
    }
}

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Master seed for initialisation, shuffling, and augmentation.
    pub seed: u64,
    /// Momentum of the running batch-norm statistics.
    pub bn_momentum: f64,
    pub weights: LossWeights,
    /// Apply a random dihedral transform to each sample every epoch.
    pub augment: bool,
    pub lr_schedule: LrSchedule,
    /// Rescale gradients so their global L2 norm never exceeds this.
    pub clip_norm: Option<f64>,
    /// Measure quality on the validation split every this many epochs
    /// (0 disables).
    pub validation_every: usize,
    /// Persist a checkpoint every this many epochs (0 disables; acted
    /// on by drivers that own an output directory).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 10,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            seed: 0,
            bn_momentum: 0.1,
            weights: LossWeights::default(),
            augment: true,
            lr_schedule: LrSchedule::Constant,
            clip_norm: None,
            validation_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bn_momentum must lie in [0,1], got {}",
                self.bn_momentum
            )));
        }
        if let Some(clip) = self.clip_norm {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(Error::Config(format!(
                    "clip_norm must be positive when set, got {clip}"
                )));
            }
        }
        self.weights.validate()
    }

    /// The learning rate in effect during `epoch` under the configured
    /// schedule.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let total = self.epochs.max(1) as f64;
                let phase = std::f64::consts::PI * (epoch as f64 / total);
                self.learning_rate * 0.5 * (1.0 + phase.cos())
            }
        }
    }

    /// Stable `key = value` rendering (embedded in checkpoints and logs).
    pub fn to_kv(&self) -> String {
        let clip = match self.clip_norm {
            Some(v) => v.to_string(),
            None => "none".to_string(),
        };
        format!(
            "epochs = {}\nbatch_size = {}\nlearning_rate = {}\nweight_decay = {}\n\
             seed = {}\nbn_momentum = {}\nalpha1 = {}\nalpha2 = {}\nalpha3 = {}\n\
             alpha4 = {}\naugment = {}\nlr_schedule = {}\nclip_norm = {}\n\
             validation_every = {}\ncheckpoint_every = {}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.weight_decay,
            self.seed,
            self.bn_momentum,
            self.weights.a1,
            self.weights.a2,
            self.weights.a3,
            self.weights.a4,
            self.augment,
            self.lr_schedule.label(),
            clip,
            self.validation_every,
            self.checkpoint_every,
        )
    }

    /// Parse `key = value` text produced by [`TrainConfig::to_kv`].
    /// Unknown keys are ignored; malformed lines are configuration errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "train config line {} is not `key = value`: {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad =
                || Error::Config(format!("train config key {key} has invalid value {value:?}"));
            match key {
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad())?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "bn_momentum" => cfg.bn_momentum = value.parse().map_err(|_| bad())?,
                "alpha1" => cfg.weights.a1 = value.parse().map_err(|_| bad())?,
                "alpha2" => cfg.weights.a2 = value.parse().map_err(|_| bad())?,
                "alpha3" => cfg.weights.a3 = value.parse().map_err(|_| bad())?,
                "alpha4" => cfg.weights.a4 = value.parse().map_err(|_| bad())?,
                "augment" => cfg.augment = value.parse().map_err(|_| bad())?,
                "lr_schedule" => cfg.lr_schedule = LrSchedule::parse(value)?,
                "clip_norm" => {
                    cfg.clip_norm = if value.eq_ignore_ascii_case("none") {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad())?)
                    }
                }
                "validation_every" => {
                    cfg.validation_every = value.parse().map_err(|_| bad())?
                }
                "checkpoint_every" => {
                    cfg.checkpoint_every = value.parse().map_err(|_| bad())?
                }
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One optimizer step as it appears in logs and traces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Wall-clock duration of the step; excluded from trace comparisons.
    pub wall_ms: f64,
}

/// Quality measured on the validation split after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ValRecord {
    pub epoch: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    (a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
        .rotate_left(31)
}

/// The visiting order of training indices in one epoch: a pure function
/// of `(seed, epoch, n)`, so interrupted and resumed runs replay the
/// identical schedule.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix(seed, 0x0E90C4 ^ epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// The dihedral transform applied to one sample in one epoch: a pure
/// function of `(seed, epoch, sample index)`.
pub fn epoch_transform(seed: u64, epoch: usize, index: usize) -> Transform {
    Transform::sample(mix(mix(seed, 0xA06 ^ epoch as u64), index as u64))
}

/// Fold one batch's observed statistics into the running batch-norm
/// buffers: `running <- (1 - momentum) * running + momentum * batch`,
/// with the variance made unbiased when the batch has enough elements.
fn apply_bn_updates(
    store: &mut ParameterStore,
    updates: &[crate::model::BnUpdate<f32>],
    momentum: f64,
) -> Result<()> {
    for u in updates {
        let correction = if u.count > 1 {
            u.count as f64 / (u.count as f64 - 1.0)
        } else {
            1.0
        };
        let mean = store.buffer_mut(&u.mean_buffer)?;
        for (r, &b) in mean.iter_mut().zip(u.batch_mean.iter()) {
            *r = ((1.0 - momentum) * (*r as f64) + momentum * b as f64) as f32;
        }
        let var = store.buffer_mut(&u.var_buffer)?;
        for (r, &b) in var.iter_mut().zip(u.batch_var.iter()) {
            *r = ((1.0 - momentum) * (*r as f64) + momentum * correction * b as f64) as f32;
        }
    }
    Ok(())
}

/// A model with its optimizer and progress counters; the unit that
/// checkpoints save and restore.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub store: ParameterStore,
    pub optimizer: AdamW,
    /// Fully completed epochs; the next call to
    /// [`Trainer::run_epoch`] trains epoch `epochs_done`.
    pub epochs_done: usize,
    pub global_step: u64,
    /// Validation measurements taken so far, in epoch order.
    pub val_records: Vec<ValRecord>,
}

impl Trainer {
    /// Fresh trainer with seeded initialisation.
    pub fn new(model_config: ModelConfig, train_config: TrainConfig) -> Result<Self> {
        model_config.validate()?;
        train_config.validate()?;
        let store = build_model(&model_config, train_config.seed)?;
        let optimizer = AdamW::new(train_config.weight_decay);
        Ok(Trainer {
            model_config,
            train_config,
            store,
            optimizer,
            epochs_done: 0,
            global_step: 0,
            val_records: Vec::new(),
        })
    }

    /// One optimizer step over an already-assembled batch at the given
    /// learning rate. Returns the loss value before the update.
    pub fn train_step(
        &mut self,
        batch: &[&SampleRecord],
        fx: Option<&FeatureExtractor>,
        lr: f64,
    ) -> Result<f64> {
        let (noisy, clean, skeleton) = stack_batch(batch)?;
        let step = self.global_step;
        let (loss, grads, bn_updates) = {
            let open = forward_open::<f32>(
                &self.model_config,
                &self.store,
                &noisy,
                Mode::Train,
                true,
            )?;
            let mut graph = open.graph;
            let loss_var = total_loss_on(
                &mut graph.tape,
                open.denoised,
                &clean.data.into_dyn(),
                open.skeleton,
                &skeleton.data.into_dyn(),
                &self.train_config.weights,
                fx,
            )?;
            let loss = graph.tape.scalar(loss_var) as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: non-finite loss at step {step}"
                )));
            }
            let mut grads = graph.tape.backward(loss_var);
            let grad_list: Vec<(String, ArrayD<f32>)> = graph
                .bound_params()
                .map(|(name, var)| {
                    let g = grads.take(var).unwrap_or_else(|| {
                        ArrayD::zeros(graph.tape.value(var).raw_dim())
                    });
                    (name.to_string(), g)
                })
                .collect();
            (loss, grad_list, std::mem::take(&mut graph.bn_updates))
        };
        for (name, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "training diverged: non-finite gradient for {name} at step {step}"
                )));
            }
        }
        let mut grads = grads;
        if let Some(clip) = self.train_config.clip_norm {
            let norm = grads
                .iter()
                .map(|(_, g)| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = (clip / norm) as f32;
                for (_, g) in &mut grads {
                    g.mapv_inplace(|v| v * scale);
                }
            }
        }
        self.optimizer.step(&mut self.store, &grads, lr)?;
        apply_bn_updates(&mut self.store, &bn_updates, self.train_config.bn_momentum)?;
        self.global_step += 1;
        Ok(loss)
    }

    /// Train one full epoch over the `Train` split of `records`.
    /// Shuffling and augmentation depend only on `(seed, epoch)`, so a
    /// trainer restored from a checkpoint continues exactly as an
    /// uninterrupted run would have.
    pub fn run_epoch(
        &mut self,
        records: &[SampleRecord],
        fx: Option<&FeatureExtractor>,
    ) -> Result<Vec<StepRecord>> {
        let train_idx: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        if train_idx.is_empty() {
            return Err(Error::Input("no records in the training split".into()));
        }
        let epoch = self.epochs_done;
        let seed = self.train_config.seed;
        let lr = self.train_config.lr_for_epoch(epoch);
        let order = epoch_order(train_idx.len(), seed, epoch);
        let mut steps = Vec::new();
        for chunk in order.chunks(self.train_config.batch_size) {
            let started = Instant::now();
            let batch: Vec<SampleRecord> = chunk
                .iter()
                .map(|&k| {
                    let rec = &records[train_idx[k]];
                    if !self.train_config.augment {
                        return rec.clone();
                    }
                    let t = epoch_transform(seed, epoch, train_idx[k]);
                    SampleRecord {
                        noisy: apply_transform(&rec.noisy, t),
                        clean: apply_transform(&rec.clean, t),
                        skeleton: apply_transform(&rec.skeleton, t),
                        ..rec.clone()
                    }
                })
                .collect();
            let refs: Vec<&SampleRecord> = batch.iter().collect();
            let step = self.global_step;
            let loss = self.train_step(&refs, fx, lr)?;
            steps.push(StepRecord {
                step,
                epoch,
                loss,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        self.epochs_done += 1;
        Ok(steps)
    }

    /// Train from the current epoch to `train_config.epochs`, collecting
    /// every step record and validating at the configured cadence.
    pub fn run(
        &mut self,
        records: &[SampleRecord],
        fx: Option<&FeatureExtractor>,
    ) -> Result<Vec<StepRecord>> {
        let mut all = Vec::new();
        while self.epochs_done < self.train_config.epochs {
            all.extend(self.run_epoch(records, fx)?);
            let every = self.train_config.validation_every;
            if every > 0 && self.epochs_done % every == 0 {
                self.validate_now(records)?;
            }
        }
        Ok(all)
    }

    /// Measure PSNR/SSIM on the validation split with the current
    /// weights and append the result to [`Trainer::val_records`].
    /// Returns `None` when no record carries the validation split.
    pub fn validate_now(&mut self, records: &[SampleRecord]) -> Result<Option<ValRecord>> {
        if !records.iter().any(|r| r.split == Split::Val) {
            return Ok(None);
        }
        let report = crate::metrics::evaluate(
            &self.model_config,
            &self.store,
            records,
            Split::Val,
            &format!("epoch-{}", self.epochs_done),
            false,
        )?;
        let rec = ValRecord {
            epoch: self.epochs_done,
            psnr_db: report.mean_psnr,
            ssim: report.mean_ssim,
        };
        self.val_records.push(rec.clone());
        Ok(Some(rec))
    }

    /// The validation record with the highest PSNR (earliest wins ties);
    /// `None` until something has been validated.
    pub fn best_validation(&self) -> Option<&ValRecord> {
        self.val_records.iter().reduce(|best, cand| {
            if cand.psnr_db > best.psnr_db {
                cand
            } else {
                best
            }
        })
    }
}

/// Write step records as CSV with the run configuration in leading
/// comment lines. Layout: `step,epoch,loss,lr,wall_ms`.
pub fn write_train_log(path: &Path, config_kv: &str, steps: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    for line in config_kv.lines() {
        writeln!(out, "# {line}").map_err(io_err)?;
    }
    writeln!(out, "step,epoch,loss,lr,wall_ms").map_err(io_err)?;
    for s in steps {
        writeln!(out, "{},{},{},{},{}", s.step, s.epoch, s.loss, s.lr, s.wall_ms)
            .map_err(io_err)?;
    }
    Ok(())
}

/// Write validation records as CSV. Layout: `epoch,psnr_db,ssim`.
pub fn write_val_log(path: &Path, records: &[ValRecord]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(out, "epoch,psnr_db,ssim").map_err(io_err)?;
    for r in records {
        writeln!(out, "{},{},{}", r.epoch, r.psnr_db, r.ssim).map_err(io_err)?;
    }
    Ok(())
}
