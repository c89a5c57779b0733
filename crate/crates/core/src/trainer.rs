//! Two-phase self-supervised training.
//!
//! An epoch draws `patches_per_epoch` patches: each patch picks a training
//! image uniformly with replacement and a uniform crop inside it. Patches are
//! grouped into batches of `batch`; a short final batch is kept. Phase 2
//! starts from the phase-1 weights with its own learning rate (by default a
//! tenth of phase 1's). Adam state carries over unless
//! `optimizer.reset_between_phases` is set.
//!
//! Every random draw comes from a stream derived from `master_seed`, the
//! phase and the epoch, so a run is a pure function of its config and a
//! resumed run continues exactly where the checkpoint left off.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{sample_dataset_patch, synthetic_set, Dataset};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::inference::{self, InferenceSpec, Pipeline};
use crate::losses::{self, LossSpec, LossVariant, Sampler};
use crate::metrics::{QualityReport, SsimMode};
use crate::nn::{Adam, Bsn, BsnConfig, Checkpoint, TrainingMeta};
use crate::noise::{add_noise, NoiseSpec, SeedMode};
use crate::seed::{self, tag};

/// Network shape; channel count and init seed come from the data and the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub base_channels: usize,
    pub blocks_per_branch: usize,
    pub branch_dilations: (usize, usize),
}

impl ModelSpec {
    pub fn standard() -> Self {
        let c = BsnConfig::standard(1);
        Self {
            base_channels: c.base_channels,
            blocks_per_branch: c.blocks_per_branch,
            branch_dilations: c.branch_dilations,
        }
    }

    pub fn tiny() -> Self {
        let c = BsnConfig::tiny(1);
        Self {
            base_channels: c.base_channels,
            blocks_per_branch: c.blocks_per_branch,
            branch_dilations: c.branch_dilations,
        }
    }

    pub fn bsn_config(&self, in_channels: usize, seed: u64) -> BsnConfig {
        BsnConfig {
            in_channels,
            base_channels: self.base_channels,
            blocks_per_branch: self.blocks_per_branch,
            branch_dilations: self.branch_dilations,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    /// Phase 1 defaults to 1e-4; phase 2 to a tenth of phase 1.
    #[serde(default)]
    pub lr: Option<f64>,
    pub batch: usize,
    pub patch: usize,
    pub epochs: usize,
    /// Phase 2 defaults to phase 1's value.
    #[serde(default)]
    pub patches_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub reset_between_phases: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            reset_between_phases: false,
        }
    }
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Noisy images, optionally with clean references under the same names.
    Folder {
        path: PathBuf,
        #[serde(default)]
        clean: Option<PathBuf>,
    },
    /// Clean images with synthetic noise added on the fly.
    CleanFolder { path: PathBuf, noise: NoiseSpec },
    /// Generated scenes with synthetic noise.
    Synthetic {
        count: usize,
        height: usize,
        width: usize,
        noise: NoiseSpec,
        #[serde(default)]
        scene_seed: u64,
        #[serde(default)]
        first_index: u64,
    },
}

impl DataSource {
    pub fn noise(&self) -> Option<&NoiseSpec> {
        match self {
            DataSource::Folder { .. } => None,
            DataSource::CleanFolder { noise, .. } | DataSource::Synthetic { noise, .. } => Some(noise),
        }
    }

    pub fn noise_mut(&mut self) -> Option<&mut NoiseSpec> {
        match self {
            DataSource::Folder { .. } => None,
            DataSource::CleanFolder { noise, .. } | DataSource::Synthetic { noise, .. } => Some(noise),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Standard,
    /// Trains on the validation images themselves (their noisy versions only).
    SelfOnTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub phase1: PhaseConfig,
    #[serde(default)]
    pub phase2: Option<PhaseConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub master_seed: u64,
    pub dataset: DataSource,
    #[serde(default)]
    pub validation: Option<DataSource>,
    #[serde(default)]
    pub mode: TrainMode,
    /// Pipeline used to score the validation set.
    #[serde(default)]
    pub inference: InferenceSpec,
    /// Convert every image to one luma channel.
    #[serde(default)]
    pub grayscale: bool,
    #[serde(default)]
    pub ssim_mode: SsimMode,
    /// Validate every this many epochs; 0 validates only after the last epoch.
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    /// Network inputs per forward/backward micro-batch.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_validate_every() -> usize {
    1
}
fn default_chunk() -> usize {
    losses::DEFAULT_CHUNK
}

/// Learning rate used by phase 1 when none is configured.
pub const DEFAULT_LR: f64 = 1e-4;

/// Fully resolved phase settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub index: usize,
    pub lr: f64,
    pub batch: usize,
    pub patch: usize,
    pub epochs: usize,
    pub patches_per_epoch: usize,
}

impl Phase {
    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch)
    }
}

impl TrainConfig {
    /// The published full-scale schedule on a clean folder with AWGN.
    pub fn full_scale(dataset: DataSource) -> Self {
        Self {
            model: ModelSpec::standard(),
            loss: LossSpec::new(LossVariant::Csdbsn, 5, Sampler::Rsg),
            phase1: PhaseConfig {
                lr: Some(DEFAULT_LR),
                batch: 16,
                patch: 160,
                epochs: 15,
                patches_per_epoch: Some(25600),
            },
            phase2: Some(PhaseConfig {
                lr: None,
                batch: 8,
                patch: 250,
                epochs: 10,
                patches_per_epoch: None,
            }),
            optimizer: OptimizerConfig::default(),
            master_seed: 0,
            dataset,
            validation: None,
            mode: TrainMode::Standard,
            inference: InferenceSpec::default(),
            grayscale: false,
            ssim_mode: SsimMode::ChannelMean,
            validate_every: 1,
            chunk: losses::DEFAULT_CHUNK,
        }
    }

    /// Desk-scale preset: tiny network on small synthetic scenes, a few
    /// hundred steps, one phase.
    pub fn desk() -> Self {
        let noise = NoiseSpec::awgn(25.0, SeedMode::PerEpochRandom);
        Self {
            model: ModelSpec::tiny(),
            loss: LossSpec::new(LossVariant::Csdbsn, 2, Sampler::Rsg),
            phase1: PhaseConfig {
                lr: Some(1e-3),
                batch: 4,
                patch: 32,
                epochs: 4,
                patches_per_epoch: Some(256),
            },
            phase2: None,
            dataset: DataSource::Synthetic {
                count: 10,
                height: 64,
                width: 64,
                noise,
                scene_seed: 0,
                first_index: 0,
            },
            validation: Some(DataSource::Synthetic {
                count: 4,
                height: 64,
                width: 64,
                noise: NoiseSpec { seed_mode: SeedMode::Fixed, ..noise },
                scene_seed: 0,
                first_index: 1000,
            }),
            grayscale: true,
            ..Self::full_scale(DataSource::Folder {
                path: PathBuf::new(),
                clean: None,
            })
        }
    }

    pub fn phases(&self) -> Vec<Phase> {
        let p1_lr = self.phase1.lr.unwrap_or(DEFAULT_LR);
        let p1_ppe = self.phase1.patches_per_epoch.unwrap_or(25600);
        let mut out = vec![Phase {
            index: 1,
            lr: p1_lr,
            batch: self.phase1.batch,
            patch: self.phase1.patch,
            epochs: self.phase1.epochs,
            patches_per_epoch: p1_ppe,
        }];
        if let Some(p2) = &self.phase2 {
            if p2.epochs > 0 {
                out.push(Phase {
                    index: 2,
                    lr: p2.lr.unwrap_or(p1_lr / 10.0),
                    batch: p2.batch,
                    patch: p2.patch,
                    epochs: p2.epochs,
                    patches_per_epoch: p2.patches_per_epoch.unwrap_or(p1_ppe),
                });
            }
        }
        out
    }

    pub fn in_channels_hint(&self) -> Option<usize> {
        self.grayscale.then_some(1)
    }

    /// Checks everything that does not need the images themselves.
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.inference.validate()?;
        let bsn = self.model.bsn_config(1, 0);
        bsn.validate()?;
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be positive".into()));
        }
        if self.mode == TrainMode::SelfOnTest && self.validation.is_none() {
            return Err(Error::Config("mode self_on_test needs a validation set".into()));
        }
        for src in std::iter::once(&self.dataset).chain(self.validation.as_ref()) {
            if let Some(n) = src.noise() {
                n.validate()?;
            }
            if let DataSource::Synthetic { count, height, width, .. } = src {
                if *count == 0 || *height == 0 || *width == 0 {
                    return Err(Error::Config("synthetic dataset needs positive count and size".into()));
                }
            }
        }
        let s = if self.loss.variant.uses_sampling() { self.loss.stride } else { 1 };
        let min_side = bsn.min_input_side();
        for ph in self.phases() {
            let name = format!("phase{}", ph.index);
            if !(ph.lr.is_finite() && ph.lr > 0.0) {
                return Err(Error::Config(format!("{name}.lr must be positive, got {}", ph.lr)));
            }
            if ph.batch == 0 || ph.epochs == 0 || ph.patches_per_epoch == 0 || ph.patch == 0 {
                return Err(Error::Config(format!("{name}: batch, patch, epochs and patches_per_epoch must be positive")));
            }
            if ph.patch % s != 0 {
                return Err(Error::Config(format!(
                    "{name}.patch {} is not divisible by the training stride {s}",
                    ph.patch
                )));
            }
            if ph.patch / s < min_side {
                return Err(Error::Config(format!(
                    "{name}.patch {} gives {}-pixel sub-samples; the network needs at least {min_side}",
                    ph.patch,
                    ph.patch / s
                )));
            }
        }
        Ok(())
    }
}

/// Images with ground truth (when known), loaded and noised.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub names: Vec<String>,
    pub noisy: Vec<ImageGrid>,
    pub clean: Option<Vec<ImageGrid>>,
}

fn load_source(src: &DataSource, grayscale: bool) -> Result<(Dataset, Option<NoiseSpec>)> {
    let channels = if grayscale { 1 } else { 3 };
    let (ds, noise) = match src {
        DataSource::Folder { path, clean } => (Dataset::load(path, clean.as_deref())?, None),
        DataSource::CleanFolder { path, noise } => {
            let ds = Dataset::load(path, None)?;
            let clean = Some(ds.images.clone());
            (Dataset::new(ds.names, ds.images, clean)?, Some(*noise))
        }
        DataSource::Synthetic {
            count,
            height,
            width,
            noise,
            scene_seed,
            first_index,
        } => (
            synthetic_set(*count, *height, *width, channels, *scene_seed, *first_index),
            Some(*noise),
        ),
    };
    Ok((if grayscale { ds.to_gray() } else { ds }, noise))
}

/// Loads a validation or test set; synthetic noise is drawn once, from a
/// stream of its own, regardless of the configured seed mode.
pub fn load_eval_set(src: &DataSource, grayscale: bool, master_seed: u64) -> Result<EvalSet> {
    let (ds, noise) = load_source(src, grayscale)?;
    let noisy = match noise {
        None => ds.images.clone(),
        Some(spec) => {
            let spec = NoiseSpec {
                seed_mode: SeedMode::Fixed,
                ..spec
            };
            let s = seed::derive_seed(master_seed, &[tag::NOISE, EVAL_ROLE]);
            ds.clean
                .as_ref()
                .expect("synthetic sources keep their clean images")
                .iter()
                .enumerate()
                .map(|(i, c)| add_noise(c, &spec, i as u64, 0, s))
                .collect::<Result<_>>()?
        }
    };
    Ok(EvalSet {
        names: ds.names,
        noisy,
        clean: ds.clean,
    })
}

const TRAIN_ROLE: u64 = 0;
const EVAL_ROLE: u64 = 1;

enum TrainImages {
    Static(Vec<ImageGrid>),
    Noised {
        clean: Vec<ImageGrid>,
        spec: NoiseSpec,
        seed: u64,
        cache: Option<(u64, Vec<ImageGrid>)>,
    },
}

impl TrainImages {
    fn min_side(&self) -> usize {
        let imgs = match self {
            TrainImages::Static(v) => v,
            TrainImages::Noised { clean, .. } => clean,
        };
        imgs.iter().map(|i| i.height().min(i.width())).min().unwrap_or(0)
    }

    fn channels(&self) -> usize {
        match self {
            TrainImages::Static(v) => v[0].channels(),
            TrainImages::Noised { clean, .. } => clean[0].channels(),
        }
    }

    /// Noisy training images for a global epoch index.
    fn for_epoch(&mut self, epoch: u64) -> Result<&[ImageGrid]> {
        match self {
            TrainImages::Static(v) => Ok(v),
            TrainImages::Noised { clean, spec, seed, cache } => {
                let key = match spec.seed_mode {
                    SeedMode::Fixed => 0,
                    SeedMode::PerEpochRandom => epoch,
                };
                if cache.as_ref().is_none_or(|(k, _)| *k != key) {
                    let imgs = clean
                        .iter()
                        .enumerate()
                        .map(|(i, c)| add_noise(c, spec, i as u64, key, *seed))
                        .collect::<Result<Vec<_>>>()?;
                    *cache = Some((key, imgs));
                }
                Ok(&cache.as_ref().expect("filled").1)
            }
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub global_epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub model: Bsn<f32>,
    pub log: Vec<EpochRecord>,
    /// Scores of the final model on the validation set.
    pub validation: Option<QualityReport>,
}

pub struct Trainer {
    config: TrainConfig,
    phases: Vec<Phase>,
    model: Bsn<f32>,
    adam: Adam<f32>,
    train: TrainImages,
    valid: Option<EvalSet>,
    /// Index into `phases` of the phase in progress.
    phase: usize,
    /// Completed epochs of the current phase.
    epoch: usize,
    log: Vec<EpochRecord>,
    last_scores: Option<QualityReport>,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    /// Loads the data and builds a freshly initialised network.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let valid = match &config.validation {
            Some(src) => Some(load_eval_set(src, config.grayscale, config.master_seed)?),
            None => None,
        };
        let train = match config.mode {
            TrainMode::SelfOnTest => TrainImages::Static(valid.as_ref().expect("validated").noisy.clone()),
            TrainMode::Standard => {
                let (ds, noise) = load_source(&config.dataset, config.grayscale)?;
                match noise {
                    None => TrainImages::Static(ds.images),
                    Some(spec) => TrainImages::Noised {
                        clean: ds.images,
                        spec,
                        seed: seed::derive_seed(config.master_seed, &[tag::NOISE, TRAIN_ROLE]),
                        cache: None,
                    },
                }
            }
        };
        let phases = config.phases();
        let max_patch = phases.iter().map(|p| p.patch).max().expect("phase 1");
        if train.min_side() < max_patch {
            return Err(Error::Config(format!(
                "patch {max_patch} does not fit the smallest training image (side {})",
                train.min_side()
            )));
        }
        if let Some(v) = &valid {
            if v.noisy[0].channels() != train.channels() {
                return Err(Error::Config("training and validation images differ in channel count".into()));
            }
        }
        let model = Bsn::new(config.model.bsn_config(train.channels(), config.master_seed))?;
        let mut adam = Adam::new(phases[0].lr, &model);
        adam.beta1 = config.optimizer.beta1;
        adam.beta2 = config.optimizer.beta2;
        adam.eps = config.optimizer.eps;
        Ok(Self {
            config,
            phases,
            model,
            adam,
            train,
            valid,
            phase: 0,
            epoch: 0,
            log: Vec::new(),
            last_scores: None,
            out_dir: None,
        })
    }

    /// Continues from a checkpoint taken by a run with the same config.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        if checkpoint.model.config() != t.model.config() {
            return Err(Error::Checkpoint(format!(
                "checkpoint network {:?} does not match the configured {:?}",
                checkpoint.model.config(),
                t.model.config()
            )));
        }
        let meta = &checkpoint.meta;
        if meta.phase == 0 || meta.phase > t.phases.len() || meta.epoch > t.phases[meta.phase - 1].epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint position phase {} epoch {} is outside the schedule",
                meta.phase, meta.epoch
            )));
        }
        t.phase = meta.phase - 1;
        t.epoch = meta.epoch;
        t.model = checkpoint.model;
        if let Some(adam) = checkpoint.optimizer {
            t.adam = adam;
        }
        Ok(t)
    }

    /// Writes the log, the resolved config and checkpoints under `dir`.
    pub fn with_output(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snapshot = dir.join("train_config.json");
        std::fs::write(&snapshot, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&snapshot, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Bsn<f32> {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.adam
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn validation_set(&self) -> Option<&EvalSet> {
        self.valid.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.phase + 1 == self.phases.len() && self.epoch == self.phases[self.phase].epochs
    }

    fn global_epoch(&self) -> usize {
        self.phases[..self.phase].iter().map(|p| p.epochs).sum::<usize>() + self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.model.clone(),
            TrainingMeta {
                epoch: self.epoch,
                phase: self.phase + 1,
                step: self.adam.step,
                master_seed: self.config.master_seed,
                loss: self.config.loss.label(),
            },
            Some(self.adam.clone()),
        )
    }

    /// One optimizer update on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[ImageGrid], rng: &mut seed::Stream) -> Result<f64> {
        let problem = losses::prepare(batch, &self.config.loss, rng)?;
        let (loss, grads) = losses::evaluate_chunked::<f32, _>(&self.model, &problem, self.config.chunk)?;
        if !loss.is_finite() {
            return Err(Error::Config(format!("loss diverged to {loss} at step {}", self.adam.step)));
        }
        self.adam.apply(&mut self.model, &grads);
        Ok(f64::from(loss))
    }

    fn advance_phase(&mut self) {
        if self.epoch == self.phases[self.phase].epochs && self.phase + 1 < self.phases.len() {
            self.phase += 1;
            self.epoch = 0;
            if self.config.optimizer.reset_between_phases {
                self.adam.reset();
            }
        }
    }

    /// Trains one epoch of the current phase.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.advance_phase();
        if self.is_finished() {
            return Err(Error::Config("training schedule is already complete".into()));
        }
        let start = Instant::now();
        let ph = self.phases[self.phase];
        let global = self.global_epoch() as u64;
        self.adam.lr = ph.lr;
        let key = [ph.index as u64, self.epoch as u64];
        let mut patch_rng = seed::stream(self.config.master_seed, &[tag::PATCH, key[0], key[1]]);
        let mut loss_rng = seed::stream(self.config.master_seed, &[tag::PLAN, key[0], key[1]]);

        let mut total = 0.0;
        let mut steps = 0;
        let mut remaining = ph.patches_per_epoch;
        while remaining > 0 {
            let n = remaining.min(ph.batch);
            remaining -= n;
            let images = self.train.for_epoch(global)?;
            let batch = (0..n)
                .map(|_| sample_dataset_patch(images, ph.patch, &mut patch_rng).map(|(_, p)| p))
                .collect::<Result<Vec<_>>>()?;
            total += self.train_step(&batch, &mut loss_rng)?;
            steps += 1;
        }
        self.epoch += 1;

        let validate_now = match self.config.validate_every {
            0 => self.is_finished(),
            k => self.epoch % k == 0 || self.is_finished(),
        };
        let scores = if validate_now { self.evaluate()? } else { None };
        let record = EpochRecord {
            phase: ph.index,
            epoch: self.epoch,
            global_epoch: global as usize + 1,
            steps,
            loss: total / steps as f64,
            lr: ph.lr,
            psnr: scores.as_ref().map(QualityReport::mean_psnr),
            ssim: scores.as_ref().map(QualityReport::mean_ssim),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "phase {} epoch {}/{}: loss {:.6}{}",
            ph.index,
            self.epoch,
            ph.epochs,
            record.loss,
            record.psnr.map(|p| format!(", val psnr {p:.3} dB")).unwrap_or_default()
        );
        self.persist(&record)?;
        self.log.push(record.clone());
        self.last_scores = scores;
        Ok(record)
    }

    fn persist(&self, record: &EpochRecord) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let log_path = dir.join("train_log.jsonl");
        let mut f = File::options()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&log_path, e))?;
        let ck = self.checkpoint();
        ck.save(dir.join(format!("checkpoint_p{}_e{:03}.safetensors", record.phase, record.epoch)))?;
        if self.is_finished() {
            ck.save(dir.join("final.safetensors"))?;
        }
        Ok(())
    }

    /// Scores the current model on the validation set, when it has clean references.
    pub fn evaluate(&self) -> Result<Option<QualityReport>> {
        match &self.valid {
            Some(v) if v.clean.is_some() => Ok(Some(evaluate_model(
                &self.model,
                v,
                &self.config.inference,
                self.config.ssim_mode,
                self.config.master_seed,
            )?)),
            _ => Ok(None),
        }
    }

    /// Runs every remaining epoch of every phase.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        let validation = match self.last_scores.take() {
            Some(r) => Some(r),
            None => self.evaluate()?,
        };
        Ok(TrainOutcome {
            model: self.model,
            log: self.log,
            validation,
        })
    }
}

/// Denoises every image of `set` with `spec` and scores it against the references.
pub fn evaluate_model(
    model: &Bsn<f32>,
    set: &EvalSet,
    spec: &InferenceSpec,
    ssim_mode: SsimMode,
    master_seed: u64,
) -> Result<QualityReport> {
    let clean = set
        .clean
        .as_ref()
        .ok_or_else(|| Error::Dataset("evaluation needs clean references".into()))?;
    let mut rng = seed::stream(master_seed, &[tag::INFER]);
    let mut report = QualityReport::default();
    for ((name, noisy), reference) in set.names.iter().zip(&set.noisy).zip(clean) {
        let out = inference::run(model, noisy, spec, &mut rng)?;
        report.push(name.clone(), reference, &out, ssim_mode)?;
    }
    Ok(report)
}

/// Trains `config` to completion, writing artifacts under `out_dir` when given.
pub fn train(config: TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config)?;
    let trainer = match out_dir {
        Some(d) => trainer.with_output(d)?,
        None => trainer,
    };
    trainer.run()
}

/// Inference spec that feeds whole images to the network (no sub-sampling).
pub fn direct_inference() -> InferenceSpec {
    InferenceSpec {
        pipeline: Pipeline::Pd,
        stride_test: 1,
        n: 1,
    }
}
