//! Experiment harnesses: noise-seed comparison, perturbation sweep and the
//! sampler/loss ablation. Each trains one model per cell from a shared base
//! config and scores it on the base config's validation set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossSpec, LossVariant, Sampler};
use crate::nn::Bsn;
use crate::noise::{NoiseKind, SeedMode};
use crate::trainer::{direct_inference, train, TrainConfig};

/// Outcome of one trained cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub loss: String,
    pub seed_mode: Option<SeedMode>,
    pub psnr: f64,
    pub ssim: f64,
    pub final_loss: f64,
    pub checkpoint: Option<PathBuf>,
    #[serde(skip)]
    pub model: Option<Bsn<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub cells: Vec<CellResult>,
    pub summary: String,
}

impl ExperimentReport {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// Writes `report.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["cell", "loss", "seed_mode", "psnr", "ssim", "final_train_loss", "checkpoint"])?;
        for c in &self.cells {
            w.write_record([
                c.name.clone(),
                c.loss.clone(),
                c.seed_mode.map(|m| format!("{m:?}")).unwrap_or_default(),
                format!("{:.4}", c.psnr),
                format!("{:.6}", c.ssim),
                format!("{:.6}", c.final_loss),
                c.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let summary = dir.join("summary.txt");
        std::fs::write(&summary, &self.summary).map_err(|e| Error::io(&summary, e))
    }
}

/// Trains each named config and collects its validation scores.
pub fn run_cells(experiment: &str, cells: Vec<(String, TrainConfig)>, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    let mut results = Vec::with_capacity(cells.len());
    for (name, config) in cells {
        if config.validation.is_none() {
            return Err(Error::Config(format!("{experiment}: cell `{name}` has no validation set")));
        }
        log::info!("{experiment}: training cell {name}");
        let dir = out_dir.map(|d| d.join(&name));
        let seed_mode = config.dataset.noise().map(|n| n.seed_mode);
        let loss = config.loss.label();
        let out = train(config, dir.as_deref())?;
        let scores = out
            .validation
            .ok_or_else(|| Error::Dataset(format!("{experiment}: validation set of `{name}` has no clean references")))?;
        results.push(CellResult {
            name,
            loss,
            seed_mode,
            psnr: scores.mean_psnr(),
            ssim: scores.mean_ssim(),
            final_loss: out.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
            checkpoint: dir.map(|d| d.join("final.safetensors")),
            model: Some(out.model),
        });
    }
    let mut summary = String::new();
    for c in &results {
        let _ = writeln!(summary, "{:<32} PSNR {:>8.3} dB  SSIM {:.4}", c.name, c.psnr, c.ssim);
    }
    Ok(ExperimentReport {
        experiment: experiment.to_string(),
        cells: results,
        summary,
    })
}

pub const SEED_FIXED: &str = "fixed";
pub const SEED_RANDOM: &str = "per_epoch_random";

/// Trains the plain blind-spot loss twice on AWGN of level `sigma`: once
/// with one noise realisation reused every epoch, once with fresh noise per
/// epoch. Both arms are scored by feeding whole images to the network.
pub fn run_seed_experiment(base: &TrainConfig, sigma: f64, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    if base.dataset.noise().is_none() {
        return Err(Error::Config("the seed experiment needs clean training images with synthetic noise".into()));
    }
    let mut cells = Vec::new();
    for (name, mode) in [(SEED_FIXED, SeedMode::Fixed), (SEED_RANDOM, SeedMode::PerEpochRandom)] {
        let mut c = base.clone();
        c.loss = LossSpec::new(LossVariant::Bsn, 1, Sampler::Pd);
        c.inference = direct_inference();
        let noise = c.dataset.noise_mut().expect("checked");
        noise.kind = NoiseKind::Awgn;
        noise.sigma = sigma;
        noise.seed_mode = mode;
        if let Some(n) = c.validation.as_mut().and_then(|v| v.noise_mut()) {
            n.kind = NoiseKind::Awgn;
            n.sigma = sigma;
        }
        cells.push((name.to_string(), c));
    }
    let mut report = run_cells("seed-exp", cells, out_dir)?;
    let gap = report.cells[1].psnr - report.cells[0].psnr;
    let _ = writeln!(report.summary, "per-epoch noise minus fixed noise: {gap:+.3} dB");
    Ok(report)
}

pub fn sweep_cell_name(variant: LossVariant, sampler: Sampler, sigma_eps: f64) -> String {
    format!("{}-{}-eps{}", variant, sampler.name(), sigma_eps)
}

/// One run per (variant, sigma_eps, sampler), with the sampler in {pd, rsg}.
pub fn run_perturbation_sweep(
    base: &TrainConfig,
    variants: &[LossVariant],
    sigmas: &[f64],
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    if let Some(v) = variants.iter().find(|v| !v.is_perturbed()) {
        return Err(Error::Config(format!("sweep variant `{v}` is not a perturbation loss")));
    }
    let mut cells = Vec::new();
    for &variant in variants {
        for &sigma_eps in sigmas {
            for sampler in [Sampler::Pd, Sampler::Rsg] {
                let mut c = base.clone();
                c.loss = LossSpec {
                    variant,
                    sampler,
                    sigma_eps,
                    stride: base.loss.stride,
                };
                cells.push((sweep_cell_name(variant, sampler, sigma_eps), c));
            }
        }
    }
    run_cells("sweep", cells, out_dir)
}

pub fn ablation_cell_name(sampler: Sampler, variant: LossVariant) -> String {
    format!("{}+{}", sampler.name(), variant)
}

/// The 2x2 grid {pd, rsg} x {apbsn, csdbsn} at the base config's stride.
pub fn run_ablation(base: &TrainConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    let mut cells = Vec::new();
    for variant in [LossVariant::Apbsn, LossVariant::Csdbsn] {
        for sampler in [Sampler::Pd, Sampler::Rsg] {
            let mut c = base.clone();
            c.loss = LossSpec::new(variant, base.loss.stride, sampler);
            cells.push((ablation_cell_name(sampler, variant), c));
        }
    }
    let mut report = run_cells("ablate", cells, out_dir)?;
    let psnr = |s, v| report.cell(&ablation_cell_name(s, v)).map(|c| c.psnr).unwrap_or(f64::NAN);
    let gain = psnr(Sampler::Rsg, LossVariant::Csdbsn) - psnr(Sampler::Pd, LossVariant::Apbsn);
    let _ = writeln!(report.summary, "rsg+csdbsn minus pd+apbsn: {gain:+.3} dB");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSpec;
    use crate::trainer::{DataSource, PhaseConfig};

    fn base() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.model.base_channels = 4;
        c.model.blocks_per_branch = 1;
        c.phase1 = PhaseConfig {
            lr: Some(1e-3),
            batch: 2,
            patch: 16,
            epochs: 1,
            patches_per_epoch: Some(2),
        };
        c.dataset = DataSource::Synthetic {
            count: 2,
            height: 16,
            width: 16,
            noise: NoiseSpec::awgn(25.0, SeedMode::Fixed),
            scene_seed: 0,
            first_index: 0,
        };
        c.validation = Some(DataSource::Synthetic {
            count: 1,
            height: 16,
            width: 16,
            noise: NoiseSpec::awgn(25.0, SeedMode::Fixed),
            scene_seed: 0,
            first_index: 50,
        });
        c
    }

    #[test]
    fn sweep_has_one_cell_per_combination() {
        let variants = [LossVariant::Pbsn1, LossVariant::Pbsn3];
        let r = run_perturbation_sweep(&base(), &variants, &[0.0, 5.0, 10.0], None).unwrap();
        assert_eq!(r.cells.len(), 2 * 3 * 2);
        assert!(r.cells.iter().all(|c| c.psnr.is_finite()));
        assert!(run_perturbation_sweep(&base(), &[LossVariant::Apbsn], &[0.0], None).is_err());
    }

    #[test]
    fn ablation_writes_checkpoints_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_ablation(&base(), Some(dir.path())).unwrap();
        assert_eq!(r.cells.len(), 4);
        for c in &r.cells {
            assert!(c.checkpoint.as_ref().unwrap().is_file());
            assert!(c.psnr.is_finite() && c.ssim.is_finite());
        }
        r.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn zero_sigma_seed_arms_coincide() {
        let r = run_seed_experiment(&base(), 0.0, None).unwrap();
        assert_eq!(r.cells[0].model, r.cells[1].model);
        assert_eq!(r.cells[0].psnr, r.cells[1].psnr);
    }

    #[test]
    fn seed_experiment_needs_synthetic_noise() {
        let mut c = base();
        c.dataset = DataSource::Folder {
            path: "x".into(),
            clean: None,
        };
        assert!(run_seed_experiment(&c, 25.0, None).is_err());
    }
}
