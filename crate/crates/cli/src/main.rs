//! `sdap`: train, run and evaluate blind-spot denoisers from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sdap::dataset::list_images;
use sdap::experiments;
use sdap::image::{load_image, save_image};
use sdap::inference::{self, InferenceSpec};
use sdap::losses::{LossVariant, Sampler};
use sdap::metrics::{QualityReport, SsimMode};
use sdap::nn::{blind_spot_audit, Bsn, Checkpoint};
use sdap::sampling;
use sdap::seed::{self, tag};
use sdap::trainer::{ModelSpec, TrainConfig, Trainer};
use sdap::ImageGrid;

use config::{resolve, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "sdap", version, about = "Self-supervised blind-spot denoising")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON config file layered over the built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to runs/<command>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixed reduction order everywhere (always the case on this backend)
    #[arg(long, global = true)]
    deterministic: bool,
    /// Config override `dotted.key=value`; repeatable, applied last
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network (two-phase schedule)
    Train {
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise an image or a directory of images
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file or directory
        #[arg(long)]
        input: PathBuf,
        /// pd, pd_enhance, nrsg or nrsg_enhance
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long)]
        stride: Option<usize>,
        /// Number of RSG passes
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Score images against clean references (optionally denoising first)
    Eval {
        /// Directory of images to score (noisy or already denoised)
        #[arg(long)]
        input: PathBuf,
        /// Directory of clean references with the same file names
        #[arg(long)]
        clean: PathBuf,
        /// Denoise the inputs with this checkpoint before scoring
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(short, long)]
        n: Option<usize>,
        /// Compute SSIM on luma instead of averaging RGB channels
        #[arg(long)]
        luma: bool,
    },
    /// 2x2 ablation over {pd, rsg} x {apbsn, csdbsn}
    Ablate,
    /// Fixed versus per-epoch noise realisations with the plain blind-spot loss
    SeedExp {
        /// Noise level in 0-255 units
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
    },
    /// Perturbation sweep over variants, noise levels and both samplers
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "pbsn1,pbsn2,pbsn3")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20,25")]
        sigmas: Vec<f64>,
    },
    /// Audit the blind-spot property of a checkpoint or a fresh network
    CheckBsn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Audit a network without centre masking (negative control)
        #[arg(long, hide = true)]
        unmasked: bool,
    },
    /// Dump the sub-samples of an image and verify the inverse
    SampleDebug {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stride: Option<usize>,
        /// Use a random shuffle plan instead of plain downsampling
        #[arg(long)]
        rsg: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Denoise { .. } => "denoise",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::SeedExp { .. } => "seed-exp",
            Command::Sweep { .. } => "sweep",
            Command::CheckBsn { .. } => "check-bsn",
            Command::SampleDebug { .. } => "sample-debug",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferConfig {
    inference: InferenceSpec,
    seed: u64,
    ssim_mode: SsimMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditConfig {
    model: ModelSpec,
    in_channels: usize,
    trials: usize,
    size: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleConfig {
    stride: usize,
    sampler: Sampler,
    seed: u64,
}

struct Ctx {
    global: Global,
    out: PathBuf,
}

impl Ctx {
    /// Resolves a config, applying `--seed` to `seed_key` last.
    fn resolve<T: Serialize + serde::de::DeserializeOwned>(
        &self,
        defaults: &T,
        seed_key: &str,
        extra: Vec<String>,
    ) -> Result<T, ConfigError> {
        let mut overrides = self.global.overrides.clone();
        overrides.extend(extra);
        if let Some(s) = self.global.seed {
            overrides.push(format!("{seed_key}={s}"));
        }
        resolve(defaults, self.global.config.as_deref(), &overrides)
    }

    /// Writes the resolved config next to the outputs.
    fn snapshot<T: Serialize>(&self, config: &T) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(config)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn inference_overrides(pipeline: &Option<String>, stride: Option<usize>, n: Option<usize>) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(p) = pipeline {
        v.push(format!("inference.pipeline=\"{p}\""));
    }
    if let Some(s) = stride {
        v.push(format!("inference.stride_test={s}"));
    }
    if let Some(n) = n {
        v.push(format!("inference.n={n}"));
    }
    v
}

fn infer_defaults() -> InferConfig {
    InferConfig {
        inference: InferenceSpec::default(),
        seed: 0,
        ssim_mode: SsimMode::ChannelMean,
    }
}

fn inputs_of(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_dir() {
        let files = list_images(path)?;
        if files.is_empty() {
            bail!("no images found in {}", path.display());
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn load_model(path: &Path) -> anyhow::Result<Bsn<f32>> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.model)
}

/// Runs the configured pipeline, converting channels to the network's.
fn denoise_one(model: &Bsn<f32>, img: &ImageGrid, cfg: &InferConfig, rng: &mut seed::Stream) -> anyhow::Result<ImageGrid> {
    let x = img.with_channels(model.config().in_channels)?;
    Ok(inference::run(model, &x, &cfg.inference, rng)?)
}

fn cmd_train(ctx: &Ctx, resume: &Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = ctx.resolve(&TrainConfig::desk(), "master_seed", vec![])?;
    ctx.snapshot(&cfg)?;
    let trainer = match resume {
        Some(p) => Trainer::resume(cfg, Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let outcome = trainer.with_output(&ctx.out)?.run()?;
    if let Some(last) = outcome.log.last() {
        println!("final training loss {:.6}", last.loss);
    }
    if let Some(v) = &outcome.validation {
        println!("validation PSNR {:.3} dB, SSIM {:.4}", v.mean_psnr(), v.mean_ssim());
    }
    println!("checkpoint: {}", ctx.out.join("final.safetensors").display());
    Ok(())
}

fn cmd_denoise(ctx: &Ctx, checkpoint: &Path, input: &Path, extra: Vec<String>) -> anyhow::Result<()> {
    let cfg = ctx.resolve(&infer_defaults(), "seed", extra)?;
    cfg.inference.validate()?;
    ctx.snapshot(&cfg)?;
    let model = load_model(checkpoint)?;
    let mut rng = seed::stream(cfg.seed, &[tag::INFER]);
    for file in inputs_of(input)? {
        let out = denoise_one(&model, &load_image(&file)?, &cfg, &mut rng)?;
        let name = file.file_stem().unwrap_or_default().to_string_lossy();
        let dest = ctx.out.join(format!("{name}.png"));
        save_image(&out, &dest)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, input: &Path, clean: &Path, checkpoint: &Option<PathBuf>, luma: bool, extra: Vec<String>) -> anyhow::Result<()> {
    let mut extra = extra;
    if luma {
        extra.push("ssim_mode=\"luma\"".into());
    }
    let cfg = ctx.resolve(&infer_defaults(), "seed", extra)?;
    cfg.inference.validate()?;
    ctx.snapshot(&cfg)?;
    let model = checkpoint.as_deref().map(load_model).transpose()?;
    let mut rng = seed::stream(cfg.seed, &[tag::INFER]);
    let mut report = QualityReport::default();
    for file in inputs_of(input)? {
        let name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let reference = clean.join(&name);
        if !reference.is_file() {
            bail!("no clean reference {} for {name}", reference.display());
        }
        let reference = load_image(&reference)?;
        let mut test = load_image(&file)?;
        if let Some(m) = &model {
            test = denoise_one(m, &test, &cfg, &mut rng)?;
        }
        let test = test.with_channels(reference.channels())?;
        report.push(name, &reference, &test, cfg.ssim_mode)?;
    }
    let csv = ctx.out.join("metrics.csv");
    report.write_csv(&csv)?;
    println!(
        "{} images: mean PSNR {:.3} dB, mean SSIM {:.4} ({})",
        report.images.len(),
        report.mean_psnr(),
        report.mean_ssim(),
        csv.display()
    );
    Ok(())
}

fn finish_report(ctx: &Ctx, report: &experiments::ExperimentReport) -> anyhow::Result<()> {
    report.write(&ctx.out)?;
    print!("{}", report.summary);
    println!("report: {}", ctx.out.join("report.csv").display());
    Ok(())
}

fn cmd_experiment(ctx: &Ctx, command: &Command) -> anyhow::Result<()> {
    let cfg = ctx.resolve(&TrainConfig::desk(), "master_seed", vec![])?;
    cfg.validate()?;
    ctx.snapshot(&cfg)?;
    let report = match command {
        Command::Ablate => experiments::run_ablation(&cfg, Some(&ctx.out))?,
        Command::SeedExp { sigma } => experiments::run_seed_experiment(&cfg, *sigma, Some(&ctx.out))?,
        Command::Sweep { variants, sigmas } => {
            let variants = variants
                .iter()
                .map(|v| v.trim().parse::<LossVariant>())
                .collect::<sdap::Result<Vec<_>>>()
                .map_err(|e| ConfigError(e.to_string()))?;
            experiments::run_perturbation_sweep(&cfg, &variants, sigmas, Some(&ctx.out))?
        }
        _ => unreachable!("not an experiment"),
    };
    finish_report(ctx, &report)
}

fn cmd_check_bsn(ctx: &Ctx, checkpoint: &Option<PathBuf>, unmasked: bool) -> anyhow::Result<bool> {
    let defaults = AuditConfig {
        model: ModelSpec::tiny(),
        in_channels: 1,
        trials: 100,
        size: 32,
        seed: 0,
    };
    let cfg = ctx.resolve(&defaults, "seed", vec![])?;
    ctx.snapshot(&cfg)?;
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let bsn = cfg.model.bsn_config(cfg.in_channels, cfg.seed);
            if unmasked {
                Bsn::new_unmasked(bsn)?
            } else {
                Bsn::new(bsn)?
            }
        }
    };
    let mut rng = seed::stream(cfg.seed, &[tag::INFER]);
    let report = blind_spot_audit(&model, cfg.trials, cfg.size, &mut rng)?;
    std::fs::write(ctx.out.join("audit.json"), serde_json::to_string_pretty(&report)?)?;
    if report.passed() {
        println!("blind-spot audit: PASS (max deviation 0)");
        Ok(true)
    } else {
        let w = report.worst.expect("failed audit has a worst trial");
        println!(
            "blind-spot audit: FAIL (max deviation {:e} at pixel ({}, {}) channel {}, delta {})",
            report.max_deviation, w.row, w.col, w.channel, w.delta
        );
        Ok(false)
    }
}

fn cmd_sample_debug(ctx: &Ctx, input: &Path, stride: Option<usize>, rsg: bool) -> anyhow::Result<bool> {
    let mut extra = Vec::new();
    if let Some(s) = stride {
        extra.push(format!("stride={s}"));
    }
    if rsg {
        extra.push("sampler=\"rsg\"".into());
    }
    let defaults = SampleConfig {
        stride: 2,
        sampler: Sampler::Pd,
        seed: 0,
    };
    let cfg = ctx.resolve(&defaults, "seed", extra)?;
    ctx.snapshot(&cfg)?;
    let img = load_image(input)?;
    let (padded, crop) = sampling::pad_to_multiple(&img, cfg.stride)?;
    let mut rng = seed::stream(cfg.seed, &[tag::PLAN]);
    let stack = sdap::losses::split(&padded, cfg.sampler, cfg.stride, &mut rng)?;
    let width = (stack.len() - 1).to_string().len();
    for (k, sub) in stack.subs.iter().enumerate() {
        save_image(sub, ctx.out.join(format!("sub_{k:0width$}.png")))?;
    }
    let in_memory = crop.apply(&sampling::rsg_merge(&stack)?)? == img;
    let reloaded = stack
        .subs
        .iter()
        .enumerate()
        .map(|(k, _)| load_image(ctx.out.join(format!("sub_{k:0width$}.png"))))
        .collect::<sdap::Result<Vec<_>>>()?;
    let from_files = crop.apply(&sampling::rsg_merge(&stack.with_subs(reloaded)?)?)? == img;
    let report = serde_json::json!({
        "input": input.display().to_string(),
        "stride": cfg.stride,
        "sampler": cfg.sampler.name(),
        "sub_samples": stack.len(),
        "padding": [crop.pad_rows, crop.pad_cols],
        "round_trip_exact": in_memory,
        "round_trip_from_png_exact": from_files,
    });
    std::fs::write(ctx.out.join("round_trip.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "wrote {} sub-samples; round trip {}",
        stack.len(),
        if in_memory && from_files { "exact" } else { "MISMATCH" }
    );
    Ok(in_memory && from_files)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let ctx = Ctx { global: cli.global, out };
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match &cli.command {
        Command::Train { resume } => cmd_train(&ctx, resume).map(|_| true),
        Command::Denoise {
            checkpoint,
            input,
            pipeline,
            stride,
            n,
        } => cmd_denoise(&ctx, checkpoint, input, inference_overrides(pipeline, *stride, *n)).map(|_| true),
        Command::Eval {
            input,
            clean,
            checkpoint,
            pipeline,
            stride,
            n,
            luma,
        } => cmd_eval(&ctx, input, clean, checkpoint, *luma, inference_overrides(pipeline, *stride, *n)).map(|_| true),
        c @ (Command::Ablate | Command::SeedExp { .. } | Command::Sweep { .. }) => cmd_experiment(&ctx, c).map(|_| true),
        Command::CheckBsn { checkpoint, unmasked } => cmd_check_bsn(&ctx, checkpoint, *unmasked),
        Command::SampleDebug { input, stride, rsg } => cmd_sample_debug(&ctx, input, *stride, *rsg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let usage = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<sdap::Error>(), Some(sdap::Error::Config(_)));
            eprintln!("error: {e:#}");
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
