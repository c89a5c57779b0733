//! Self-supervised training losses for the blind-spot network.
//!
//! Every loss reduces to a regression problem: a list of network inputs, a
//! list of equally shaped targets, and an L1 or L2 penalty, averaged over
//! every pixel, channel, sub-sample and batch item.
//!
//! | variant  | input to `B`             | target                        | norm |
//! |----------|--------------------------|-------------------------------|------|
//! | `bsn`    | `y`                      | `y`                           | L2   |
//! | `apbsn`  | `S_i(y)`                 | `S_i(y)`                      | L1   |
//! | `pbsn1`  | `S_i(y) + e`             | `S_i(y)`                      | L1   |
//! | `pbsn2`  | `S_i(y)`                 | `S_i(y) + e`                  | L1   |
//! | `pbsn3`  | `S_i(y) + e1`            | `S_i(y) + e2`                 | L1   |
//! | `sdbsn`  | `S_1(y)`                 | `S_2(y)`                      | L1   |
//! | `csdbsn` | `S_i(y)`, all `i`        | `S_{i+1}(y)`, cyclic          | L1   |
//!
//! `S` is the PD or RSG splitter selected by the spec. Randomness is drawn
//! from three independent streams seeded, in order, from the caller's
//! stream: sampling plans (one per image, in batch order), then input
//! perturbations, then target perturbations. A variant that does not need a
//! stream still consumes its seed, so all variants leave the caller's
//! stream in the same state and `pbsn*` with `sigma_eps = 0` sees the same
//! plans as `apbsn`.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, Gradient};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{Activations, Real};
use crate::sampling::{self, SubsampleStack};
use crate::seed::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Bsn,
    Apbsn,
    Pbsn1,
    Pbsn2,
    Pbsn3,
    Sdbsn,
    Csdbsn,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::Bsn,
        LossVariant::Apbsn,
        LossVariant::Pbsn1,
        LossVariant::Pbsn2,
        LossVariant::Pbsn3,
        LossVariant::Sdbsn,
        LossVariant::Csdbsn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Bsn => "bsn",
            LossVariant::Apbsn => "apbsn",
            LossVariant::Pbsn1 => "pbsn1",
            LossVariant::Pbsn2 => "pbsn2",
            LossVariant::Pbsn3 => "pbsn3",
            LossVariant::Sdbsn => "sdbsn",
            LossVariant::Csdbsn => "csdbsn",
        }
    }

    pub fn is_perturbed(self) -> bool {
        matches!(self, LossVariant::Pbsn1 | LossVariant::Pbsn2 | LossVariant::Pbsn3)
    }

    /// Whether the variant splits images into sub-samples at all.
    pub fn uses_sampling(self) -> bool {
        self != LossVariant::Bsn
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Pd,
    Rsg,
}

impl Sampler {
    pub fn name(self) -> &'static str {
        match self {
            Sampler::Pd => "pd",
            Sampler::Rsg => "rsg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub variant: LossVariant,
    pub stride: usize,
    /// Perturbation std in 0-255 units; only read by the `pbsn*` variants.
    #[serde(default)]
    pub sigma_eps: f64,
    pub sampler: Sampler,
}

impl LossSpec {
    pub fn new(variant: LossVariant, stride: usize, sampler: Sampler) -> Self {
        Self {
            variant,
            stride,
            sigma_eps: 0.0,
            sampler,
        }
    }

    pub fn with_sigma_eps(mut self, sigma_eps: f64) -> Self {
        self.sigma_eps = sigma_eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > sampling::MAX_STRIDE {
            return Err(Error::Config(format!("loss stride {} out of range", self.stride)));
        }
        if !(self.sigma_eps.is_finite() && self.sigma_eps >= 0.0) {
            return Err(Error::Config(format!(
                "sigma_eps must be finite and >= 0, got {}",
                self.sigma_eps
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut s = format!("{}-{}-s{}", self.variant, self.sampler.name(), self.stride);
        if self.variant.is_perturbed() {
            s.push_str(&format!("-eps{}", self.sigma_eps));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

/// Network inputs and targets for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossProblem {
    pub inputs: Vec<ImageGrid>,
    pub targets: Vec<ImageGrid>,
    pub norm: Norm,
}

impl LossProblem {
    pub fn element_count(&self) -> usize {
        self.inputs.iter().map(|i| i.as_slice().len()).sum()
    }
}

/// Splits `img` with the configured sampler, drawing an RSG plan from `rng` when needed.
pub fn split(img: &ImageGrid, sampler: Sampler, stride: usize, rng: &mut impl Rng) -> Result<SubsampleStack> {
    match sampler {
        Sampler::Pd => sampling::pd_split(img, stride),
        Sampler::Rsg => {
            let grid = sampling::grid_shape_for(img, stride)?;
            let plan = sampling::make_rsg_plan(stride, grid, rng)?;
            sampling::rsg_split(img, &plan)
        }
    }
}

fn perturb(img: &ImageGrid, std: f32, rng: &mut impl Rng) -> ImageGrid {
    if std == 0.0 {
        return img.clone();
    }
    img.map(|v| v + std * rng.sample::<f32, _>(StandardNormal))
}

/// Builds the regression problem, drawing all randomness from `rng`.
pub fn prepare(batch: &[ImageGrid], spec: &LossSpec, rng: &mut impl Rng) -> Result<LossProblem> {
    let mut plan_rng = Stream::seed_from_u64(rng.random());
    let mut eps_in = Stream::seed_from_u64(rng.random());
    let mut eps_target = Stream::seed_from_u64(rng.random());
    prepare_with_streams(batch, spec, &mut plan_rng, &mut eps_in, &mut eps_target)
}

/// [`prepare`] with explicit streams for plans, input perturbations and
/// target perturbations.
pub fn prepare_with_streams(
    batch: &[ImageGrid],
    spec: &LossSpec,
    plan_rng: &mut impl Rng,
    eps_input_rng: &mut impl Rng,
    eps_target_rng: &mut impl Rng,
) -> Result<LossProblem> {
    spec.validate()?;
    let first = batch.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    for img in batch {
        first.ensure_same_shape(img)?;
    }

    if spec.variant == LossVariant::Bsn {
        return Ok(LossProblem {
            inputs: batch.to_vec(),
            targets: batch.to_vec(),
            norm: Norm::L2,
        });
    }

    let std = (spec.sigma_eps / 255.0) as f32;
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for img in batch {
        let stack = split(img, spec.sampler, spec.stride, plan_rng)?;
        let subs = stack.subs;
        let n = subs.len();
        match spec.variant {
            LossVariant::Bsn => unreachable!(),
            LossVariant::Apbsn => {
                inputs.extend(subs.iter().cloned());
                targets.extend(subs);
            }
            LossVariant::Pbsn1 => {
                inputs.extend(subs.iter().map(|s| perturb(s, std, eps_input_rng)));
                targets.extend(subs);
            }
            LossVariant::Pbsn2 => {
                inputs.extend(subs.iter().cloned());
                targets.extend(subs.iter().map(|s| perturb(s, std, eps_target_rng)));
            }
            LossVariant::Pbsn3 => {
                inputs.extend(subs.iter().map(|s| perturb(s, std, eps_input_rng)));
                targets.extend(subs.iter().map(|s| perturb(s, std, eps_target_rng)));
            }
            LossVariant::Sdbsn => {
                inputs.push(subs[0].clone());
                targets.push(subs[1 % n].clone());
            }
            LossVariant::Csdbsn => {
                for i in 0..n {
                    inputs.push(subs[i].clone());
                    targets.push(subs[(i + 1) % n].clone());
                }
            }
        }
    }
    Ok(LossProblem {
        inputs,
        targets,
        norm: Norm::L1,
    })
}

/// Default number of network inputs per forward/backward micro-batch.
pub const DEFAULT_CHUNK: usize = 64;

fn chunk_head<T: Real>(
    out: &Activations<T>,
    target: &Activations<T>,
    norm: Norm,
    total: usize,
) -> Result<(T, Activations<T>)> {
    if !out.same_shape(target) {
        return Err(Error::Shape("network output does not match target".into()));
    }
    let scale = T::one() / T::from_usize(total).expect("count");
    let mut grad = Activations::zeros(out.channels, out.batch, out.height, out.width);
    let mut sum = T::zero();
    for ((g, &o), &t) in grad.data.iter_mut().zip(&out.data).zip(&target.data) {
        let d = o - t;
        match norm {
            Norm::L1 => {
                sum = sum + d.abs();
                *g = if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                };
            }
            Norm::L2 => {
                sum = sum + d * d;
                *g = (d + d) * scale;
            }
        }
    }
    Ok((sum * scale, grad))
}

/// Loss value and parameter gradient, processing `chunk` inputs at a time.
pub fn evaluate_chunked<T: Real, D: Denoiser<T>>(
    model: &D,
    problem: &LossProblem,
    chunk: usize,
) -> Result<(T, D::Grad)> {
    let n = problem.inputs.len();
    if n == 0 || n != problem.targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs vs {} targets",
            n,
            problem.targets.len()
        )));
    }
    for (i, t) in problem.inputs.iter().zip(&problem.targets) {
        i.ensure_same_shape(t)?;
    }
    let total = problem.element_count();
    let chunk = chunk.max(1);
    let mut value = T::zero();
    let mut grad: Option<D::Grad> = None;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let x = Activations::<T>::from_images(&problem.inputs[start..end])?;
        let target = Activations::<T>::from_images(&problem.targets[start..end])?;
        let norm = problem.norm;
        let (v, g) = model.value_and_grad(&x, Box::new(move |out| chunk_head(out, &target, norm, total)))?;
        value = value + v;
        match grad.as_mut() {
            Some(acc) => acc.accumulate(g),
            None => grad = Some(g),
        }
    }
    Ok((value, grad.expect("at least one chunk")))
}

pub fn evaluate<T: Real, D: Denoiser<T>>(model: &D, problem: &LossProblem) -> Result<(T, D::Grad)> {
    evaluate_chunked(model, problem, DEFAULT_CHUNK)
}

/// Loss value only (forward passes, no gradient).
pub fn value<T: Real, D: Denoiser<T>>(model: &D, problem: &LossProblem) -> Result<T> {
    let n = problem.inputs.len();
    if n == 0 || n != problem.targets.len() {
        return Err(Error::Shape("inputs and targets differ in count".into()));
    }
    let total = problem.element_count();
    let mut value = T::zero();
    for start in (0..n).step_by(DEFAULT_CHUNK) {
        let end = (start + DEFAULT_CHUNK).min(n);
        let x = Activations::<T>::from_images(&problem.inputs[start..end])?;
        let target = Activations::<T>::from_images(&problem.targets[start..end])?;
        let out = model.denoise(&x)?;
        value = value + chunk_head(&out, &target, problem.norm, total)?.0;
    }
    Ok(value)
}

/// Draws the randomness for `spec` and returns the loss and gradient.
pub fn loss_and_grad<T: Real, D: Denoiser<T>>(
    model: &D,
    batch: &[ImageGrid],
    spec: &LossSpec,
    rng: &mut impl Rng,
) -> Result<(T, D::Grad)> {
    evaluate(model, &prepare(batch, spec, rng)?)
}

fn with_variant(spec: &LossSpec, variant: LossVariant) -> LossSpec {
    LossSpec { variant, ..*spec }
}

/// Mean squared error between `B(y)` and `y`.
pub fn l_bsn<T: Real, D: Denoiser<T>>(model: &D, batch: &[ImageGrid], spec: &LossSpec, rng: &mut impl Rng) -> Result<(T, D::Grad)> {
    loss_and_grad(model, batch, &with_variant(spec, LossVariant::Bsn), rng)
}

/// Mean absolute error between `B(S_i(y))` and `S_i(y)` over all sub-samples.
pub fn l_apbsn<T: Real, D: Denoiser<T>>(model: &D, batch: &[ImageGrid], spec: &LossSpec, rng: &mut impl Rng) -> Result<(T, D::Grad)> {
    loss_and_grad(model, batch, &with_variant(spec, LossVariant::Apbsn), rng)
}

/// Perturbed variants; `which` selects 1 (input), 2 (target) or 3 (both).
pub fn l_pbsn<T: Real, D: Denoiser<T>>(
    model: &D,
    batch: &[ImageGrid],
    spec: &LossSpec,
    which: u8,
    rng: &mut impl Rng,
) -> Result<(T, D::Grad)> {
    let variant = match which {
        1 => LossVariant::Pbsn1,
        2 => LossVariant::Pbsn2,
        3 => LossVariant::Pbsn3,
        other => return Err(Error::Config(format!("no perturbation variant {other}"))),
    };
    loss_and_grad(model, batch, &with_variant(spec, variant), rng)
}

/// Mean absolute error between `B(S_1(y))` and `S_2(y)`.
pub fn l_sdbsn<T: Real, D: Denoiser<T>>(model: &D, batch: &[ImageGrid], spec: &LossSpec, rng: &mut impl Rng) -> Result<(T, D::Grad)> {
    loss_and_grad(model, batch, &with_variant(spec, LossVariant::Sdbsn), rng)
}

/// Cyclic cross-pairing: `B(S_i(y))` against `S_{i+1}(y)` with wraparound.
pub fn l_csdbsn<T: Real, D: Denoiser<T>>(model: &D, batch: &[ImageGrid], spec: &LossSpec, rng: &mut impl Rng) -> Result<(T, D::Grad)> {
    loss_and_grad(model, batch, &with_variant(spec, LossVariant::Csdbsn), rng)
}
