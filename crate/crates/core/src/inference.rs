//! Test-time pipelines: PD stitching, the enhancement pass and n-RSG averaging.
//!
//! Every pipeline pads the input by edge mirroring to a multiple of the
//! stride, denoises all sub-samples in one batch, merges, crops back and
//! clips to [0, 1]. Clipping happens after every stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoise_images, Denoiser};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::sampling::{self, SamplingPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Pd,
    PdEnhance,
    Nrsg,
    NrsgEnhance,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Pd => "pd",
            Pipeline::PdEnhance => "pd_enhance",
            Pipeline::Nrsg => "nrsg",
            Pipeline::NrsgEnhance => "nrsg_enhance",
        }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Pipeline::Pd, Pipeline::PdEnhance, Pipeline::Nrsg, Pipeline::NrsgEnhance]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSpec {
    pub pipeline: Pipeline,
    #[serde(default = "default_stride")]
    pub stride_test: usize,
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_stride() -> usize {
    2
}

fn default_n() -> usize {
    1
}

impl Default for InferenceSpec {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Pd,
            stride_test: default_stride(),
            n: default_n(),
        }
    }
}

impl InferenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride_test == 0 || self.stride_test > sampling::MAX_STRIDE {
            return Err(Error::Config(format!("stride_test {} out of range", self.stride_test)));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        Ok(())
    }
}

/// One pass with an explicit plan; the plan must fit the padded image.
pub fn denoise_with_plan<D: Denoiser<f32>>(model: &D, img: &ImageGrid, plan: &SamplingPlan) -> Result<ImageGrid> {
    let (padded, crop) = sampling::pad_to_multiple(img, plan.stride())?;
    let stack = sampling::rsg_split(&padded, plan)?;
    let denoised = stack.with_subs(denoise_images(model, &stack.subs)?)?;
    let mut out = crop.apply(&sampling::rsg_merge(&denoised)?)?;
    out.clip_in_place();
    Ok(out)
}

fn grid_for(img: &ImageGrid, s: usize) -> (usize, usize) {
    (img.height().div_ceil(s), img.width().div_ceil(s))
}

/// Pad, PD split, denoise each sub-image, merge, crop, clip.
pub fn denoise_pd<D: Denoiser<f32>>(model: &D, img: &ImageGrid, s: usize) -> Result<ImageGrid> {
    denoise_with_plan(model, img, &SamplingPlan::identity(s, grid_for(img, s))?)
}

/// Full-resolution pass of the same network over an already denoised image.
pub fn enhance<D: Denoiser<f32>>(model: &D, img: &ImageGrid) -> Result<ImageGrid> {
    let mut out = denoise_images(model, std::slice::from_ref(img))?.remove(0);
    out.clip_in_place();
    Ok(out)
}

pub fn denoise_enhance<D: Denoiser<f32>>(model: &D, img: &ImageGrid, s: usize) -> Result<ImageGrid> {
    enhance(model, &denoise_pd(model, img, s)?)
}

/// One RSG pass with a fresh plan drawn from `rng`.
pub fn denoise_rsg_once<D: Denoiser<f32>>(model: &D, img: &ImageGrid, s: usize, rng: &mut impl Rng) -> Result<ImageGrid> {
    let plan = sampling::make_rsg_plan(s, grid_for(img, s), rng)?;
    denoise_with_plan(model, img, &plan)
}

/// Per-value arithmetic mean, accumulated in `f64` in list order.
pub fn average(images: &[ImageGrid]) -> Result<ImageGrid> {
    let first = images.first().ok_or_else(|| Error::Shape("nothing to average".into()))?;
    let mut acc = vec![0f64; first.as_slice().len()];
    for img in images {
        first.ensure_same_shape(img)?;
        for (a, &v) in acc.iter_mut().zip(img.as_slice()) {
            *a += f64::from(v);
        }
    }
    let n = images.len() as f64;
    let (h, w, c) = first.shape();
    ImageGrid::from_planar(h, w, c, acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// The `n` single RSG passes that [`denoise_nrsg`] averages.
pub fn nrsg_passes<D: Denoiser<f32>>(
    model: &D,
    img: &ImageGrid,
    s: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ImageGrid>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    (0..n).map(|_| denoise_rsg_once(model, img, s, rng)).collect()
}

/// Mean of `n` RSG passes, each with its own random plan.
pub fn denoise_nrsg<D: Denoiser<f32>>(model: &D, img: &ImageGrid, s: usize, n: usize, rng: &mut impl Rng) -> Result<ImageGrid> {
    let mut out = average(&nrsg_passes(model, img, s, n, rng)?)?;
    out.clip_in_place();
    Ok(out)
}

pub fn denoise_nrsg_enhance<D: Denoiser<f32>>(
    model: &D,
    img: &ImageGrid,
    s: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<ImageGrid> {
    enhance(model, &denoise_nrsg(model, img, s, n, rng)?)
}

/// Dispatches on `spec.pipeline`; `rng` is only read by the RSG pipelines.
pub fn run<D: Denoiser<f32>>(model: &D, img: &ImageGrid, spec: &InferenceSpec, rng: &mut impl Rng) -> Result<ImageGrid> {
    spec.validate()?;
    let s = spec.stride_test;
    match spec.pipeline {
        Pipeline::Pd => denoise_pd(model, img, s),
        Pipeline::PdEnhance => denoise_enhance(model, img, s),
        Pipeline::Nrsg => denoise_nrsg(model, img, s, spec.n, rng),
        Pipeline::NrsgEnhance => denoise_nrsg_enhance(model, img, s, spec.n, rng),
    }
}
