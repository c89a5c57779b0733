//! Synthetic noise: pixel-wise AWGN and spatially-correlated Gaussian noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Awgn,
    Correlated,
}

/// Whether the noise realization is redrawn every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    Fixed,
    PerEpochRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation in 0-255 units.
    pub sigma: f64,
    pub seed_mode: SeedMode,
    /// Integer upsampling factor of the correlated generator.
    #[serde(default = "default_correlation_scale")]
    pub correlation_scale: usize,
}

fn default_correlation_scale() -> usize {
    2
}

impl NoiseSpec {
    pub fn awgn(sigma: f64, seed_mode: SeedMode) -> Self {
        Self {
            kind: NoiseKind::Awgn,
            sigma,
            seed_mode,
            correlation_scale: default_correlation_scale(),
        }
    }

    pub fn correlated(sigma: f64, correlation_scale: usize, seed_mode: SeedMode) -> Self {
        Self {
            kind: NoiseKind::Correlated,
            sigma,
            seed_mode,
            correlation_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.kind == NoiseKind::Correlated && self.correlation_scale < 2 {
            return Err(Error::Config(format!(
                "correlation_scale must be >= 2, got {}",
                self.correlation_scale
            )));
        }
        Ok(())
    }

    /// The stream a given image and epoch draws its noise from.
    pub fn stream(&self, rng_seed: u64, image_index: u64, epoch: u64) -> seed::Stream {
        match self.seed_mode {
            SeedMode::Fixed => seed::stream(rng_seed, &[tag::NOISE, image_index]),
            SeedMode::PerEpochRandom => seed::stream(rng_seed, &[tag::NOISE, image_index, epoch]),
        }
    }
}

/// Adds synthetic noise to `clean`. The result is not clipped.
///
/// Under [`SeedMode::Fixed`] the output depends only on `(clean, spec,
/// rng_seed, image_index)`; under [`SeedMode::PerEpochRandom`] the epoch
/// also selects the stream.
pub fn add_noise(
    clean: &ImageGrid,
    spec: &NoiseSpec,
    image_index: u64,
    epoch: u64,
    rng_seed: u64,
) -> Result<ImageGrid> {
    spec.validate()?;
    if spec.sigma == 0.0 {
        return Ok(clean.clone());
    }
    let mut rng = spec.stream(rng_seed, image_index, epoch);
    let field = match spec.kind {
        NoiseKind::Awgn => white_field(clean, &mut rng),
        NoiseKind::Correlated => correlated_field(clean, spec.correlation_scale, &mut rng),
    };
    let std = (spec.sigma / 255.0) as f32;
    let mut out = clean.clone();
    for (v, n) in out.as_mut_slice().iter_mut().zip(field) {
        *v += std * n;
    }
    Ok(out)
}

fn white_field<R: Rng>(shape: &ImageGrid, rng: &mut R) -> Vec<f32> {
    let n = shape.as_slice().len();
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic taps for each output coordinate, merged over clamped source
/// indices and normalized so that a unit-variance i.i.d. source gives a
/// unit-variance output.
fn unit_variance_taps(out_len: usize, src_len: usize, scale: usize) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|x| {
            let src = (x as f64 + 0.5) / scale as f64 - 0.5;
            let base = src.floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for j in base - 1..=base + 2 {
                let w = cubic(src - j as f64);
                let idx = j.clamp(0, src_len as isize - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let norm = taps.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            taps.iter_mut().for_each(|t| t.1 /= norm);
            taps
        })
        .collect()
}

/// Gaussian noise drawn at `1/scale` resolution and bicubically upsampled.
/// Each output value has exactly unit marginal variance.
fn correlated_field<R: Rng>(shape: &ImageGrid, scale: usize, rng: &mut R) -> Vec<f32> {
    let (h, w, channels) = shape.shape();
    let (lh, lw) = (h.div_ceil(scale), w.div_ceil(scale));
    let ty = unit_variance_taps(h, lh, scale);
    let tx = unit_variance_taps(w, lw, scale);

    let mut out = Vec::with_capacity(h * w * channels);
    let mut rows = vec![0.0f64; lh * w];
    for _ in 0..channels {
        let low: Vec<f64> = (0..lh * lw).map(|_| rng.sample(StandardNormal)).collect();
        // horizontal pass
        for r in 0..lh {
            for (x, taps) in tx.iter().enumerate() {
                rows[r * w + x] = taps.iter().map(|&(j, wt)| wt * low[r * lw + j]).sum();
            }
        }
        // vertical pass
        for taps in &ty {
            for x in 0..w {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows[i * w + x]).sum();
                out.push(v as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(h: usize, w: usize) -> ImageGrid {
        ImageGrid::filled(h, w, 1, 0.5)
    }

    fn lag1_corr(img: &ImageGrid, base: f32) -> f64 {
        let (h, w, _) = img.shape();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for y in 0..h {
            for x in 0..w {
                let a = f64::from(img.get(y, x, 0) - base);
                den += a * a;
                if x + 1 < w {
                    num += a * f64::from(img.get(y, x + 1, 0) - base);
                }
            }
        }
        num / den
    }

    #[test]
    fn zero_sigma_is_identity() {
        let clean = ImageGrid::from_fn(5, 6, 3, |y, x, c| (y + x + c) as f32 / 20.0);
        for spec in [
            NoiseSpec::awgn(0.0, SeedMode::Fixed),
            NoiseSpec::correlated(0.0, 2, SeedMode::PerEpochRandom),
        ] {
            assert_eq!(add_noise(&clean, &spec, 0, 3, 9).unwrap(), clean);
        }
    }

    #[test]
    fn fixed_mode_ignores_epoch() {
        let spec = NoiseSpec::awgn(25.0, SeedMode::Fixed);
        let a = add_noise(&flat(8, 8), &spec, 4, 0, 11).unwrap();
        let b = add_noise(&flat(8, 8), &spec, 4, 9, 11).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&flat(8, 8), &spec, 5, 0, 11).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_mode_changes_with_epoch_but_is_reproducible() {
        let spec = NoiseSpec::awgn(25.0, SeedMode::PerEpochRandom);
        let a = add_noise(&flat(8, 8), &spec, 4, 0, 11).unwrap();
        let b = add_noise(&flat(8, 8), &spec, 4, 1, 11).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, add_noise(&flat(8, 8), &spec, 4, 0, 11).unwrap());
    }

    #[test]
    fn output_is_not_clipped() {
        let spec = NoiseSpec::awgn(50.0, SeedMode::Fixed);
        let noisy = add_noise(&ImageGrid::zeros(32, 32, 1), &spec, 0, 0, 1).unwrap();
        assert!(noisy.as_slice().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn awgn_std_matches_sigma() {
        let spec = NoiseSpec::awgn(25.0, SeedMode::Fixed);
        let noisy = add_noise(&flat(1000, 1000), &spec, 0, 0, 3).unwrap();
        let n = noisy.as_slice().len() as f64;
        let mean = noisy.as_slice().iter().map(|&v| f64::from(v) - 0.5).sum::<f64>() / n;
        let var = noisy
            .as_slice()
            .iter()
            .map(|&v| (f64::from(v) - 0.5 - mean).powi(2))
            .sum::<f64>()
            / n;
        let target = 25.0 / 255.0;
        assert!((var.sqrt() - target).abs() / target < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn correlated_std_matches_sigma() {
        let spec = NoiseSpec::correlated(25.0, 2, SeedMode::Fixed);
        let noisy = add_noise(&flat(400, 400), &spec, 0, 0, 3).unwrap();
        let n = noisy.as_slice().len() as f64;
        let var = noisy
            .as_slice()
            .iter()
            .map(|&v| (f64::from(v) - 0.5).powi(2))
            .sum::<f64>()
            / n;
        let target = 25.0 / 255.0;
        assert!((var.sqrt() - target).abs() / target < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn correlated_noise_has_higher_lag1_autocorrelation() {
        let awgn = add_noise(&flat(320, 320), &NoiseSpec::awgn(25.0, SeedMode::Fixed), 0, 0, 5).unwrap();
        let corr = add_noise(
            &flat(320, 320),
            &NoiseSpec::correlated(25.0, 2, SeedMode::Fixed),
            0,
            0,
            5,
        )
        .unwrap();
        let (a, c) = (lag1_corr(&awgn, 0.5), lag1_corr(&corr, 0.5));
        assert!(a.abs() < 0.02, "awgn lag-1 {a}");
        assert!(c > 0.5, "correlated lag-1 {c}");
    }

    #[test]
    fn taps_partition_unity_variance() {
        for taps in unit_variance_taps(9, 5, 2) {
            let v: f64 = taps.iter().map(|(_, w)| w * w).sum();
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NoiseSpec::awgn(-1.0, SeedMode::Fixed).validate().is_err());
        assert!(NoiseSpec::correlated(5.0, 1, SeedMode::Fixed).validate().is_err());
    }
}
