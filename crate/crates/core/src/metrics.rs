//! Image quality metrics: PSNR and SSIM on the [0, 1] scale.
//!
//! Both metrics clip their inputs to [0, 1] first. SSIM uses an 11x11
//! Gaussian window (sigma 1.5) over the valid region only, with
//! `C1 = (0.01)^2` and `C2 = (0.03)^2`. Colour images are scored per channel
//! and averaged, or on BT.601 luma when [`SsimMode::Luma`] is selected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    #[default]
    ChannelMean,
    Luma,
}

fn mse(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let n = a.as_slice().len() as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = f64::from(x.clamp(0.0, 1.0)) - f64::from(y.clamp(0.0, 1.0));
            d * d
        })
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(reference: &ImageGrid, test: &ImageGrid) -> Result<f64> {
    reference.ensure_same_shape(test)?;
    let e = mse(reference, test);
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let a: Vec<f64> = a.iter().map(|&v| f64::from(v.clamp(0.0, 1.0))).collect();
    let b: Vec<f64> = b.iter().map(|&v| f64::from(v.clamp(0.0, 1.0))).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&prod(&a, &a), h, w, &k);
    let bb = filter_valid(&prod(&b, &b), h, w, &k);
    let ab = filter_valid(&prod(&a, &b), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len() as f64;
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n
}

/// Mean structural similarity.
pub fn ssim(reference: &ImageGrid, test: &ImageGrid, mode: SsimMode) -> Result<f64> {
    reference.ensure_same_shape(test)?;
    let (h, w, c) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if mode == SsimMode::Luma && c == 3 {
        let (ra, rb) = (reference.clipped().to_gray(), test.clipped().to_gray());
        return Ok(ssim_plane(ra.plane(0), rb.plane(0), h, w));
    }
    Ok((0..c).map(|ch| ssim_plane(reference.plane(ch), test.plane(ch), h, w)).sum::<f64>() / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus their arithmetic means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityReport {
    pub images: Vec<ImageScore>,
}

impl QualityReport {
    pub fn push(&mut self, name: impl Into<String>, reference: &ImageGrid, test: &ImageGrid, mode: SsimMode) -> Result<()> {
        self.images.push(ImageScore {
            name: name.into(),
            psnr: psnr(reference, test)?,
            ssim: ssim(reference, test, mode)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|s| s.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|s| s.ssim))
    }

    /// Writes one row per image followed by a `mean` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["image", "psnr", "ssim"])?;
        for s in &self.images {
            w.write_record([s.name.clone(), format!("{:.4}", s.psnr), format!("{:.6}", s.ssim)])?;
        }
        w.write_record(["mean".to_string(), format!("{:.4}", self.mean_psnr()), format!("{:.6}", self.mean_ssim())])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn textured(h: usize, w: usize, c: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, c, |y, x, ch| (((x * 13 + y * 7 + ch * 5) % 17) as f32) / 16.0)
    }

    #[test]
    fn psnr_known_mse() {
        let a = ImageGrid::filled(8, 8, 1, 0.5);
        let b = ImageGrid::filled(8, 8, 1, 0.6);
        // MSE = 0.01 gives exactly 20 dB.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_half_pixels_off_by_half() {
        let a = ImageGrid::zeros(4, 4, 1);
        let b = ImageGrid::from_fn(4, 4, 1, |y, _, _| if y < 2 { 0.5 } else { 0.0 });
        let expect = 10.0 * 8f64.log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-6);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_negative_for_inverted_halves() {
        let a = ImageGrid::from_fn(32, 32, 1, |_, x, _| if x < 16 { 0.0 } else { 1.0 });
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b, SsimMode::ChannelMean).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - ssim(&b, &a, SsimMode::ChannelMean).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_clips_inputs() {
        let a = ImageGrid::filled(4, 4, 1, 1.0);
        let b = ImageGrid::filled(4, 4, 1, 1.7);
        assert_eq!(psnr(&a, &b).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = textured(16, 20, 3);
        assert!((ssim(&a, &a, SsimMode::ChannelMean).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &a, SsimMode::Luma).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let mut rng = crate::seed::stream(4, &[]);
        let a = ImageGrid::from_fn(12, 13, 1, |_, _, _| rng.random());
        let b = a.map(|v| (v * 0.8 + 0.05).min(1.0));
        let k = gaussian_window();
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        let mut count = 0.0;
        for oy in 0..2 {
            for ox in 0..3 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = k[i] * k[j];
                        let x = f64::from(a.get(oy + i, ox + j, 0));
                        let y = f64::from(b.get(oy + i, ox + j, 0));
                        ma += wgt * x;
                        mb += wgt * y;
                        aa += wgt * x * x;
                        bb += wgt * y * y;
                        ab += wgt * x * y;
                    }
                }
                let s = ((2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
                total += s;
                count += 1.0;
            }
        }
        let got = ssim(&a, &b, SsimMode::ChannelMean).unwrap();
        assert!((got - total / count).abs() < 1e-12);
    }

    #[test]
    fn ssim_drops_with_noise_and_rejects_small() {
        let a = ImageGrid::from_fn(32, 32, 1, |y, x, _| 0.3 + 0.01 * (x + y) as f32);
        let mut rng = crate::seed::stream(1, &[]);
        let b = a.map(|v| v + (rng.random::<f32>() - 0.5) * 0.4);
        assert!(ssim(&a, &b, SsimMode::ChannelMean).unwrap() < 0.9);
        assert!(ssim(&ImageGrid::zeros(8, 8, 1), &ImageGrid::zeros(8, 8, 1), SsimMode::Luma).is_err());
    }

    #[test]
    fn report_csv_has_mean_row() {
        let a = textured(16, 16, 1);
        let b = a.map(|v| v * 0.9);
        let mut r = QualityReport::default();
        r.push("one", &a, &b, SsimMode::ChannelMean).unwrap();
        r.push("two", &a, &a, SsimMode::ChannelMean).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,"));
        assert!((r.mean_psnr() - (r.images[0].psnr + 100.0) / 2.0).abs() < 1e-12);
    }
}
