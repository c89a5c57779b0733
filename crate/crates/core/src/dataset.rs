//! Datasets, patch sampling and synthetic scenes.
//!
//! A dataset is a flat directory of 8-bit images. An optional parallel
//! directory holding clean images under the same file names enables
//! evaluation against references.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, ImageGrid};
use crate::seed::{self, tag};

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "pgm"];

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && known {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Images held in memory, optionally paired with clean references.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<ImageGrid>,
    pub clean: Option<Vec<ImageGrid>>,
}

impl Dataset {
    pub fn new(names: Vec<String>, images: Vec<ImageGrid>, clean: Option<Vec<ImageGrid>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if names.len() != images.len() {
            return Err(Error::Dataset(format!("{} names for {} images", names.len(), images.len())));
        }
        if let Some(clean) = &clean {
            if clean.len() != images.len() {
                return Err(Error::Dataset(format!(
                    "{} clean references for {} images",
                    clean.len(),
                    images.len()
                )));
            }
            for ((n, a), b) in names.iter().zip(&images).zip(clean) {
                a.ensure_same_shape(b)
                    .map_err(|_| Error::Dataset(format!("`{n}`: clean reference has a different shape")))?;
            }
        }
        Ok(Self { names, images, clean })
    }

    /// Loads every image in `dir`; `clean_dir` must hold a file of the same name for each.
    pub fn load(dir: impl AsRef<Path>, clean_dir: Option<&Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("no images found in {}", dir.display())));
        }
        let mut names = Vec::new();
        let mut images = Vec::new();
        let mut clean = clean_dir.map(|_| Vec::new());
        for file in files {
            let name = file.file_name().expect("listed file").to_string_lossy().into_owned();
            images.push(load_image(&file)?);
            if let (Some(cd), Some(clean)) = (clean_dir, clean.as_mut()) {
                let path = cd.join(&name);
                if !path.is_file() {
                    return Err(Error::Dataset(format!(
                        "clean reference {} missing for `{name}`",
                        path.display()
                    )));
                }
                clean.push(load_image(&path)?);
            }
            names.push(name);
        }
        Self::new(names, images, clean)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images[0].channels()
    }

    /// Smallest height and width over all images.
    pub fn min_side(&self) -> usize {
        self.images.iter().map(|i| i.height().min(i.width())).min().unwrap_or(0)
    }

    pub fn to_gray(&self) -> Self {
        Self {
            names: self.names.clone(),
            images: self.images.iter().map(ImageGrid::to_gray).collect(),
            clean: self.clean.as_ref().map(|c| c.iter().map(ImageGrid::to_gray).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSampler {
    pub patch_size: usize,
    pub patches_per_epoch: usize,
    pub rng_seed: u64,
}

/// Uniform axis-aligned `patch x patch` crop.
pub fn sample_patch(img: &ImageGrid, patch: usize, rng: &mut impl Rng) -> Result<ImageGrid> {
    let (h, w, _) = img.shape();
    if patch == 0 || patch > h || patch > w {
        return Err(Error::PatchTooLarge {
            patch,
            height: h,
            width: w,
        });
    }
    let top = rng.random_range(0..=h - patch);
    let left = rng.random_range(0..=w - patch);
    img.crop(top, left, patch, patch)
}

/// Picks an image uniformly with replacement, then a uniform crop of it.
/// Returns the image index alongside the patch.
pub fn sample_dataset_patch(images: &[ImageGrid], patch: usize, rng: &mut impl Rng) -> Result<(usize, ImageGrid)> {
    if images.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let i = rng.random_range(0..images.len());
    Ok((i, sample_patch(&images[i], patch, rng)?))
}

/// Deterministic piecewise-smooth scene: a shaded background with
/// overlapping rectangles, discs and striped patches.
pub fn synthetic_scene(height: usize, width: usize, channels: usize, seed: u64, index: u64) -> ImageGrid {
    let mut rng = seed::stream(seed, &[tag::SCENE, index]);
    let colour = |rng: &mut seed::Stream| -> Vec<f32> {
        let base: f32 = rng.random_range(0.1..0.9);
        (0..channels)
            .map(|_| (base + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0))
            .collect()
    };
    let bg_a = colour(&mut rng);
    let bg_b = colour(&mut rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let scale = (height.max(width)) as f32;
    let mut img = ImageGrid::from_fn(height, width, channels, |y, x, c| {
        let t = (((x as f32 * ca + y as f32 * sa) / scale) * 0.5 + 0.5).clamp(0.0, 1.0);
        bg_a[c] * (1.0 - t) + bg_b[c] * t
    });

    let shapes = 6 + rng.random_range(0..6);
    for _ in 0..shapes {
        let col = colour(&mut rng);
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let ry = rng.random_range(0.05..0.3) * height as f32;
        let rx = rng.random_range(0.05..0.3) * width as f32;
        let kind = rng.random_range(0..3u8);
        let period = rng.random_range(3.0..9.0f32);
        let amp = rng.random_range(0.05..0.2f32);
        for c in 0..channels {
            let plane = img.plane_mut(c);
            for y in 0..height {
                for x in 0..width {
                    let dy = (y as f32 - cy) / ry;
                    let dx = (x as f32 - cx) / rx;
                    let inside = match kind {
                        0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                        _ => dy * dy + dx * dx <= 1.0,
                    };
                    if inside {
                        let mut v = col[c];
                        if kind == 2 {
                            v += amp * (std::f32::consts::TAU * x as f32 / period).sin();
                        }
                        plane[y * width + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

/// `count` synthetic scenes with consecutive indices starting at `first`.
pub fn synthetic_set(count: usize, height: usize, width: usize, channels: usize, seed: u64, first: u64) -> Dataset {
    let names = (0..count).map(|i| format!("scene{:04}.png", first + i as u64)).collect();
    let images: Vec<ImageGrid> = (0..count)
        .map(|i| synthetic_scene(height, width, channels, seed, first + i as u64))
        .collect();
    Dataset {
        names,
        clean: Some(images.clone()),
        images,
    }
}
