//! The in-memory image type and 8-bit raster I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// An `height x width x channels` image with real values, nominally in `[0, 1]`.
///
/// Storage is channel-planar: all of channel 0 in raster order, then channel 1,
/// and so on. Values are not clipped on construction; noisy training images
/// may leave the unit range until they pass a pipeline boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        assert!(channels >= 1, "image needs at least one channel");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from planar data (`channels` planes of `height * width`).
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidImage(format!(
                "degenerate shape {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite value {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.set(y, x, c, f(y, x, c));
                }
            }
        }
        img
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// One channel plane in raster order.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clipped(&self) -> Self {
        let mut out = self.clone();
        out.clip_in_place();
        out
    }

    pub fn clip_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out
    }

    /// Axis-aligned sub-grid copy.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(height, width, self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                let src = self.index(top + y, left, c);
                let dst = out.index(y, 0, c);
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        Ok(out)
    }

    /// ITU-R BT.601 luma for colour images; a copy for grayscale ones.
    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.pixel_count();
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let data = (0..n)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Converts between one and three channels (luma, or replicated gray).
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => Ok(self.to_gray()),
            (1, 3) => {
                let mut data = Vec::with_capacity(self.data.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(&self.data);
                }
                Self::from_planar(self.height, self.width, 3, data)
            }
            (a, b) => Err(Error::Shape(format!("cannot convert {a} channels to {b}"))),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }
}

/// Quantizes a real value to a byte: clip to `[0, 1]`, scale by 255, round half up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    let scaled = f64::from(v.clamp(0.0, 1.0)) * 255.0;
    (scaled + 0.5).floor().min(255.0) as u8
}

/// Reads an 8-bit grayscale or RGB raster. Alpha is dropped; deeper formats are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = image::ImageReader::open(path)
        .map_err(|e| ingest(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingest(e.to_string()))?
        .decode()
        .map_err(|e| ingest(e.to_string()))?;

    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, decoded.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, decoded.to_rgb8().into_raw()),
        other => {
            return Err(ingest(format!(
                "unsupported pixel format {:?}; expected 8-bit grayscale or RGB",
                other.color()
            )))
        }
    };
    if width == 0 || height == 0 {
        return Err(ingest("empty image".into()));
    }

    let n = width * height;
    let mut data = vec![0.0f32; n * channels];
    for (i, px) in bytes.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * n + i] = f32::from(b) / 255.0;
        }
    }
    ImageGrid::from_planar(height, width, channels, data)
}

/// Writes an 8-bit PNG (or whatever format the extension names).
pub fn save_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height as u32, img.width as u32);
    let n = img.pixel_count();
    let result = match img.channels {
        1 => {
            let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
            GrayImage::from_raw(w, h, raw)
                .expect("buffer size matches")
                .save(path)
        }
        3 => {
            let mut raw = Vec::with_capacity(n * 3);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(quantize(img.data[c * n + i]));
                }
            }
            RgbImage::from_raw(w, h, raw)
                .expect("buffer size matches")
                .save(path)
        }
        c => {
            return Err(Error::InvalidImage(format!(
                "cannot save a {c}-channel image"
            )))
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}
