//! Pixel-shuffle downsampling (PD) and random sub-sample generation (RSG).
//!
//! An image whose sides are multiples of the stride `s` is divided into
//! `s x s` cells. Each cell is flattened row-major into a vector of `s^2`
//! positions, the vector is permuted by the cell's permutation, and element
//! `k` of every cell, laid out in cell raster order, forms sub-sample `k`.
//! PD is the special case where every permutation is the identity, so
//! sub-sample `k = a*s + b` holds the pixels at `(a + s*i, b + s*j)`.
//!
//! All channels of a cell share one spatial permutation. Splitting and
//! merging only move values, so `merge(split(y)) == y` bit for bit.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Per-cell bijections from sub-sample index to within-cell position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    stride: usize,
    grid_rows: usize,
    grid_cols: usize,
    /// `grid_rows * grid_cols` blocks of `stride^2` entries.
    perms: Vec<u16>,
}

pub const MAX_STRIDE: usize = 256;

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 || stride > MAX_STRIDE {
        return Err(Error::Config(format!(
            "stride must be in 1..={MAX_STRIDE}, got {stride}"
        )));
    }
    Ok(())
}

impl SamplingPlan {
    /// The PD plan: every cell keeps positions in raster order.
    pub fn identity(stride: usize, grid_shape: (usize, usize)) -> Result<Self> {
        check_stride(stride)?;
        let cell: Vec<u16> = (0..stride * stride).map(|k| k as u16).collect();
        let cells = grid_shape.0 * grid_shape.1;
        Ok(Self {
            stride,
            grid_rows: grid_shape.0,
            grid_cols: grid_shape.1,
            perms: cell.repeat(cells),
        })
    }

    /// Builds a plan from explicit per-cell permutations, validating each one.
    pub fn from_perms(stride: usize, grid_shape: (usize, usize), perms: Vec<Vec<usize>>) -> Result<Self> {
        check_stride(stride)?;
        let cells = grid_shape.0 * grid_shape.1;
        if perms.len() != cells {
            return Err(Error::Plan(format!(
                "{} permutations for {cells} cells",
                perms.len()
            )));
        }
        let n = stride * stride;
        let mut flat = Vec::with_capacity(cells * n);
        for (i, p) in perms.iter().enumerate() {
            let mut seen = vec![false; n];
            if p.len() != n || p.iter().any(|&k| k >= n || std::mem::replace(&mut seen[k], true)) {
                return Err(Error::Plan(format!("cell {i} is not a permutation of 0..{n}")));
            }
            flat.extend(p.iter().map(|&k| k as u16));
        }
        Ok(Self {
            stride,
            grid_rows: grid_shape.0,
            grid_cols: grid_shape.1,
            perms: flat,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn cell_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Permutation of cell `(u, v)`: entry `k` is the within-cell position of sub-sample `k`.
    pub fn cell_perm(&self, u: usize, v: usize) -> &[u16] {
        let n = self.stride * self.stride;
        let cell = u * self.grid_cols + v;
        &self.perms[cell * n..(cell + 1) * n]
    }

    pub fn is_identity(&self) -> bool {
        let n = self.stride * self.stride;
        self.perms
            .chunks_exact(n)
            .all(|cell| cell.iter().enumerate().all(|(k, &p)| p as usize == k))
    }
}

/// Draws an RSG plan: an independent uniform permutation per cell (Fisher-Yates).
pub fn make_rsg_plan<R: Rng + ?Sized>(
    stride: usize,
    grid_shape: (usize, usize),
    rng: &mut R,
) -> Result<SamplingPlan> {
    let mut plan = SamplingPlan::identity(stride, grid_shape)?;
    let n = stride * stride;
    for cell in plan.perms.chunks_exact_mut(n) {
        cell.shuffle(rng);
    }
    Ok(plan)
}

/// The `s^2` sub-samples of an image together with the plan that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleStack {
    pub subs: Vec<ImageGrid>,
    pub plan: SamplingPlan,
    pub original_shape: (usize, usize),
}

impl SubsampleStack {
    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    /// Same plan, new sub-sample contents (e.g. after denoising each one).
    pub fn with_subs(&self, subs: Vec<ImageGrid>) -> Result<Self> {
        if subs.len() != self.subs.len() {
            return Err(Error::Shape(format!(
                "{} replacement sub-samples for a stack of {}",
                subs.len(),
                self.subs.len()
            )));
        }
        for (new, old) in subs.iter().zip(&self.subs) {
            if new.height() != old.height() || new.width() != old.width() {
                return Err(Error::Shape(format!(
                    "replacement sub-sample {}x{} for {}x{}",
                    new.height(),
                    new.width(),
                    old.height(),
                    old.width()
                )));
            }
        }
        Ok(Self {
            subs,
            plan: self.plan.clone(),
            original_shape: self.original_shape,
        })
    }
}

fn check_divisible(img: &ImageGrid, stride: usize) -> Result<()> {
    check_stride(stride)?;
    let (h, w) = (img.height(), img.width());
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::NotDivisible {
            height: h,
            width: w,
            stride,
            pad_rows: (stride - h % stride) % stride,
            pad_cols: (stride - w % stride) % stride,
        });
    }
    Ok(())
}

pub fn grid_shape_for(img: &ImageGrid, stride: usize) -> Result<(usize, usize)> {
    check_divisible(img, stride)?;
    Ok((img.height() / stride, img.width() / stride))
}

pub fn pd_split(img: &ImageGrid, stride: usize) -> Result<SubsampleStack> {
    let plan = SamplingPlan::identity(stride, grid_shape_for(img, stride)?)?;
    rsg_split(img, &plan)
}

pub fn pd_merge(stack: &SubsampleStack) -> Result<ImageGrid> {
    if !stack.plan.is_identity() {
        return Err(Error::Plan(
            "pd_merge called on a randomly shuffled stack; use rsg_merge".into(),
        ));
    }
    rsg_merge(stack)
}

pub fn rsg_split(img: &ImageGrid, plan: &SamplingPlan) -> Result<SubsampleStack> {
    let grid = grid_shape_for(img, plan.stride)?;
    if grid != plan.grid_shape() {
        return Err(Error::Shape(format!(
            "plan grid {:?} does not match image grid {:?}",
            plan.grid_shape(),
            grid
        )));
    }
    let s = plan.stride;
    let (rows, cols) = grid;
    let channels = img.channels();
    let mut subs = vec![ImageGrid::zeros(rows, cols, channels); s * s];
    for u in 0..rows {
        for v in 0..cols {
            for (k, &pos) in plan.cell_perm(u, v).iter().enumerate() {
                let (dy, dx) = (pos as usize / s, pos as usize % s);
                for c in 0..channels {
                    subs[k].set(u, v, c, img.get(s * u + dy, s * v + dx, c));
                }
            }
        }
    }
    Ok(SubsampleStack {
        subs,
        plan: plan.clone(),
        original_shape: (img.height(), img.width()),
    })
}

pub fn rsg_merge(stack: &SubsampleStack) -> Result<ImageGrid> {
    let plan = &stack.plan;
    let s = plan.stride;
    let (rows, cols) = plan.grid_shape();
    if stack.subs.len() != s * s {
        return Err(Error::Plan(format!(
            "stack has {} sub-samples, plan expects {}",
            stack.subs.len(),
            s * s
        )));
    }
    if stack.original_shape != (rows * s, cols * s) {
        return Err(Error::Plan(format!(
            "plan covers {}x{} but stack records {:?}",
            rows * s,
            cols * s,
            stack.original_shape
        )));
    }
    let channels = stack.subs[0].channels();
    for sub in &stack.subs {
        if sub.shape() != (rows, cols, channels) {
            return Err(Error::Shape(format!(
                "sub-sample {:?} does not match plan grid ({rows}, {cols}, {channels})",
                sub.shape()
            )));
        }
    }
    let mut out = ImageGrid::zeros(rows * s, cols * s, channels);
    for u in 0..rows {
        for v in 0..cols {
            for (k, &pos) in plan.cell_perm(u, v).iter().enumerate() {
                let (dy, dx) = (pos as usize / s, pos as usize % s);
                for c in 0..channels {
                    out.set(s * u + dy, s * v + dx, c, stack.subs[k].get(u, v, c));
                }
            }
        }
    }
    Ok(out)
}

/// Original size of an image before [`pad_to_multiple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_rows == 0 && self.pad_cols == 0
    }

    pub fn apply(&self, img: &ImageGrid) -> Result<ImageGrid> {
        if self.is_empty() && img.height() == self.height && img.width() == self.width {
            return Ok(img.clone());
        }
        img.crop(0, 0, self.height, self.width)
    }
}

/// Mirrors an out-of-range index back into `0..n`, repeating the edge sample.
fn mirror(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let r = i % period;
    if r < n {
        r
    } else {
        period - 1 - r
    }
}

/// Pads the bottom and right edges by mirroring so both sides become multiples of `stride`.
pub fn pad_to_multiple(img: &ImageGrid, stride: usize) -> Result<(ImageGrid, CropRecord)> {
    check_stride(stride)?;
    let (h, w, channels) = img.shape();
    let record = CropRecord {
        height: h,
        width: w,
        pad_rows: (stride - h % stride) % stride,
        pad_cols: (stride - w % stride) % stride,
    };
    if record.is_empty() {
        return Ok((img.clone(), record));
    }
    let padded = ImageGrid::from_fn(h + record.pad_rows, w + record.pad_cols, channels, |y, x, c| {
        img.get(mirror(y, h), mirror(x, w), c)
    });
    Ok((padded, record))
}
