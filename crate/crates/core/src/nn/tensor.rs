use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Scalar type the network can run in. Implemented for `f32` (training and
/// inference) and `f64` (gradient verification).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` on raw strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c = op(a) * op(b) + beta * c` where `op`
/// optionally transposes. `a` is stored `m x k` (or `k x m` when `trans_a`),
/// `b` is stored `k x n` (or `n x k` when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides stay inside each buffer.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A batch of feature maps stored channel-major: `[channels][batch][height][width]`.
///
/// Viewed as a matrix this is `channels x (batch * height * width)`, which
/// turns every convolution into a single matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Activations<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    /// Columns per channel: `batch * height * width`.
    #[inline]
    pub fn columns(&self) -> usize {
        self.batch * self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, item: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + item) * self.height + y) * self.width + x
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Packs equally-shaped images into a batch.
    pub fn from_images(images: &[ImageGrid]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (h, w, c) = first.shape();
        let mut out = Self::zeros(c, images.len(), h, w);
        let hw = h * w;
        for (i, img) in images.iter().enumerate() {
            if img.shape() != (h, w, c) {
                return Err(Error::Shape(format!(
                    "batch item {i} is {:?}, expected {:?}",
                    img.shape(),
                    (h, w, c)
                )));
            }
            for ch in 0..c {
                let dst = out.index(ch, i, 0, 0);
                for (d, &s) in out.data[dst..dst + hw].iter_mut().zip(img.plane(ch)) {
                    *d = T::from_f32(s).expect("finite");
                }
            }
        }
        Ok(out)
    }

    pub fn to_images(&self) -> Vec<ImageGrid> {
        let hw = self.height * self.width;
        (0..self.batch)
            .map(|i| {
                let mut data = Vec::with_capacity(hw * self.channels);
                for ch in 0..self.channels {
                    let src = self.index(ch, i, 0, 0);
                    data.extend(
                        self.data[src..src + hw]
                            .iter()
                            .map(|v| v.to_f32().unwrap_or(f32::NAN)),
                    );
                }
                ImageGrid::from_planar(self.height, self.width, self.channels, data)
                    .expect("network produced non-finite values")
            })
            .collect()
    }

    /// Items `start..end` of the batch.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.batch);
        let hw = self.height * self.width;
        let mut out = Self::zeros(self.channels, end - start, self.height, self.width);
        for c in 0..self.channels {
            let src = self.index(c, start, 0, 0);
            let dst = out.index(c, 0, 0, 0);
            let len = (end - start) * hw;
            out.data[dst..dst + len].copy_from_slice(&self.data[src..src + len]);
        }
        out
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert!(p.batch == first.batch && p.height == first.height && p.width == first.width);
            data.extend_from_slice(&p.data);
        }
        Self {
            channels: parts.iter().map(|p| p.channels).sum(),
            batch: first.batch,
            height: first.height,
            width: first.width,
            data,
        }
    }

    /// Splits off channel ranges of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.channels);
        let per = self.columns();
        let mut offset = 0;
        sizes
            .iter()
            .map(|&c| {
                let part = Self {
                    channels: c,
                    batch: self.batch,
                    height: self.height,
                    width: self.width,
                    data: self.data[offset * per..(offset + c) * per].to_vec(),
                };
                offset += c;
                part
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn relu_in_place(&mut self) {
        for v in &mut self.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }

    /// Zeroes the gradient where the rectifier output was not positive.
    pub fn relu_backward_in_place(&mut self, relu_output: &Self) {
        assert!(self.same_shape(relu_output));
        for (g, &o) in self.data.iter_mut().zip(&relu_output.data) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
    }
}
