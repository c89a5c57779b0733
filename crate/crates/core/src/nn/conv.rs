//! 2-D convolution with dilation and an optional structurally absent centre tap.

use rand::Rng;

use super::tensor::{gemm, Activations, Real};

/// A same-size convolution with zero padding.
///
/// The kernel is stored as a list of spatial taps. A centrally masked
/// convolution simply has no `(0, 0)` tap, so the centre weight does not
/// exist and cannot be trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub masked: bool,
    taps: Vec<(isize, isize)>,
    /// `out_channels x (in_channels * taps)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients of one [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvGrad<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        Self {
            weight: vec![T::zero(); conv.weight.len()],
            bias: vec![T::zero(); conv.bias.len()],
        }
    }
}

fn kernel_taps(kernel: usize, dilation: usize, masked: bool) -> Vec<(isize, isize)> {
    assert!(kernel % 2 == 1, "kernel must be odd");
    let r = (kernel / 2) as isize;
    let d = dilation as isize;
    let mut taps = Vec::with_capacity(kernel * kernel);
    for ky in -r..=r {
        for kx in -r..=r {
            if masked && ky == 0 && kx == 0 {
                continue;
            }
            taps.push((ky * d, kx * d));
        }
    }
    taps
}

impl<T: Real> Conv2d<T> {
    /// Zero-initialized layer.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, masked: bool) -> Self {
        assert!(in_channels > 0 && out_channels > 0 && dilation > 0);
        let taps = kernel_taps(kernel, dilation, masked);
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            masked,
            weight: vec![T::zero(); out_channels * in_channels * taps.len()],
            bias: vec![T::zero(); out_channels],
            taps,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, false)
    }

    /// Uniform weights with standard deviation `gain / sqrt(fan_in)`, zero
    /// biases. Values are drawn in `f64` so `f32` and `f64` models built
    /// from one stream agree.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, gain: f64) {
        let bound = gain * (3.0 / self.fan_in() as f64).sqrt();
        for w in &mut self.weight {
            *w = T::lit(rng.random_range(-bound..bound));
        }
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.taps.len()
    }

    pub fn taps(&self) -> &[(isize, isize)] {
        &self.taps
    }

    /// Largest spatial offset the kernel reads.
    pub fn radius(&self) -> usize {
        (self.kernel / 2) * self.dilation
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn is_identity_taps(&self) -> bool {
        self.taps.len() == 1 && self.taps[0] == (0, 0)
    }

    /// Gathers shifted copies of the input: row `ci * taps + t` holds input
    /// channel `ci` shifted by tap `t`, with zeros outside the image.
    fn im2col(&self, x: &Activations<T>) -> Vec<T> {
        let (h, w, n) = (x.height, x.width, x.batch);
        let cols = x.columns();
        let ntaps = self.taps.len();
        let mut out = vec![T::zero(); self.in_channels * ntaps * cols];
        for ci in 0..self.in_channels {
            for (t, &(dy, dx)) in self.taps.iter().enumerate() {
                let row = &mut out[(ci * ntaps + t) * cols..(ci * ntaps + t + 1) * cols];
                let (x_lo, x_hi) = valid_range(w, dx);
                if x_lo >= x_hi {
                    continue;
                }
                for item in 0..n {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = x.index(ci, item, sy as usize, 0);
                        let dst = (item * h + y) * w;
                        let sx_lo = (x_lo as isize + dx) as usize;
                        let len = x_hi - x_lo;
                        row[dst + x_lo..dst + x_hi].copy_from_slice(&x.data[src + sx_lo..src + sx_lo + len]);
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the input.
    fn col2im(&self, dcols: &[T], shape: &Activations<T>) -> Activations<T> {
        let (h, w, n) = (shape.height, shape.width, shape.batch);
        let mut dx = Activations::zeros(self.in_channels, n, h, w);
        let cols = dx.columns();
        let ntaps = self.taps.len();
        for ci in 0..self.in_channels {
            for (t, &(dy, ddx)) in self.taps.iter().enumerate() {
                let row = &dcols[(ci * ntaps + t) * cols..(ci * ntaps + t + 1) * cols];
                let (x_lo, x_hi) = valid_range(w, ddx);
                if x_lo >= x_hi {
                    continue;
                }
                for item in 0..n {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = dx.index(ci, item, sy as usize, 0);
                        let src = (item * h + y) * w;
                        let sx_lo = (x_lo as isize + ddx) as usize;
                        for (d, &g) in dx.data[dst + sx_lo..dst + sx_lo + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&row[src + x_lo..src + x_hi])
                        {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Activations<T>) -> Activations<T> {
        assert_eq!(x.channels, self.in_channels, "channel mismatch");
        let cols = x.columns();
        let mut out = Activations::zeros(self.out_channels, x.batch, x.height, x.width);
        for (o, &b) in self.bias.iter().enumerate() {
            out.data[o * cols..(o + 1) * cols].fill(b);
        }
        let k = self.fan_in();
        if self.is_identity_taps() {
            gemm(false, false, self.out_channels, cols, k, &self.weight, &x.data, T::one(), &mut out.data);
        } else {
            let im = self.im2col(x);
            gemm(false, false, self.out_channels, cols, k, &self.weight, &im, T::one(), &mut out.data);
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Activations<T>,
        dy: &Activations<T>,
        grad: &mut ConvGrad<T>,
        need_input_grad: bool,
    ) -> Option<Activations<T>> {
        assert_eq!(dy.channels, self.out_channels);
        let cols = x.columns();
        let k = self.fan_in();
        let owned;
        let im: &[T] = if self.is_identity_taps() {
            &x.data
        } else {
            owned = self.im2col(x);
            &owned
        };
        gemm(false, true, self.out_channels, k, cols, &dy.data, im, T::one(), &mut grad.weight);
        for (o, gb) in grad.bias.iter_mut().enumerate() {
            *gb = *gb + dy.data[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); k * cols];
        gemm(true, false, k, cols, self.out_channels, &self.weight, &dy.data, T::zero(), &mut dcols);
        if self.is_identity_taps() {
            Some(Activations {
                channels: self.in_channels,
                batch: x.batch,
                height: x.height,
                width: x.width,
                data: dcols,
            })
        } else {
            Some(self.col2im(&dcols, x))
        }
    }
}

/// Output columns `lo..hi` whose source `x + dx` lies inside `0..w`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(w), hi)
}
