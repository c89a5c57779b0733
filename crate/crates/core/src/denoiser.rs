//! The interface losses and inference pipelines use to drive a denoiser.

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{Activations, Bsn, BsnGrads, Real};

/// Parameter gradients that can be summed across micro-batches.
pub trait Gradient {
    fn accumulate(&mut self, other: Self);
}

impl Gradient for () {
    fn accumulate(&mut self, _: Self) {}
}

impl<T: Real> Gradient for BsnGrads<T> {
    fn accumulate(&mut self, other: Self) {
        self.add_assign(&other);
    }
}

/// Loss head: maps the network output to a loss value and its output gradient.
pub type LossHead<'a, T> = Box<dyn FnOnce(&Activations<T>) -> Result<(T, Activations<T>)> + 'a>;

pub trait Denoiser<T: Real> {
    type Grad: Gradient;

    fn denoise(&self, x: &Activations<T>) -> Result<Activations<T>>;

    fn value_and_grad(&self, x: &Activations<T>, head: LossHead<'_, T>) -> Result<(T, Self::Grad)>;
}

impl<T: Real> Denoiser<T> for Bsn<T> {
    type Grad = BsnGrads<T>;

    fn denoise(&self, x: &Activations<T>) -> Result<Activations<T>> {
        self.forward(x)
    }

    fn value_and_grad(&self, x: &Activations<T>, head: LossHead<'_, T>) -> Result<(T, Self::Grad)> {
        Bsn::value_and_grad(self, x, head)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

/// Returns zeros of the input's shape.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl<T: Real> Denoiser<T> for IdentityDenoiser {
    type Grad = ();

    fn denoise(&self, x: &Activations<T>) -> Result<Activations<T>> {
        Ok(x.clone())
    }

    fn value_and_grad(&self, x: &Activations<T>, head: LossHead<'_, T>) -> Result<(T, ())> {
        let (v, g) = head(x)?;
        check_grad_shape(x, &g)?;
        Ok((v, ()))
    }
}

impl<T: Real> Denoiser<T> for ZeroDenoiser {
    type Grad = ();

    fn denoise(&self, x: &Activations<T>) -> Result<Activations<T>> {
        Ok(Activations::zeros(x.channels, x.batch, x.height, x.width))
    }

    fn value_and_grad(&self, x: &Activations<T>, head: LossHead<'_, T>) -> Result<(T, ())> {
        let out = self.denoise(x)?;
        let (v, g) = head(&out)?;
        check_grad_shape(&out, &g)?;
        Ok((v, ()))
    }
}

fn check_grad_shape<T: Real>(out: &Activations<T>, g: &Activations<T>) -> Result<()> {
    if out.same_shape(g) {
        Ok(())
    } else {
        Err(Error::Shape("loss gradient does not match output".into()))
    }
}

/// Runs `model` on a batch of equally shaped images.
pub fn denoise_images<D: Denoiser<f32>>(model: &D, images: &[ImageGrid]) -> Result<Vec<ImageGrid>> {
    let x = Activations::<f32>::from_images(images)?;
    Ok(model.denoise(&x)?.to_images())
}
