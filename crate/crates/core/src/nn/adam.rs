use super::bsn::{Bsn, BsnGrads};
use super::tensor::Real;

/// Adam with the usual defaults: betas `(0.9, 0.999)`, epsilon `1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, model: &Bsn<T>) -> Self {
        let zeros: Vec<Vec<T>> = BsnGrads::zeros_like(model)
            .slices()
            .into_iter()
            .map(|s| vec![T::zero(); s.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clears the moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn apply(&mut self, model: &mut Bsn<T>, grads: &BsnGrads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let step_size = T::lit(self.lr / bias1);
        let root_bias2 = T::lit(bias2.sqrt());
        let (b1, b2, eps) = (T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);

        let params = model.parameter_slices_mut();
        let gs = grads.slices();
        assert_eq!(params.len(), gs.len());
        for (((p, g), m), v) in params.into_iter().zip(gs).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / root_bias2 + eps;
                *p = *p - step_size * *m / denom;
            }
        }
    }
}
