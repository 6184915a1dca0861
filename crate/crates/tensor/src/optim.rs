use crate::error::Result;
use crate::float::Float;
use crate::graph::Gradients;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { lr, beta1, beta2, eps: 1e-8, steps: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using the gradients of the variables in `bound`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, bound: &Bound, grads: &Gradients<F>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(t));
        let c2 = F::of(1.0 - self.beta2.powi(t));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(bound.var(id)) else { continue };
            g.ensure_finite("Adam::step")?;
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
