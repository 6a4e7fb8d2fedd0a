//! Adam with a step-halving learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Learning rate after `epoch` completed epochs: halved every `period`.
pub fn lr_at(lr0: f64, period: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / period.max(1)) as i32)
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` must not repeat a parameter; parameters without a
    /// gradient this step keep their moments unchanged.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &Tensor<T>)], lr: f64) -> Result<()> {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for &(id, g) in grads {
            let i = id.index();
            if !store.entry(id).trainable {
                return Err(Error::contract("adam", format!("`{}` is not trainable", store.entry(id).name)));
            }
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    "gradient",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p = *p - step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
