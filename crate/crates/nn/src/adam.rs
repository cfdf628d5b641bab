use crate::{Float, Gradients, ParamStore};

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<usize>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<usize>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|&i| vec![T::zero(); store.get(i).len()]).collect::<Vec<_>>();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            v: m.clone(),
            m,
            params,
            t: 0,
        }
    }

    pub fn params(&self) -> &[usize] {
        &self.params
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; parameters without a gradient are left untouched but
    /// still advance the shared step counter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.t += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::from_f64_lossy(self.lr * c2.sqrt() / c1);
        let eps = T::from_f64_lossy(self.eps * c2.sqrt());
        for (k, &idx) in self.params.iter().enumerate() {
            let Some(g) = grads.param(store, idx) else { continue };
            let g = g.data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(idx).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
