//! Parameterised building blocks. Layers only hold parameter indices; values
//! live in a [`ParamStore`], so the same layer runs in `f32` or `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Float, Graph, ParamStore, Tensor, Var};

fn normal_tensor<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialisation scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(&[cout, cin, k, k], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        x.conv2d(w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // Fan-in of a transposed conv is roughly cin * k * k / stride^2.
        let fan_in = (cin * k * k) as f64 / (stride * stride) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(&[cin, cout, k, k], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, pad, output_pad }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        x.conv_transpose2d(w, b, self.stride, self.pad, self.output_pad)
    }
}

/// Instance normalisation with a learned per-channel affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: 1e-5,
        }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, ps: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.instance_norm(self.eps)
            .channel_affine(g.param(ps, self.gamma), g.param(ps, self.beta))
    }
}

/// Batch normalisation. Running statistics are stored as (frozen) parameters
/// so they travel with checkpoints.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        store.set_frozen(running_mean, true);
        store.set_frozen(running_var, true);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// In training mode normalises with batch statistics and returns them
    /// (per-channel mean, unbiased variance) for [`BatchNorm2d::update_running`].
    pub fn forward<'g, T: Float>(
        &self,
        g: &'g Graph<T>,
        ps: &ParamStore<T>,
        x: Var<'g, T>,
        train: bool,
    ) -> (Var<'g, T>, Option<BatchStats>) {
        let affine = |v: Var<'g, T>| v.channel_affine(g.param(ps, self.gamma), g.param(ps, self.beta));
        if train {
            let stats = BatchStats::of(&x.value());
            (affine(x.batch_norm(self.eps)), Some(stats))
        } else {
            let rm = ps.get(self.running_mean);
            let rv = ps.get(self.running_var);
            let c = rm.len();
            let eps = T::from_f64_lossy(self.eps);
            let scale: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let shift: Vec<T> = rm.data().iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
            let xhat = x.channel_affine(
                g.constant(Tensor::new(&[c], scale).unwrap()),
                g.constant(Tensor::new(&[c], shift).unwrap()),
            );
            (affine(xhat), None)
        }
    }

    pub fn update_running<T: Float>(&self, ps: &mut ParamStore<T>, stats: &BatchStats) {
        let mom = self.momentum;
        for (idx, new) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
            for (r, &s) in ps.get_mut(idx).data_mut().iter_mut().zip(new) {
                *r = T::from_f64_lossy((1.0 - mom) * r.as_f64() + mom * s);
            }
        }
    }
}

/// Per-channel batch statistics (unbiased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of<T: Float>(x: &Tensor<T>) -> Self {
        let (n, c, h, w) = x.dims4();
        let s = h * w;
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let vals = (0..n).flat_map(|ni| x.data()[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter());
            let sum: f64 = vals.clone().map(|v| v.as_f64()).sum();
            let mu = sum / m;
            let ss: f64 = vals.map(|v| (v.as_f64() - mu).powi(2)).sum();
            mean[ci] = mu;
            var[ci] = if m > 1.0 { ss / (m - 1.0) } else { 0.0 };
        }
        Self { mean, var }
    }
}

/// Inverted dropout: multiplies by a Bernoulli(1-p)/(1-p) mask drawn from
/// `rng`. Identity when `p == 0` or outside training, without touching `rng`.
pub fn dropout<'g, T: Float, R: Rng + ?Sized>(x: Var<'g, T>, p: f64, train: bool, rng: &mut R) -> Var<'g, T> {
    if !train || p <= 0.0 {
        return x;
    }
    let shape = x.shape();
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() >= p { keep } else { T::zero() })
        .collect();
    let mask = x.graph().constant(Tensor::new(&shape, mask).unwrap());
    x.mul(mask)
}
