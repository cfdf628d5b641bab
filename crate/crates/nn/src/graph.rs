//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so reverse index order is a valid topological order for the
//! backward sweep. Graphs are cheap and meant to be rebuilt every step.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, GroupLayout};
use crate::{Float, ParamStore, Tensor};

#[derive(Debug, Clone, Copy)]
enum NormKind {
    /// Statistics per `(n, c)` over `H x W`.
    Instance,
    /// Statistics per `c` over `N x H x W`.
    Batch,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Ln(usize, T),
    Abs(usize),
    Clamp(usize, T, T),
    Lerp { base: usize, weight: usize, target: usize },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, co: usize },
    ConvT { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cin: usize },
    Norm { x: usize, layout: GroupLayout, inv_std: Vec<T> },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    MaxPool { x: usize, arg: Vec<usize> },
    Concat(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    SoftmaxChannels(usize),
    Mean(usize),
    Sum(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<(u64, usize), usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    id: usize,
    graph: &'g Graph<T>,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to parameter `idx` of `store`. Repeated calls within one
    /// graph return the same node, so gradients accumulate.
    pub fn param(&self, store: &ParamStore<T>, idx: usize) -> Var<'_, T> {
        let key = (store.id(), idx);
        if let Some(&id) = self.bound.borrow().get(&key) {
            return Var { id, graph: self };
        }
        let var = self.push(store.get(idx).clone(), Op::Leaf, !store.is_frozen(idx));
        self.bound.borrow_mut().insert(key, var.id);
        var
    }

    /// Runs the backward sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        assert_eq!(loss.value().len(), 1, "backward needs a scalar loss");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss.value().shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            backward_node(&nodes, id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients {
            grads,
            bound: self.bound.borrow().clone(),
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node<T: Float>(
    nodes: &[Node<T>],
    id: usize,
    dy: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let y = &nodes[id].value;
    let needs = |i: usize| nodes[i].needs_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, dy.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, dy.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, dy.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, dy.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, dy.zip_map(val(*b), |d, v| d * v));
            }
            if needs(*b) {
                accumulate(grads, *b, dy.zip_map(val(*a), |d, v| d * v));
            }
        }
        Op::Scale(a, f) => accumulate(grads, *a, dy.map(|d| d * *f)),
        Op::Shift(a) => accumulate(grads, *a, dy.clone()),
        Op::Relu(a) => accumulate(
            grads,
            *a,
            dy.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() }),
        ),
        Op::LeakyRelu(a, slope) => accumulate(
            grads,
            *a,
            dy.zip_map(val(*a), |d, x| if x > T::zero() { d } else { d * *slope }),
        ),
        Op::Tanh(a) => accumulate(grads, *a, dy.zip_map(y, |d, t| d * (T::one() - t * t))),
        Op::Sigmoid(a) => accumulate(grads, *a, dy.zip_map(y, |d, s| d * s * (T::one() - s))),
        Op::Ln(a, eps) => accumulate(
            grads,
            *a,
            dy.zip_map(val(*a), |d, x| if x > *eps { d / x } else { T::zero() }),
        ),
        Op::Abs(a) => accumulate(
            grads,
            *a,
            dy.zip_map(val(*a), |d, x| {
                if x > T::zero() {
                    d
                } else if x < T::zero() {
                    -d
                } else {
                    T::zero()
                }
            }),
        ),
        Op::Clamp(a, lo, hi) => accumulate(
            grads,
            *a,
            dy.zip_map(val(*a), |d, x| if x >= *lo && x <= *hi { d } else { T::zero() }),
        ),
        Op::Lerp { base, weight, target } => {
            let (s, w, g) = (val(*base), val(*weight), val(*target));
            if needs(*base) {
                accumulate(grads, *base, dy.zip_map(w, |d, a| d * (T::one() - a)));
            }
            if needs(*weight) {
                let diff = g.zip_map(s, |gv, sv| gv - sv);
                accumulate(grads, *weight, dy.zip_map(&diff, |d, df| d * df));
            }
            if needs(*target) {
                accumulate(grads, *target, dy.zip_map(w, |d, a| d * a));
            }
        }
        Op::Conv { x, w, b, geom, co } => {
            let (dx, dw) = kernels::conv2d_backward(
                val(*x).data(),
                val(*w).data(),
                dy.data(),
                geom,
                *co,
                needs(*x),
                needs(*w),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, Tensor::new(val(*x).shape(), dx).unwrap());
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, Tensor::new(val(*w).shape(), dw).unwrap());
            }
            if let Some(b) = b.filter(|&b| needs(b)) {
                let db = kernels::channel_sums(dy.data(), geom.n, *co, geom.ho * geom.wo);
                accumulate(grads, b, Tensor::new(&[*co], db).unwrap());
            }
        }
        Op::ConvT { x, w, b, geom, cin } => {
            let (dx, dw) = kernels::conv_transpose2d_backward(
                val(*x).data(),
                val(*w).data(),
                dy.data(),
                geom,
                *cin,
                needs(*x),
                needs(*w),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, Tensor::new(val(*x).shape(), dx).unwrap());
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, Tensor::new(val(*w).shape(), dw).unwrap());
            }
            if let Some(b) = b.filter(|&b| needs(b)) {
                let db = kernels::channel_sums(dy.data(), geom.n, geom.c, geom.h * geom.w);
                accumulate(grads, b, Tensor::new(&[geom.c], db).unwrap());
            }
        }
        Op::Norm { x, layout, inv_std } => {
            let dx = layout.normalize_backward(y.data(), dy.data(), inv_std);
            accumulate(grads, *x, Tensor::new(y.shape(), dx).unwrap());
        }
        Op::ChannelAffine { x, scale, shift } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let s = h * w;
            let sc = val(*scale).data();
            if needs(*x) {
                let mut dx = dy.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        for v in &mut dx.data_mut()[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                            *v *= sc[ci];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            if needs(*scale) {
                let mut ds = vec![T::zero(); c];
                for ni in 0..n {
                    for (ci, d) in ds.iter_mut().enumerate() {
                        let r = (ni * c + ci) * s..(ni * c + ci + 1) * s;
                        *d += dy.data()[r.clone()]
                            .iter()
                            .zip(&xv.data()[r])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                    }
                }
                accumulate(grads, *scale, Tensor::new(&[c], ds).unwrap());
            }
            if needs(*shift) {
                let db = kernels::channel_sums(dy.data(), n, c, s);
                accumulate(grads, *shift, Tensor::new(&[c], db).unwrap());
            }
        }
        Op::MaxPool { x, arg } => {
            let mut dx = Tensor::zeros(val(*x).shape());
            for (&i, &d) in arg.iter().zip(dy.data()) {
                dx.data_mut()[i] += d;
            }
            accumulate(grads, *x, dx);
        }
        Op::Concat(parts) => {
            let (n, ctot, h, w) = y.dims4();
            let s = h * w;
            let mut offset = 0;
            for &p in parts {
                let c = val(p).dims4().1;
                if needs(p) {
                    let mut g = Vec::with_capacity(n * c * s);
                    for ni in 0..n {
                        let start = (ni * ctot + offset) * s;
                        g.extend_from_slice(&dy.data()[start..start + c * s]);
                    }
                    accumulate(grads, p, Tensor::new(val(p).shape(), g).unwrap());
                }
                offset += c;
            }
        }
        Op::SliceChannels { x, start } => {
            let (n, c, h, w) = val(*x).dims4();
            let len = y.dims4().1;
            let s = h * w;
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for ni in 0..n {
                let src = &dy.data()[ni * len * s..(ni + 1) * len * s];
                let dst = (ni * c + start) * s;
                dx.data_mut()[dst..dst + len * s].copy_from_slice(src);
            }
            accumulate(grads, *x, dx);
        }
        Op::SoftmaxChannels(a) => {
            let (n, c, h, w) = y.dims4();
            let s = h * w;
            let mut dx = Tensor::zeros(y.shape());
            for ni in 0..n {
                for p in 0..s {
                    let idx = |ci: usize| (ni * c + ci) * s + p;
                    let dot: T = (0..c).map(|ci| dy.data()[idx(ci)] * y.data()[idx(ci)]).sum();
                    for ci in 0..c {
                        dx.data_mut()[idx(ci)] = y.data()[idx(ci)] * (dy.data()[idx(ci)] - dot);
                    }
                }
            }
            accumulate(grads, *a, dx);
        }
        Op::Mean(a) => {
            let n = T::from_usize(val(*a).len()).unwrap();
            accumulate(grads, *a, Tensor::full(val(*a).shape(), dy.data()[0] / n));
        }
        Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), dy.data()[0])),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<(u64, usize), usize>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a node, `None` when nothing flowed into it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of parameter `idx` of `store`, `None` if the parameter was not
    /// used in the graph or received no gradient.
    pub fn param(&self, store: &ParamStore<T>, idx: usize) -> Option<&Tensor<T>> {
        self.bound
            .get(&(store.id(), idx))
            .and_then(|&id| self.grads[id].as_ref())
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the value as a new constant, cutting the gradient path.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let needs = self.graph.needs(self.id);
        self.graph.push(value, op, needs)
    }

    fn binary(self, other: Var<'g, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        self.graph.push(a.zip_map(&b, f), op, needs)
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, factor: f64) -> Var<'g, T> {
        let f = T::from_f64_lossy(factor);
        self.unary(self.value().map(|v| v * f), Op::Scale(self.id, f))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::from_f64_lossy(c);
        self.unary(self.value().map(|v| v + c), Op::Shift(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g, T> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::from_f64_lossy(slope);
        self.unary(
            self.value().map(|v| if v > T::zero() { v } else { v * s }),
            Op::LeakyRelu(self.id, s),
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.tanh()), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(
            self.value().map(|v| T::one() / (T::one() + (-v).exp())),
            Op::Sigmoid(self.id),
        )
    }

    /// `ln(max(x, eps))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(self, eps: f64) -> Var<'g, T> {
        let e = T::from_f64_lossy(eps);
        self.unary(self.value().map(|v| v.max(e).ln()), Op::Ln(self.id, e))
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.abs()), Op::Abs(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        self.unary(self.value().map(|v| v.max(l).min(h)), Op::Clamp(self.id, l, h))
    }

    /// Per-element `self + weight * (target - self)`, exact at the endpoints:
    /// weight 0 gives `self`, weight 1 gives `target`, and equal inputs give
    /// `self` for any weight. Results stay between the two inputs.
    pub fn lerp(self, weight: Var<'g, T>, target: Var<'g, T>) -> Var<'g, T> {
        let (s, w, g) = (self.value(), weight.value(), target.value());
        assert!(
            s.shape() == w.shape() && s.shape() == g.shape(),
            "lerp shape mismatch"
        );
        let data = s
            .data()
            .iter()
            .zip(w.data())
            .zip(g.data())
            .map(|((&sv, &wv), &gv)| lerp_scalar(sv, wv, gv))
            .collect();
        let needs = [self.id, weight.id, target.id]
            .iter()
            .any(|&i| self.graph.needs(i));
        self.graph.push(
            Tensor::new(s.shape(), data).unwrap(),
            Op::Lerp {
                base: self.id,
                weight: weight.id,
                target: target.id,
            },
            needs,
        )
    }

    /// 2-D convolution, weight `[Co, C, k, k]`, optional bias `[Co]`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = x.dims4();
        let (co, wc, k, k2) = w.dims4();
        assert_eq!(wc, c, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d needs square kernels");
        let ho = ConvGeom::out_size(h, k, stride, pad).expect("conv2d kernel larger than input");
        let wo = ConvGeom::out_size(wd, k, stride, pad).expect("conv2d kernel larger than input");
        let geom = ConvGeom { n, c, h, w: wd, k, stride, pad, ho, wo };
        let b = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(x.data(), w.data(), b.as_deref().map(|t| t.data()), &geom, co);
        let needs = self.graph.needs(self.id)
            || self.graph.needs(weight.id)
            || bias.is_some_and(|b| self.graph.needs(b.id));
        self.graph.push(
            Tensor::new(&[n, co, ho, wo], out).unwrap(),
            Op::Conv {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                co,
            },
            needs,
        )
    }

    /// Transposed convolution, weight `[Cin, Co, k, k]`. Output size is
    /// `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (n, cin, h, wd) = x.dims4();
        let (wcin, co, k, k2) = w.dims4();
        assert_eq!(wcin, cin, "conv_transpose2d channel mismatch");
        assert_eq!(k, k2, "conv_transpose2d needs square kernels");
        assert!(output_pad < stride.max(1), "output_pad must be below stride");
        let ho = (h - 1) * stride + k + output_pad - 2 * pad;
        let wo = (wd - 1) * stride + k + output_pad - 2 * pad;
        // Equivalent forward conv maps the output grid back onto the input grid.
        let geom = ConvGeom { n, c: co, h: ho, w: wo, k, stride, pad, ho: h, wo: wd };
        debug_assert_eq!(ConvGeom::out_size(ho, k, stride, pad), Some(h));
        let b = bias.map(|b| b.value());
        let out = kernels::conv_transpose2d_forward(
            x.data(),
            w.data(),
            b.as_deref().map(|t| t.data()),
            &geom,
            cin,
        );
        let needs = self.graph.needs(self.id)
            || self.graph.needs(weight.id)
            || bias.is_some_and(|b| self.graph.needs(b.id));
        self.graph.push(
            Tensor::new(&[n, co, ho, wo], out).unwrap(),
            Op::ConvT {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                cin,
            },
            needs,
        )
    }

    fn normalize(self, kind: NormKind, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let layout = match kind {
            NormKind::Instance => GroupLayout { outer: 1, groups: n * c, inner: h * w },
            NormKind::Batch => GroupLayout { outer: n, groups: c, inner: h * w },
        };
        let (out, inv_std) = layout.normalize(x.data(), T::from_f64_lossy(eps));
        self.unary(
            Tensor::new(x.shape(), out).unwrap(),
            Op::Norm { x: self.id, layout, inv_std },
        )
    }

    /// Zero-mean unit-variance per `(n, c)` plane.
    pub fn instance_norm(self, eps: f64) -> Var<'g, T> {
        self.normalize(NormKind::Instance, eps)
    }

    /// Zero-mean unit-variance per channel over the batch.
    pub fn batch_norm(self, eps: f64) -> Var<'g, T> {
        self.normalize(NormKind::Batch, eps)
    }

    /// `x * scale[c] + shift[c]` with `scale`, `shift` of shape `[C]`.
    pub fn channel_affine(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (sc, sh) = (scale.value(), shift.value());
        assert_eq!(sc.len(), c, "channel_affine scale length");
        assert_eq!(sh.len(), c, "channel_affine shift length");
        let s = h * w;
        let mut out = (*x).clone();
        for ni in 0..n {
            for ci in 0..c {
                let (a, b) = (sc.data()[ci], sh.data()[ci]);
                for v in &mut out.data_mut()[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                    *v = *v * a + b;
                }
            }
        }
        let needs = [self.id, scale.id, shift.id]
            .iter()
            .any(|&i| self.graph.needs(i));
        self.graph.push(
            out,
            Op::ChannelAffine { x: self.id, scale: scale.id, shift: shift.id },
            needs,
        )
    }

    /// Non-overlapping 2x2 max pooling; spatial dims must be even.
    pub fn max_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
        let (out, arg) = kernels::maxpool2_forward(x.data(), n, c, h, w);
        self.unary(
            Tensor::new(&[n, c, h / 2, w / 2], out).unwrap(),
            Op::MaxPool { x: self.id, arg },
        )
    }

    /// Channel slice `[start, start + len)`.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let s = h * w;
        let mut out = Vec::with_capacity(n * len * s);
        for ni in 0..n {
            let from = (ni * c + start) * s;
            out.extend_from_slice(&x.data()[from..from + len * s]);
        }
        self.unary(
            Tensor::new(&[n, len, h, w], out).unwrap(),
            Op::SliceChannels { x: self.id, start },
        )
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let s = h * w;
        let mut out = Tensor::zeros(x.shape());
        for ni in 0..n {
            for p in 0..s {
                let idx = |ci: usize| (ni * c + ci) * s + p;
                let m = (0..c).map(|ci| x.data()[idx(ci)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ci in 0..c {
                    let e = (x.data()[idx(ci)] - m).exp();
                    out.data_mut()[idx(ci)] = e;
                    z += e;
                }
                for ci in 0..c {
                    let v = out.data()[idx(ci)];
                    out.data_mut()[idx(ci)] = v / z;
                }
            }
        }
        self.unary(out, Op::SoftmaxChannels(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let m = self.value().mean();
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    pub fn sum(self) -> Var<'g, T> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v.data()[0]
    }
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<'g, T: Float>(parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let graph = parts[0].graph;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (n, _, h, w) = values[0].dims4();
    let ctot: usize = values
        .iter()
        .map(|v| {
            let (vn, vc, vh, vw) = v.dims4();
            assert!(vn == n && vh == h && vw == w, "concat spatial mismatch");
            vc
        })
        .sum();
    let s = h * w;
    let mut out = Vec::with_capacity(n * ctot * s);
    for ni in 0..n {
        for v in &values {
            let c = v.dims4().1;
            out.extend_from_slice(&v.data()[ni * c * s..(ni + 1) * c * s]);
        }
    }
    let needs = parts.iter().any(|p| graph.needs(p.id));
    graph.push(
        Tensor::new(&[n, ctot, h, w], out).unwrap(),
        Op::Concat(parts.iter().map(|p| p.id).collect()),
        needs,
    )
}

/// Scalar form of [`Var::lerp`].
pub fn lerp_scalar<T: Float>(base: T, weight: T, target: T) -> T {
    if weight == T::one() {
        return target;
    }
    let v = base + weight * (target - base);
    let (lo, hi) = if base <= target { (base, target) } else { (target, base) };
    v.max(lo).min(hi)
}
