//! Raw loops behind the convolution, pooling and normalization ops.

use crate::scalar::matmul;
use crate::Float;

/// Spatial geometry of a square-kernel convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if padded < k || stride == 0 {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox*stride + kj - pad` lies in `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> std::ops::Range<usize> {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    // largest ox with ox*s + off <= w - 1
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    lo.min(g.wo)..hi.min(g.wo).max(lo.min(g.wo))
}

/// Unfolds `[N, C, H, W]` into `[C*k*k, N*Ho*Wo]`.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let range = valid_cols(g, kj);
                if range.is_empty() {
                    continue;
                }
                let ix0 = (range.start * g.stride + kj) - g.pad;
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let start = n * plane + oy * g.wo;
                        let dst = &mut dst_row[start + range.start..start + range.end];
                        if g.stride == 1 {
                            dst.copy_from_slice(&src_row[ix0..ix0 + dst.len()]);
                        } else {
                            for (d, &v) in dst.iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `[C*k*k, N*Ho*Wo]` back into `[N, C, H, W]`.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let range = valid_cols(g, kj);
                if range.is_empty() {
                    continue;
                }
                let ix0 = (range.start * g.stride + kj) - g.pad;
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let start = n * plane + oy * g.wo;
                        let src = &src_row[start + range.start..start + range.end];
                        let dst_row = &mut x[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        for (d, &v) in dst_row[ix0..].iter_mut().step_by(g.stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, S]` -> `[C, N, S]`.
pub(crate) fn swap_batch_channel<T: Float>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * s..(ni * c + ci + 1) * s];
            out[(ci * n + ni) * s..(ci * n + ni + 1) * s].copy_from_slice(src);
        }
    }
    out
}

/// Forward convolution; weight is `[Co, C, k, k]`. Returns `[N, Co, Ho, Wo]`.
pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    co: usize,
) -> Vec<T> {
    let cols = im2col(x, g);
    let ncols = g.cols();
    let mut out_cn = vec![T::zero(); co * ncols];
    matmul(co, g.rows(), ncols, weight, false, &cols, false, T::zero(), &mut out_cn);
    let plane = g.ho * g.wo;
    let mut out = swap_batch_channel(&out_cn, co, g.n, plane);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.n, co, plane);
    }
    out
}

pub(crate) fn add_channel_bias<T: Float>(x: &mut [T], bias: &[T], n: usize, c: usize, s: usize) {
    for ni in 0..n {
        for ci in 0..c {
            let b = bias[ci];
            for v in &mut x[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                *v += b;
            }
        }
    }
}

pub(crate) fn channel_sums<T: Float>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += x[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter().copied().sum::<T>();
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    co: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.ho * g.wo;
    let ncols = g.cols();
    let dy_cn = swap_batch_channel(dy, g.n, co, plane);
    let dw = need_dw.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![T::zero(); co * g.rows()];
        matmul(co, ncols, g.rows(), &dy_cn, false, &cols, true, T::zero(), &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.rows() * ncols];
        matmul(g.rows(), co, ncols, weight, true, &dy_cn, false, T::zero(), &mut dcols);
        col2im(&dcols, g)
    });
    (dx, dw)
}

/// Transposed convolution. `g` describes the *equivalent forward* convolution
/// mapping the output `[N, Co, H, W]` (g.h, g.w) onto the input grid
/// `[N, Cin, Ho, Wo]` (g.ho, g.wo), with `g.c = Co`. Weight is `[Cin, Co, k, k]`.
pub(crate) fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    cin: usize,
) -> Vec<T> {
    let plane_in = g.ho * g.wo;
    let ncols = g.cols();
    let x_cn = swap_batch_channel(x, g.n, cin, plane_in);
    let mut cols = vec![T::zero(); g.rows() * ncols];
    matmul(g.rows(), cin, ncols, weight, true, &x_cn, false, T::zero(), &mut cols);
    let mut out = col2im(&cols, g);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.n, g.c, g.h * g.w);
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    cin: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane_in = g.ho * g.wo;
    let ncols = g.cols();
    let dy_cols = im2col(dy, g);
    let dx = need_dx.then(|| {
        let mut dx_cn = vec![T::zero(); cin * ncols];
        matmul(cin, g.rows(), ncols, weight, false, &dy_cols, false, T::zero(), &mut dx_cn);
        swap_batch_channel(&dx_cn, cin, g.n, plane_in)
    });
    let dw = need_dw.then(|| {
        let x_cn = swap_batch_channel(x, g.n, cin, plane_in);
        let mut dw = vec![T::zero(); cin * g.rows()];
        matmul(cin, ncols, g.rows(), &x_cn, false, &dy_cols, true, T::zero(), &mut dw);
        dw
    });
    (dx, dw)
}

/// Non-overlapping 2x2 max pooling. Returns the pooled values and the flat
/// index of each winner in the input.
pub(crate) fn maxpool2_forward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Per-group mean/variance normalization. Groups are contiguous runs of
/// `group_len` elements, optionally strided: element `(outer, g, inner)` of a
/// tensor viewed as `[outer, groups, inner]` belongs to group `g`.
pub(crate) struct GroupLayout {
    pub outer: usize,
    pub groups: usize,
    pub inner: usize,
}

impl GroupLayout {
    fn ranges(&self, gi: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.outer).map(move |o| {
            let base = (o * self.groups + gi) * self.inner;
            base..base + self.inner
        })
    }

    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Returns per-group (mean, biased variance).
    pub fn stats<T: Float>(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let m = T::from_usize(self.count()).unwrap();
        let mut means = vec![T::zero(); self.groups];
        let mut vars = vec![T::zero(); self.groups];
        for gi in 0..self.groups {
            let mut s = T::zero();
            for r in self.ranges(gi) {
                s += x[r].iter().copied().sum::<T>();
            }
            let mean = s / m;
            let mut v = T::zero();
            for r in self.ranges(gi) {
                for &xi in &x[r] {
                    let d = xi - mean;
                    v += d * d;
                }
            }
            means[gi] = mean;
            vars[gi] = v / m;
        }
        (means, vars)
    }

    pub fn normalize<T: Float>(&self, x: &[T], eps: T) -> (Vec<T>, Vec<T>) {
        let (means, vars) = self.stats(x);
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); x.len()];
        for gi in 0..self.groups {
            let (mu, is) = (means[gi], inv_std[gi]);
            for r in self.ranges(gi) {
                for (o, &xi) in out[r.clone()].iter_mut().zip(&x[r]) {
                    *o = (xi - mu) * is;
                }
            }
        }
        (out, inv_std)
    }

    /// `dx = inv_std / M * (M dy - sum(dy) - y * sum(dy * y))`.
    pub fn normalize_backward<T: Float>(&self, y: &[T], dy: &[T], inv_std: &[T]) -> Vec<T> {
        let m = T::from_usize(self.count()).unwrap();
        let mut dx = vec![T::zero(); y.len()];
        for gi in 0..self.groups {
            let mut sum_dy = T::zero();
            let mut sum_dyy = T::zero();
            for r in self.ranges(gi) {
                for (&d, &yi) in dy[r.clone()].iter().zip(&y[r]) {
                    sum_dy += d;
                    sum_dyy += d * yi;
                }
            }
            let scale = inv_std[gi] / m;
            for r in self.ranges(gi) {
                for i in r {
                    dx[i] = scale * (m * dy[i] - sum_dy - y[i] * sum_dyy);
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.rows() * g.cols()];
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    for n in 0..g.n {
                        for oy in 0..g.ho {
                            for ox in 0..g.wo {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if (0..g.h as isize).contains(&iy) && (0..g.w as isize).contains(&ix) {
                                    out[row * g.cols() + (n * g.ho + oy) * g.wo + ox] =
                                        x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn unfold_matches_naive_and_adjoint(
            n in 1usize..3, c in 1usize..3, h in 1usize..9, w in 1usize..9,
            k in 1usize..6, stride in 1usize..4, pad in 0usize..4, seed in 0u64..1000,
        ) {
            let (Some(ho), Some(wo)) = (ConvGeom::out_size(h, k, stride, pad), ConvGeom::out_size(w, k, stride, pad)) else {
                return Ok(());
            };
            let g = ConvGeom { n, c, h, w, k, stride, pad, ho, wo };
            let x: Vec<f64> = (0..n * c * h * w).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 - 48.0).collect();
            let cols = im2col(&x, &g);
            prop_assert_eq!(&cols, &naive_im2col(&x, &g));
            // <im2col(x), y> == <x, col2im(y)>
            let y: Vec<f64> = (0..cols.len()).map(|i| ((i as u64 * 40503 + seed) % 31) as f64 - 15.0).collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
