use super::{Param, Parameterized};
use crate::tensor::{Float, Tensor};

/// Normalized activations and per-group reciprocal standard deviations.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

/// Normalizes contiguous segments of `data` of length `seg`; each segment is
/// one statistics group.
fn normalize_segments<T: Float>(data: &[T], seg: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::ZERO; data.len()];
    let mut rstd = Vec::with_capacity(data.len() / seg);
    let inv_n = T::from_f64(1.0 / seg as f64);
    for (src, dst) in data.chunks_exact(seg).zip(xhat.chunks_exact_mut(seg)) {
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let r = T::ONE / (var + T::from_f64(eps)).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// `dx` for one statistics group given `dxhat` (already scaled by gamma).
fn segment_backward<T: Float>(xhat: &[T], dxhat: &[T], rstd: T, dx: &mut [T]) {
    let inv_n = T::from_f64(1.0 / xhat.len() as f64);
    let mean_d = dxhat.iter().copied().sum::<T>() * inv_n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
    for ((d, &g), &xh) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *d = rstd * (g - mean_d - xh * mean_dx);
    }
}

/// Group normalization over NCHW tensors with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl<T: Float> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels % groups == 0,
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            gamma: Param::filled(&[channels], T::ONE),
            beta: Param::zeros(&[channels]),
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "group norm channel count");
        let hw = h * w;
        let seg = c / self.groups * hw;
        let (xhat, rstd) = normalize_segments(x.data(), seg, self.eps);
        let mut y = xhat.clone();
        for (p, plane) in y.chunks_exact_mut(hw).enumerate() {
            let ch = p % c;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            plane.iter_mut().for_each(|v| *v = *v * g + b);
        }
        (
            Tensor::from_vec(x.shape(), y),
            NormCache {
                xhat: Tensor::from_vec(x.shape(), xhat),
                rstd,
            },
        )
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (_, c, h, w) = dy.dims4();
        let hw = h * w;
        let seg = c / self.groups * hw;
        let xhat = cache.xhat.data();
        let mut dxhat = vec![T::ZERO; dy.len()];
        let train = self.gamma.trainable();
        for (p, (gplane, xplane)) in dy.data().chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
            let ch = p % c;
            let g = self.gamma.value[ch];
            if train {
                let mut dg = T::ZERO;
                let mut db = T::ZERO;
                for (&d, &xh) in gplane.iter().zip(xplane) {
                    dg += d * xh;
                    db += d;
                }
                self.gamma.grad[ch] += dg;
                self.beta.grad[ch] += db;
            }
            for (o, &d) in dxhat[p * hw..(p + 1) * hw].iter_mut().zip(gplane) {
                *o = d * g;
            }
        }
        let mut dx = vec![T::ZERO; dy.len()];
        for (s, r) in cache.rstd.iter().enumerate() {
            let range = s * seg..(s + 1) * seg;
            segment_backward(&xhat[range.clone()], &dxhat[range.clone()], *r, &mut dx[range]);
        }
        Tensor::from_vec(dy.shape(), dx)
    }
}

impl<T: Float> Parameterized<T> for GroupNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&super::join(prefix, "gamma"), &self.gamma);
        f(&super::join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&super::join(prefix, "gamma"), &mut self.gamma);
        f(&super::join(prefix, "beta"), &mut self.beta);
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub dim: usize,
    pub eps: f64,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(&[dim], T::ONE),
            beta: Param::zeros(&[dim]),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        assert_eq!(*x.shape().last().unwrap(), self.dim, "layer norm width");
        let (xhat, rstd) = normalize_segments(x.data(), self.dim, self.eps);
        let mut y = xhat.clone();
        for row in y.chunks_exact_mut(self.dim) {
            for ((v, &g), &b) in row.iter_mut().zip(&self.gamma.value).zip(&self.beta.value) {
                *v = *v * g + b;
            }
        }
        (
            Tensor::from_vec(x.shape(), y),
            NormCache {
                xhat: Tensor::from_vec(x.shape(), xhat),
                rstd,
            },
        )
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.dim;
        let xhat = cache.xhat.data();
        let train = self.gamma.trainable();
        let mut dx = vec![T::ZERO; dy.len()];
        let mut dxhat = vec![T::ZERO; d];
        for (r, ((grow, xrow), dxrow)) in dy
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .enumerate()
        {
            for j in 0..d {
                if train {
                    self.gamma.grad[j] += grow[j] * xrow[j];
                    self.beta.grad[j] += grow[j];
                }
                dxhat[j] = grow[j] * self.gamma.value[j];
            }
            segment_backward(xrow, &dxhat, cache.rstd[r], dxrow);
        }
        Tensor::from_vec(dy.shape(), dx)
    }
}

impl<T: Float> Parameterized<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&super::join(prefix, "gamma"), &self.gamma);
        f(&super::join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&super::join(prefix, "gamma"), &mut self.gamma);
        f(&super::join(prefix, "beta"), &mut self.beta);
    }
}
