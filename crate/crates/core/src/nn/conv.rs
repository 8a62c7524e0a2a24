use rand_chacha::ChaCha8Rng;

use super::{Param, Parameterized};
use crate::tensor::{Float, Tensor};

/// 2-D convolution over NCHW tensors, lowered to im2col + GEMM per batch item.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(&[c_out, c_in, kernel, kernel], bound, rng),
            bias: Param::uniform(&[c_out], bound, rng),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    /// All-zero weights and bias.
    pub fn zeroed(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Param::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Param::zeros(&[c_out]),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `lo..hi` read input column `ox * stride + kx - padding`
    /// inside the image.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = p.saturating_sub(kx).div_ceil(s).min(wo);
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= h {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[iy * w..(iy + 1) * w];
                        line[..lo].fill(T::ZERO);
                        line[hi..].fill(T::ZERO);
                        if lo < hi {
                            let first = lo * s + kx - p;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                    *v = x;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    row += 1;
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kx - p;
                    for oy in 0..ho {
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= h {
                            continue;
                        }
                        let line = &src[oy * wo + lo..oy * wo + hi];
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.c_in, "conv expects {} input channels, got {c}", self.c_in);
        let (ho, wo) = self.output_hw(h, w);
        let kk = self.c_in * self.kernel * self.kernel;
        let mut out = vec![T::ZERO; n * self.c_out * ho * wo];
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::ZERO; kk * ho * wo]
        };
        for i in 0..n {
            let xi = x.item(i);
            let b: &[T] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            let yi = &mut out[i * self.c_out * ho * wo..(i + 1) * self.c_out * ho * wo];
            for (co, plane) in yi.chunks_exact_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            T::gemm(
                self.c_out,
                kk,
                ho * wo,
                T::ONE,
                &self.weight.value,
                kk as isize,
                1,
                b,
                (ho * wo) as isize,
                1,
                T::ONE,
                yi,
                (ho * wo) as isize,
                1,
            );
        }
        Tensor::from_vec(&[n, self.c_out, ho, wo], out)
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = self.output_hw(h, w);
        let hw_out = ho * wo;
        let kk = self.c_in * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let train = self.weight.trainable();
        let mut cols = if pointwise || !train {
            Vec::new()
        } else {
            vec![T::ZERO; kk * hw_out]
        };
        let mut dcols = if pointwise || !need_dx {
            Vec::new()
        } else {
            vec![T::ZERO; kk * hw_out]
        };
        let mut dx = need_dx.then(|| vec![T::ZERO; x.len()]);
        for i in 0..n {
            let dyi = dy.item(i);
            if train {
                let xi = x.item(i);
                let b: &[T] = if pointwise {
                    xi
                } else {
                    self.im2col(xi, h, w, &mut cols);
                    &cols
                };
                T::gemm(
                    self.c_out,
                    hw_out,
                    kk,
                    T::ONE,
                    dyi,
                    hw_out as isize,
                    1,
                    b,
                    1,
                    hw_out as isize,
                    T::ONE,
                    &mut self.weight.grad,
                    kk as isize,
                    1,
                );
            }
            if self.bias.trainable() {
                for (co, plane) in dyi.chunks_exact(hw_out).enumerate() {
                    let s: T = plane.iter().copied().sum();
                    self.bias.grad[co] += s;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx[i * self.c_in * h * w..(i + 1) * self.c_in * h * w];
                let target: &mut [T] = if pointwise { dxi } else { &mut dcols };
                T::gemm(
                    kk,
                    self.c_out,
                    hw_out,
                    T::ONE,
                    &self.weight.value,
                    1,
                    kk as isize,
                    dyi,
                    hw_out as isize,
                    1,
                    T::ZERO,
                    target,
                    hw_out as isize,
                    1,
                );
                if !pointwise {
                    let dxi = &mut dx[i * self.c_in * h * w..(i + 1) * self.c_in * h * w];
                    self.col2im(&dcols, h, w, dxi);
                }
            }
        }
        dx.map(|d| Tensor::from_vec(x.shape(), d))
    }
}

impl<T: Float> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&super::join(prefix, "weight"), &self.weight);
        f(&super::join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&super::join(prefix, "weight"), &mut self.weight);
        f(&super::join(prefix, "bias"), &mut self.bias);
    }
}
