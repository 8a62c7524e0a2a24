use rand_chacha::ChaCha8Rng;

use super::{Param, Parameterized};
use crate::tensor::{Float, Tensor};

/// `y = x W^T + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Float> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[d_out, d_in], bound, rng),
            bias: bias.then(|| Param::uniform(&[d_out], bound, rng)),
            d_in,
            d_out,
        }
    }

    pub fn zeroed(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(&[d_out, d_in]),
            bias: bias.then(|| Param::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let rows = x.len() / self.d_in;
        assert_eq!(*x.shape().last().unwrap(), self.d_in, "linear input width");
        let mut out = vec![T::ZERO; rows * self.d_out];
        if let Some(b) = &self.bias {
            for row in out.chunks_exact_mut(self.d_out) {
                row.copy_from_slice(&b.value);
            }
        }
        T::gemm(
            rows,
            self.d_in,
            self.d_out,
            T::ONE,
            x.data(),
            self.d_in as isize,
            1,
            &self.weight.value,
            1,
            self.d_in as isize,
            T::ONE,
            &mut out,
            self.d_out as isize,
            1,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.d_out;
        Tensor::from_vec(&shape, out)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let rows = x.len() / self.d_in;
        if self.weight.trainable() {
            T::gemm(
                self.d_out,
                rows,
                self.d_in,
                T::ONE,
                dy.data(),
                1,
                self.d_out as isize,
                x.data(),
                self.d_in as isize,
                1,
                T::ONE,
                &mut self.weight.grad,
                self.d_in as isize,
                1,
            );
        }
        if let Some(b) = self.bias.as_mut().filter(|b| b.trainable()) {
            for row in dy.data().chunks_exact(self.d_out) {
                super::accumulate(&mut b.grad, row);
            }
        }
        let mut dx = vec![T::ZERO; rows * self.d_in];
        T::gemm(
            rows,
            self.d_out,
            self.d_in,
            T::ONE,
            dy.data(),
            self.d_out as isize,
            1,
            &self.weight.value,
            self.d_in as isize,
            1,
            T::ZERO,
            &mut dx,
            self.d_in as isize,
            1,
        );
        Tensor::from_vec(x.shape(), dx)
    }
}

impl<T: Float> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&super::join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&super::join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&super::join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&super::join(prefix, "bias"), b);
        }
    }
}
