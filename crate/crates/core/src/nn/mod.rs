//! Layer primitives with hand-written backward passes.
//!
//! Every layer exposes an inference `forward` and a `backward` that consumes
//! whatever the forward needs (input activations or a small cache), writes
//! parameter gradients into its [`Param`]s, and returns the input gradient.
//! Composite blocks in [`crate::network`] chain these by hand.

mod act;
mod attention;
mod conv;
mod linear;
mod norm;

pub use act::{silu, silu_backward, upsample_nearest2x, upsample_nearest2x_backward};
pub use attention::{Attention, AttentionCache};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{GroupNorm, LayerNorm, NormCache};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Float;

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Frozen parameters receive no gradient and are skipped by the optimizer.
    pub frozen: bool,
}

impl<T: Float> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![T::ZERO; n],
            grad: vec![T::ZERO; n],
            frozen: false,
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in p.value.iter_mut() {
            *v = T::from_f64(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::ZERO);
    }

    #[inline]
    pub fn trainable(&self) -> bool {
        !self.frozen
    }
}

/// Walks named parameters. Names are dot-separated paths, stable across runs;
/// they key checkpoint blobs and optimizer state.
pub trait Parameterized<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, p| p.frozen = frozen);
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Float> Parameterized<T> for Param<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self)
    }
}

impl<T: Float, P: Parameterized<T>> Parameterized<T> for Option<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(p) = self {
            p.visit(prefix, f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f)
        }
    }
}

impl<T: Float, P: Parameterized<T>> Parameterized<T> for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Implements [`Parameterized`] for a generic struct by listing its fields.
#[macro_export]
macro_rules! impl_parameterized {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Float> $crate::nn::Parameterized<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::nn::Param<T>)) {
                $( $crate::nn::Parameterized::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::Param<T>)) {
                $( $crate::nn::Parameterized::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// Adds `src` into `dst` elementwise.
#[inline]
pub(crate) fn accumulate<T: Float>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
