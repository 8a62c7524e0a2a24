use crate::tensor::{Float, Tensor};

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Gradient of [`silu`] given its input `x`.
pub fn silu_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape(), dy.shape());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::ONE + v * (T::ONE - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn upsample_nearest2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; n * c * h2 * w2];
    for (plane, src) in x.data().chunks_exact(h * w).enumerate() {
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, h2, w2], out)
}

pub fn upsample_nearest2x_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![T::ZERO; n * c * h * w];
    for (plane, src) in dy.data().chunks_exact(h2 * w2).enumerate() {
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}
