use rand_chacha::ChaCha8Rng;

use super::{Linear, Param, Parameterized};
use crate::tensor::{Float, Tensor};

/// Multi-head scaled dot-product attention from `x` (queries) to `ctx`
/// (keys/values). Self-attention passes the same tensor twice.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub to_q: Linear<T>,
    pub to_k: Linear<T>,
    pub to_v: Linear<T>,
    pub to_out: Linear<T>,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// `(n, heads, lq, lk)` softmax probabilities.
    probs: Vec<T>,
    /// Head outputs before the output projection.
    attended: Tensor<T>,
}

impl<T: Float> Attention<T> {
    pub fn new(dim: usize, ctx_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "attention width {dim} not divisible by {heads} heads");
        Self {
            to_q: Linear::new(dim, dim, false, rng),
            to_k: Linear::new(ctx_dim, dim, false, rng),
            to_v: Linear::new(ctx_dim, dim, false, rng),
            to_out: Linear::new(dim, dim, true, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Tensor<T>, mask: Option<&[bool]>) -> Tensor<T> {
        self.forward_train(x, ctx, mask).0
    }

    /// `mask[i * lk + j]` is true when key `j` of item `i` may be attended.
    pub fn forward_train(
        &self,
        x: &Tensor<T>,
        ctx: &Tensor<T>,
        mask: Option<&[bool]>,
    ) -> (Tensor<T>, AttentionCache<T>) {
        let (n, lq, _) = x.dims3();
        let (nc, lk, _) = ctx.dims3();
        assert_eq!(n, nc, "attention batch mismatch");
        let q = self.to_q.forward(x);
        let k = self.to_k.forward(ctx);
        let v = self.to_v.forward(ctx);
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::ZERO; n * self.heads * lq * lk];
        let mut attended = vec![T::ZERO; n * lq * d];
        for i in 0..n {
            let (qi, ki, vi) = (q.item(i), k.item(i), v.item(i));
            let mi = mask.map(|m| &m[i * lk..(i + 1) * lk]);
            for h in 0..self.heads {
                let p = &mut probs[(i * self.heads + h) * lq * lk..(i * self.heads + h + 1) * lq * lk];
                T::gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    &qi[h * dh..],
                    d as isize,
                    1,
                    &ki[h * dh..],
                    1,
                    d as isize,
                    T::ZERO,
                    p,
                    lk as isize,
                    1,
                );
                for row in p.chunks_exact_mut(lk) {
                    softmax_row(row, mi);
                }
                T::gemm(
                    lq,
                    lk,
                    dh,
                    T::ONE,
                    p,
                    lk as isize,
                    1,
                    &vi[h * dh..],
                    d as isize,
                    1,
                    T::ZERO,
                    &mut attended[i * lq * d + h * dh..],
                    d as isize,
                    1,
                );
            }
        }
        let attended = Tensor::from_vec(&[n, lq, d], attended);
        let out = self.to_out.forward(&attended);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                attended,
            },
        )
    }

    /// Returns `(dL/dx, dL/dctx)`.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        ctx: &Tensor<T>,
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let (n, lq, _) = x.dims3();
        let (_, lk, _) = ctx.dims3();
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let d_att = self.to_out.backward(&cache.attended, dy);
        let mut dq = vec![T::ZERO; n * lq * d];
        let mut dk = vec![T::ZERO; n * lk * d];
        let mut dv = vec![T::ZERO; n * lk * d];
        let mut dp = vec![T::ZERO; lq * lk];
        for i in 0..n {
            let (qi, ki, vi) = (cache.q.item(i), cache.k.item(i), cache.v.item(i));
            let doi = d_att.item(i);
            for h in 0..self.heads {
                let p = &cache.probs[(i * self.heads + h) * lq * lk..(i * self.heads + h + 1) * lq * lk];
                // dP = dO V^T
                T::gemm(
                    lq,
                    dh,
                    lk,
                    T::ONE,
                    &doi[h * dh..],
                    d as isize,
                    1,
                    &vi[h * dh..],
                    1,
                    d as isize,
                    T::ZERO,
                    &mut dp,
                    lk as isize,
                    1,
                );
                // dV = P^T dO
                T::gemm(
                    lk,
                    lq,
                    dh,
                    T::ONE,
                    p,
                    1,
                    lk as isize,
                    &doi[h * dh..],
                    d as isize,
                    1,
                    T::ONE,
                    &mut dv[i * lk * d + h * dh..],
                    d as isize,
                    1,
                );
                // softmax backward, folded with the score scale
                for (drow, prow) in dp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (g, &pr) in drow.iter_mut().zip(prow) {
                        *g = pr * (*g - dot) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                T::gemm(
                    lq,
                    lk,
                    dh,
                    T::ONE,
                    &dp,
                    lk as isize,
                    1,
                    &ki[h * dh..],
                    d as isize,
                    1,
                    T::ONE,
                    &mut dq[i * lq * d + h * dh..],
                    d as isize,
                    1,
                );
                T::gemm(
                    lk,
                    lq,
                    dh,
                    T::ONE,
                    &dp,
                    1,
                    lk as isize,
                    &qi[h * dh..],
                    d as isize,
                    1,
                    T::ONE,
                    &mut dk[i * lk * d + h * dh..],
                    d as isize,
                    1,
                );
            }
        }
        let dq = Tensor::from_vec(&[n, lq, d], dq);
        let dk = Tensor::from_vec(&[n, lk, d], dk);
        let dv = Tensor::from_vec(&[n, lk, d], dv);
        let dx = self.to_q.backward(x, &dq);
        let mut dctx = self.to_k.backward(ctx, &dk);
        dctx.add_assign(&self.to_v.backward(ctx, &dv));
        (dx, dctx)
    }
}

fn softmax_row<T: Float>(row: &mut [T], mask: Option<&[bool]>) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max: Option<T> = None;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            max = Some(max.map_or(v, |m| m.max(v)));
        }
    }
    let Some(max) = max else {
        row.iter_mut().for_each(|v| *v = T::ZERO);
        return;
    };
    let mut sum = T::ZERO;
    for (j, v) in row.iter_mut().enumerate() {
        *v = if allowed(j) { (*v - max).exp() } else { T::ZERO };
        sum += *v;
    }
    let inv = T::ONE / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

impl<T: Float> Parameterized<T> for Attention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.to_q.visit(&super::join(prefix, "to_q"), f);
        self.to_k.visit(&super::join(prefix, "to_k"), f);
        self.to_v.visit(&super::join(prefix, "to_v"), f);
        self.to_out.visit(&super::join(prefix, "to_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.to_q.visit_mut(&super::join(prefix, "to_q"), f);
        self.to_k.visit_mut(&super::join(prefix, "to_k"), f);
        self.to_v.visit_mut(&super::join(prefix, "to_v"), f);
        self.to_out.visit_mut(&super::join(prefix, "to_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn objective(y: &Tensor<f64>, w: &[f64]) -> f64 {
        y.data().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut att = Attention::<f64>::new(4, 3, 2, &mut rng);
        let x = Tensor::from_vec(&[2, 5, 4], Param::<f64>::uniform(&[40], 1.0, &mut rng).value);
        let ctx = Tensor::from_vec(&[2, 3, 3], Param::<f64>::uniform(&[18], 1.0, &mut rng).value);
        let mask = [true, true, false, true, false, true];
        let w = Param::<f64>::uniform(&[40], 1.0, &mut rng).value;
        let (_, cache) = att.forward_train(&x, &ctx, Some(&mask));
        let (dx, dctx) = att.backward(&x, &ctx, &cache, &Tensor::from_vec(&[2, 5, 4], w.clone()));
        let h = 1e-6;
        for i in [0, 9, 23, 39] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&att.forward(&xp, &ctx, Some(&mask)), &w)
                - objective(&att.forward(&xm, &ctx, Some(&mask)), &w))
                / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
        for i in 0..18 {
            let mut cp = ctx.clone();
            cp.data_mut()[i] += h;
            let mut cm = ctx.clone();
            cm.data_mut()[i] -= h;
            let fd = (objective(&att.forward(&x, &cp, Some(&mask)), &w)
                - objective(&att.forward(&x, &cm, Some(&mask)), &w))
                / (2.0 * h);
            assert!((fd - dctx.data()[i]).abs() < 1e-7, "ctx {i}: {fd} vs {}", dctx.data()[i]);
        }
        // masked keys carry no gradient
        assert!(dctx.data()[6..9].iter().all(|&g| g == 0.0));
    }
}
