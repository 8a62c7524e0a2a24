//! U-Net building blocks with explicit forward caches and backward passes.

use rand_chacha::ChaCha8Rng;

use crate::nn::{
    join, silu, silu_backward, upsample_nearest2x, upsample_nearest2x_backward, Attention,
    AttentionCache, Conv2d, GroupNorm, LayerNorm, Linear, NormCache, Param, Parameterized,
};
use crate::tensor::{nchw_to_tokens, tokens_to_nchw, Float, Tensor};

/// Sinusoidal timestep features followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbed<T> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
    pub dim: usize,
}

crate::impl_parameterized!(TimeEmbed { lin1, lin2 });

pub struct TimeEmbedCache<T> {
    feats: Tensor<T>,
    h: Tensor<T>,
}

impl<T: Float> TimeEmbed<T> {
    pub fn new(dim: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(dim, out, true, rng),
            lin2: Linear::new(out, out, true, rng),
            dim,
        }
    }

    pub fn forward_train(&self, t: &[usize]) -> (Tensor<T>, TimeEmbedCache<T>) {
        let feats = timestep_features(t, self.dim);
        let h = self.lin1.forward(&feats);
        let out = self.lin2.forward(&silu(&h));
        (out, TimeEmbedCache { feats, h })
    }

    pub fn backward(&mut self, cache: &TimeEmbedCache<T>, dy: &Tensor<T>) {
        if !self.lin1.weight.trainable() && !self.lin2.weight.trainable() {
            return;
        }
        let dh = self.lin2.backward(&silu(&cache.h), dy);
        self.lin1.backward(&cache.feats, &silu_backward(&cache.h, &dh));
    }
}

/// `[cos(t f_i), sin(t f_i)]` with geometric frequencies `f_i = 10000^(-i/half)`.
pub fn timestep_features<T: Float>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::ZERO; t.len() * dim];
    for (row, &ti) in out.chunks_exact_mut(dim).zip(t) {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = ti as f64 * f;
            row[i] = T::from_f64(a.cos());
            row[half + i] = T::from_f64(a.sin());
        }
    }
    Tensor::from_vec(&[t.len(), dim], out)
}

/// GroupNorm-SiLU-conv twice, with the timestep embedding added in between
/// and a 1x1 skip projection when widths differ.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub emb: Linear<T>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
}

crate::impl_parameterized!(ResBlock { norm1, conv1, emb, norm2, conv2, skip });

pub struct ResCache<T> {
    x: Tensor<T>,
    n1: NormCache<T>,
    g1: Tensor<T>,
    a1: Tensor<T>,
    n2: NormCache<T>,
    g2: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Float> ResBlock<T> {
    pub fn new(c_in: usize, c_out: usize, temb: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(groups, c_in),
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            emb: Linear::new(temb, c_out, true, rng),
            norm2: GroupNorm::new(groups, c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(c_in, c_out, 1, 1, 0, rng)),
        }
    }

    /// `s` is `SiLU(temb)`, shared by every block.
    pub fn forward_train(&self, x: &Tensor<T>, s: &Tensor<T>) -> (Tensor<T>, ResCache<T>) {
        let (g1, n1) = self.norm1.forward_train(x);
        let a1 = silu(&g1);
        let mut h = self.conv1.forward(&a1);
        let e = self.emb.forward(s);
        add_channel_bias(&mut h, &e);
        let (g2, n2) = self.norm2.forward_train(&h);
        let a2 = silu(&g2);
        let mut out = self.conv2.forward(&a2);
        match &self.skip {
            Some(skip) => out.add_assign(&skip.forward(x)),
            None => out.add_assign(x),
        }
        let cache = ResCache {
            x: x.clone(),
            n1,
            g1,
            a1,
            n2,
            g2,
            a2,
        };
        (out, cache)
    }

    /// Returns `(dx, ds)`.
    pub fn backward(&mut self, cache: &ResCache<T>, s: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let da2 = self.conv2.backward(&cache.a2, dy, true).unwrap();
        let dh = self.norm2.backward(&cache.n2, &silu_backward(&cache.g2, &da2));
        let de = sum_spatial(&dh);
        let ds = self.emb.backward(s, &de);
        let da1 = self.conv1.backward(&cache.a1, &dh, true).unwrap();
        let mut dx = self.norm1.backward(&cache.n1, &silu_backward(&cache.g1, &da1));
        match &mut self.skip {
            Some(skip) => dx.add_assign(&skip.backward(&cache.x, dy, true).unwrap()),
            None => dx.add_assign(dy),
        }
        (dx, ds)
    }
}

/// Adds `e[n, c]` to every pixel of channel `c` in item `n`.
fn add_channel_bias<T: Float>(x: &mut Tensor<T>, e: &Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let ev = e.data().to_vec();
    for (i, plane) in x.data_mut().chunks_exact_mut(hw).enumerate() {
        let b = ev[(i / c) * c + i % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
    debug_assert_eq!(ev.len(), n * c);
}

fn sum_spatial<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let sums = x.data().chunks_exact(h * w).map(|p| p.iter().copied().sum()).collect();
    Tensor::from_vec(&[n, c], sums)
}

/// GroupNorm, 1x1 projection to tokens, text cross-attention and a feed-forward
/// layer (both pre-LayerNorm residual), projection back and an outer residual.
#[derive(Clone, Debug)]
pub struct SpatialTransformer<T> {
    pub norm: GroupNorm<T>,
    pub proj_in: Conv2d<T>,
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub proj_out: Conv2d<T>,
}

crate::impl_parameterized!(SpatialTransformer { norm, proj_in, ln1, attn, ln2, ff1, ff2, proj_out });

pub struct TransformerCache<T> {
    hw: (usize, usize),
    ng: NormCache<T>,
    g: Tensor<T>,
    n1: NormCache<T>,
    l1: Tensor<T>,
    att: AttentionCache<T>,
    n2: NormCache<T>,
    l2: Tensor<T>,
    f1: Tensor<T>,
    s: Tensor<T>,
    q: Tensor<T>,
}

impl<T: Float> SpatialTransformer<T> {
    pub fn new(channels: usize, ctx_dim: usize, heads: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: GroupNorm::new(groups, channels),
            proj_in: Conv2d::new(channels, channels, 1, 1, 0, rng),
            ln1: LayerNorm::new(channels),
            attn: Attention::new(channels, ctx_dim, heads, rng),
            ln2: LayerNorm::new(channels),
            ff1: Linear::new(channels, 4 * channels, true, rng),
            ff2: Linear::new(4 * channels, channels, true, rng),
            proj_out: Conv2d::new(channels, channels, 1, 1, 0, rng),
        }
    }

    pub fn forward_train(
        &self,
        x: &Tensor<T>,
        ctx: &Tensor<T>,
        mask: Option<&[bool]>,
    ) -> (Tensor<T>, TransformerCache<T>) {
        let (_, _, h, w) = x.dims4();
        let (g, ng) = self.norm.forward_train(x);
        let tok = nchw_to_tokens(&self.proj_in.forward(&g));
        let (l1, n1) = self.ln1.forward_train(&tok);
        let (a, att) = self.attn.forward_train(&l1, ctx, mask);
        let h1 = tok.add(&a);
        let (l2, n2) = self.ln2.forward_train(&h1);
        let f1 = self.ff1.forward(&l2);
        let s = silu(&f1);
        let h2 = h1.add(&self.ff2.forward(&s));
        let q = tokens_to_nchw(&h2, h, w);
        let out = x.add(&self.proj_out.forward(&q));
        let cache = TransformerCache {
            hw: (h, w),
            ng,
            g,
            n1,
            l1,
            att,
            n2,
            l2,
            f1,
            s,
            q,
        };
        (out, cache)
    }

    /// Returns `(dx, dctx)`.
    pub fn backward(&mut self, cache: &TransformerCache<T>, ctx: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let dq = self.proj_out.backward(&cache.q, dy, true).unwrap();
        let dh2 = nchw_to_tokens(&dq);
        let ds = self.ff2.backward(&cache.s, &dh2);
        let dl2 = self.ff1.backward(&cache.l2, &silu_backward(&cache.f1, &ds));
        let dh1 = dh2.add(&self.ln2.backward(&cache.n2, &dl2));
        let (dl1, dctx) = self.attn.backward(&cache.l1, ctx, &cache.att, &dh1);
        let dtok = dh1.add(&self.ln1.backward(&cache.n1, &dl1));
        let dp = tokens_to_nchw(&dtok, cache.hw.0, cache.hw.1);
        let dg = self.proj_in.backward(&cache.g, &dp, true).unwrap();
        let mut dx = self.norm.backward(&cache.ng, &dg);
        dx.add_assign(dy);
        (dx, dctx)
    }
}

/// One step of a U-Net block sequence.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    /// Plain or strided convolution (stem and downsampling).
    Conv(Conv2d<T>),
    Res(ResBlock<T>),
    Attn(SpatialTransformer<T>),
    /// Nearest-neighbour 2x upsampling followed by a convolution.
    Up(Conv2d<T>),
}

pub enum LayerCache<T> {
    Conv(Tensor<T>),
    Res(ResCache<T>),
    Attn(TransformerCache<T>),
    Up(Tensor<T>),
}

impl<T: Float> Parameterized<T> for Layer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Layer::Conv(c) | Layer::Up(c) => c.visit(prefix, f),
            Layer::Res(r) => r.visit(prefix, f),
            Layer::Attn(a) => a.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Layer::Conv(c) | Layer::Up(c) => c.visit_mut(prefix, f),
            Layer::Res(r) => r.visit_mut(prefix, f),
            Layer::Attn(a) => a.visit_mut(prefix, f),
        }
    }
}

/// Per-call conditioning shared by every layer of a block.
pub struct BlockInput<'a, T> {
    /// `SiLU(temb)`, `(n, temb_dim)`.
    pub s: &'a Tensor<T>,
    /// Text context `(n, len, d_text)`.
    pub ctx: &'a Tensor<T>,
    pub mask: &'a [bool],
}

/// Gradients a block hands back besides `dx`.
pub struct BlockGrads<T> {
    pub ds: Tensor<T>,
    pub dctx: Tensor<T>,
}

impl<T: Float> BlockGrads<T> {
    pub fn zeros(s: &Tensor<T>, ctx: &Tensor<T>) -> Self {
        Self {
            ds: Tensor::zeros(s.shape()),
            dctx: Tensor::zeros(ctx.shape()),
        }
    }
}

pub type Block<T> = Vec<Layer<T>>;

pub fn block_forward<T: Float>(
    block: &[Layer<T>],
    x: &Tensor<T>,
    input: &BlockInput<'_, T>,
) -> (Tensor<T>, Vec<LayerCache<T>>) {
    let mut caches = Vec::with_capacity(block.len());
    let mut h = x.clone();
    for layer in block {
        let (out, cache) = match layer {
            Layer::Conv(c) => (c.forward(&h), LayerCache::Conv(h)),
            Layer::Res(r) => {
                let (out, cache) = r.forward_train(&h, input.s);
                (out, LayerCache::Res(cache))
            }
            Layer::Attn(a) => {
                let (out, cache) = a.forward_train(&h, input.ctx, Some(input.mask));
                (out, LayerCache::Attn(cache))
            }
            Layer::Up(c) => {
                let u = upsample_nearest2x(&h);
                (c.forward(&u), LayerCache::Up(u))
            }
        };
        caches.push(cache);
        h = out;
    }
    (h, caches)
}

/// Backpropagates through a block, adding into `grads`. Returns `dx` unless
/// `need_dx` is false and the first layer is a convolution.
pub fn block_backward<T: Float>(
    block: &mut [Layer<T>],
    caches: &[LayerCache<T>],
    input: &BlockInput<'_, T>,
    dy: Tensor<T>,
    need_dx: bool,
    grads: &mut BlockGrads<T>,
) -> Option<Tensor<T>> {
    let mut d = Some(dy);
    for (i, (layer, cache)) in block.iter_mut().zip(caches).enumerate().rev() {
        let dy = d.take().expect("gradient present");
        let want = need_dx || i > 0;
        d = match (layer, cache) {
            (Layer::Conv(c), LayerCache::Conv(x)) => c.backward(x, &dy, want),
            (Layer::Res(r), LayerCache::Res(cache)) => {
                let (dx, ds) = r.backward(cache, input.s, &dy);
                grads.ds.add_assign(&ds);
                Some(dx)
            }
            (Layer::Attn(a), LayerCache::Attn(cache)) => {
                let (dx, dctx) = a.backward(cache, input.ctx, &dy);
                grads.dctx.add_assign(&dctx);
                Some(dx)
            }
            (Layer::Up(c), LayerCache::Up(u)) => {
                let du = c.backward(u, &dy, true).unwrap();
                Some(upsample_nearest2x_backward(&du))
            }
            _ => unreachable!("cache does not match layer"),
        };
        if d.is_none() {
            return None;
        }
    }
    d
}

/// Block widths are read from the layers themselves.
pub fn block_out_channels<T: Float>(block: &[Layer<T>]) -> usize {
    match block.last().expect("empty block") {
        Layer::Conv(c) | Layer::Up(c) => c.c_out,
        Layer::Res(r) => r.conv2.c_out,
        Layer::Attn(a) => a.proj_out.c_out,
    }
}

pub(crate) fn visit_blocks<T: Float>(
    blocks: &[Block<T>],
    prefix: &str,
    f: &mut dyn FnMut(&str, &Param<T>),
) {
    for (i, block) in blocks.iter().enumerate() {
        for (j, layer) in block.iter().enumerate() {
            layer.visit(&join(prefix, &format!("{i}.{j}")), f);
        }
    }
}

pub(crate) fn visit_blocks_mut<T: Float>(
    blocks: &mut [Block<T>],
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Param<T>),
) {
    for (i, block) in blocks.iter_mut().enumerate() {
        for (j, layer) in block.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("{i}.{j}")), f);
        }
    }
}
