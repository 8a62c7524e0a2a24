//! Toy text encoder over the closed caption vocabulary.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{token_id, VOCAB};
use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, Attention, AttentionCache, LayerNorm, Linear, NormCache, Param};
use crate::tensor::{Float, Tensor};

/// Token ids of a batch of captions, padded to a fixed context length.
/// Empty captions stand for dropped text and encode to the null embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    pub len: usize,
    pub ids: Vec<usize>,
    /// True where a real token sits.
    pub valid: Vec<bool>,
    /// True for items whose text was dropped.
    pub null: Vec<bool>,
}

impl TextTokens {
    pub fn encode<S: AsRef<str>>(captions: &[S], len: usize) -> Result<Self> {
        let mut ids = vec![0; captions.len() * len];
        let mut valid = vec![false; captions.len() * len];
        let mut null = Vec::with_capacity(captions.len());
        for (i, caption) in captions.iter().enumerate() {
            let words: Vec<&str> = caption.as_ref().split_whitespace().collect();
            if words.len() > len {
                return Err(Error::CaptionTooLong(words.len(), len));
            }
            for (j, w) in words.iter().enumerate() {
                ids[i * len + j] = token_id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))?;
                valid[i * len + j] = true;
            }
            null.push(words.is_empty());
        }
        Ok(Self { len, ids, valid, null })
    }

    /// Every item replaced by the null text.
    pub fn nulled(&self) -> Self {
        Self {
            len: self.len,
            ids: vec![0; self.ids.len()],
            valid: vec![false; self.valid.len()],
            null: vec![true; self.null.len()],
        }
    }

    pub fn batch(&self) -> usize {
        self.null.len()
    }

    /// Cross-attention key mask: padding hidden, null items fully visible so
    /// their all-zero context is attended uniformly.
    pub fn attention_mask(&self) -> Vec<bool> {
        let mut mask = self.valid.clone();
        for (i, &n) in self.null.iter().enumerate() {
            if n {
                mask[i * self.len..(i + 1) * self.len].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

#[derive(Clone, Debug)]
pub struct TextLayer<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

crate::impl_parameterized!(TextLayer { ln1, attn, ln2, mlp1, mlp2 });

struct TextLayerCache<T> {
    n1: NormCache<T>,
    l1: Tensor<T>,
    att: AttentionCache<T>,
    n2: NormCache<T>,
    l2: Tensor<T>,
    m1: Tensor<T>,
}

/// Token + position embeddings, pre-LayerNorm self-attention layers and a
/// final LayerNorm.
#[derive(Clone, Debug)]
pub struct TextEncoder<T> {
    pub token_embedding: Param<T>,
    pub position_embedding: Param<T>,
    pub layers: Vec<TextLayer<T>>,
    pub final_norm: LayerNorm<T>,
    pub dim: usize,
    pub len: usize,
}

crate::impl_parameterized!(TextEncoder { token_embedding, position_embedding, layers, final_norm });

pub struct TextCache<T> {
    tokens: TextTokens,
    layers: Vec<TextLayerCache<T>>,
    final_cache: NormCache<T>,
}

impl<T: Float> TextEncoder<T> {
    pub fn new(dim: usize, heads: usize, layers: usize, len: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            token_embedding: Param::uniform(&[VOCAB.len(), dim], 1.0, rng),
            position_embedding: Param::uniform(&[len, dim], 0.1, rng),
            layers: (0..layers)
                .map(|_| TextLayer {
                    ln1: LayerNorm::new(dim),
                    attn: Attention::new(dim, dim, heads, rng),
                    ln2: LayerNorm::new(dim),
                    mlp1: Linear::new(dim, 4 * dim, true, rng),
                    mlp2: Linear::new(4 * dim, dim, true, rng),
                })
                .collect(),
            final_norm: LayerNorm::new(dim),
            dim,
            len,
        }
    }

    pub fn encode(&self, tokens: &TextTokens) -> Tensor<T> {
        self.forward_train(tokens).0
    }

    /// Returns the `(n, len, dim)` context; null items are exactly zero.
    pub fn forward_train(&self, tokens: &TextTokens) -> (Tensor<T>, TextCache<T>) {
        assert_eq!(tokens.len, self.len, "text context length");
        let (n, len, d) = (tokens.batch(), self.len, self.dim);
        let mut h = vec![T::ZERO; n * len * d];
        for (k, row) in h.chunks_exact_mut(d).enumerate() {
            let (id, pos) = (tokens.ids[k], k % len);
            let te = &self.token_embedding.value[id * d..(id + 1) * d];
            let pe = &self.position_embedding.value[pos * d..(pos + 1) * d];
            for j in 0..d {
                row[j] = te[j] + pe[j];
            }
        }
        let mut h = Tensor::from_vec(&[n, len, d], h);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (l1, n1) = layer.ln1.forward_train(&h);
            let (a, att) = layer.attn.forward_train(&l1, &l1, Some(&tokens.valid));
            h.add_assign(&a);
            let (l2, n2) = layer.ln2.forward_train(&h);
            let m1 = layer.mlp1.forward(&l2);
            h.add_assign(&layer.mlp2.forward(&silu(&m1)));
            caches.push(TextLayerCache { n1, l1, att, n2, l2, m1 });
        }
        let (mut out, final_cache) = self.final_norm.forward_train(&h);
        for (i, &null) in tokens.null.iter().enumerate() {
            if null {
                out.item_mut(i).iter_mut().for_each(|v| *v = T::ZERO);
            }
        }
        let cache = TextCache {
            tokens: tokens.clone(),
            layers: caches,
            final_cache,
        };
        (out, cache)
    }

    pub fn backward(&mut self, cache: &TextCache<T>, dctx: &Tensor<T>) {
        let tokens = &cache.tokens;
        let mut dy = dctx.clone();
        for (i, &null) in tokens.null.iter().enumerate() {
            if null {
                dy.item_mut(i).iter_mut().for_each(|v| *v = T::ZERO);
            }
        }
        let mut dh = self.final_norm.backward(&cache.final_cache, &dy);
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            let dm = layer.mlp2.backward(&silu(&c.m1), &dh);
            let dl2 = layer.mlp1.backward(&c.l2, &silu_backward(&c.m1, &dm));
            dh.add_assign(&layer.ln2.backward(&c.n2, &dl2));
            let (dq, dkv) = layer.attn.backward(&c.l1, &c.l1, &c.att, &dh);
            let dl1 = dq.add(&dkv);
            dh.add_assign(&layer.ln1.backward(&c.n1, &dl1));
        }
        let d = self.dim;
        let len = self.len;
        let train_tok = self.token_embedding.trainable();
        let train_pos = self.position_embedding.trainable();
        for (k, row) in dh.data().chunks_exact(d).enumerate() {
            if tokens.null[k / len] {
                continue;
            }
            let (id, pos) = (tokens.ids[k], k % len);
            for j in 0..d {
                if train_tok {
                    self.token_embedding.grad[id * d + j] += row[j];
                }
                if train_pos {
                    self.position_embedding.grad[pos * d + j] += row[j];
                }
            }
        }
    }
}
