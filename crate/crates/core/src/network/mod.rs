//! The denoiser: a text-conditioned U-Net, and the control branch that reads
//! the image part of a prompt and feeds the U-Net through zero-initialized
//! 1x1 connectors.

mod blocks;
mod text;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{timestep_features, Layer, ResBlock, SpatialTransformer, TimeEmbed};
pub use text::{TextEncoder, TextTokens};

use self::blocks::{
    block_backward, block_forward, block_out_channels, visit_blocks, visit_blocks_mut, Block, BlockGrads,
    BlockInput, LayerCache, TimeEmbedCache,
};
use self::text::TextCache;
use crate::error::{Error, Result};
use crate::nn::{join, silu, silu_backward, Conv2d, GroupNorm, NormCache, Param, Parameterized};
use crate::tensor::{Float, Tensor};

/// Image channels in and out of the denoiser.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    /// Feature-map sizes that get a text cross-attention block.
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub norm_groups: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub text_len: usize,
    pub train_text_encoder: bool,
    /// Whether the control branch reads the example pair. Off for query-only
    /// single-task baselines.
    pub example_pair: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            base_channels: 64,
            channel_mult: vec![1, 2, 4],
            num_res_blocks: 1,
            attention_resolutions: vec![16, 8],
            heads: 4,
            norm_groups: 8,
            text_dim: 64,
            text_heads: 4,
            text_layers: 2,
            text_len: 16,
            train_text_encoder: true,
            example_pair: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult must be non-empty and positive".into());
        }
        let levels = self.channel_mult.len();
        let factor = 1 << levels.saturating_sub(1).max(1);
        if self.resolution == 0 || self.resolution % factor != 0 {
            return bad(format!(
                "resolution {} must be divisible by {factor} for {levels} levels and the prompt encoders",
                self.resolution
            ));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return bad("base_channels must be even and positive".into());
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return bad(format!(
                "base_channels {} not divisible into {} groups",
                self.base_channels, self.norm_groups
            ));
        }
        if self.num_res_blocks == 0 {
            return bad("num_res_blocks must be at least 1".into());
        }
        for &m in &self.channel_mult {
            if (m * self.base_channels) % self.heads.max(1) != 0 || self.heads == 0 {
                return bad(format!("{} channels not divisible by {} heads", m * self.base_channels, self.heads));
            }
        }
        if self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return bad("text_dim must be divisible by text_heads".into());
        }
        if self.text_len == 0 {
            return bad("text_len must be positive".into());
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Text-to-image denoiser only.
    Base,
    /// Base denoiser plus the prompt control branch.
    Prompt,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Prompt => "prompt",
        })
    }
}

/// The image part of a prompt, as `(n, 3, h, w)` batches.
#[derive(Clone, Copy)]
pub struct PromptImages<'a, T> {
    pub example_source: &'a Tensor<T>,
    pub example_target: &'a Tensor<T>,
    pub query: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub time_embed: TimeEmbed<T>,
    pub input_blocks: Vec<Block<T>>,
    pub middle: Block<T>,
    pub output_blocks: Vec<Block<T>>,
    pub out_norm: GroupNorm<T>,
    pub out_conv: Conv2d<T>,
}

/// Encoder half shared by the U-Net and its control copy.
fn build_encoder<T: Float>(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> (TimeEmbed<T>, Vec<Block<T>>, Block<T>) {
    let c = cfg.base_channels;
    let temb = cfg.time_dim();
    let g = cfg.norm_groups;
    let time_embed = TimeEmbed::new(c, temb, rng);
    let mut blocks: Vec<Block<T>> = vec![vec![Layer::Conv(Conv2d::new(IMAGE_CHANNELS, c, 3, 1, 1, rng))]];
    let mut ch = c;
    let levels = cfg.channel_mult.len();
    for (level, &mult) in cfg.channel_mult.iter().enumerate() {
        let attn = cfg.attention_resolutions.contains(&cfg.level_resolution(level));
        for _ in 0..cfg.num_res_blocks {
            let co = mult * c;
            let mut block = vec![Layer::Res(ResBlock::new(ch, co, temb, g, rng))];
            if attn {
                block.push(Layer::Attn(SpatialTransformer::new(co, cfg.text_dim, cfg.heads, g, rng)));
            }
            blocks.push(block);
            ch = co;
        }
        if level + 1 < levels {
            blocks.push(vec![Layer::Conv(Conv2d::new(ch, ch, 3, 2, 1, rng))]);
        }
    }
    let mid_attn = SpatialTransformer::new(ch, cfg.text_dim, cfg.heads, g, rng);
    let middle = vec![
        Layer::Res(ResBlock::new(ch, ch, temb, g, rng)),
        Layer::Attn(mid_attn),
        Layer::Res(ResBlock::new(ch, ch, temb, g, rng)),
    ];
    (time_embed, blocks, middle)
}

impl<T: Float> UNet<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let (time_embed, input_blocks, middle) = build_encoder(cfg, rng);
        let c = cfg.base_channels;
        let temb = cfg.time_dim();
        let g = cfg.norm_groups;
        let mut skips: Vec<usize> = input_blocks.iter().map(|b| block_out_channels(b)).collect();
        let mut ch = block_out_channels(&middle);
        let mut output_blocks = Vec::new();
        for (level, &mult) in cfg.channel_mult.iter().enumerate().rev() {
            let attn = cfg.attention_resolutions.contains(&cfg.level_resolution(level));
            for i in 0..=cfg.num_res_blocks {
                let skip = skips.pop().expect("skip per decoder block");
                let co = mult * c;
                let mut block = vec![Layer::Res(ResBlock::new(ch + skip, co, temb, g, rng))];
                if attn {
                    block.push(Layer::Attn(SpatialTransformer::new(co, cfg.text_dim, cfg.heads, g, rng)));
                }
                ch = co;
                if level > 0 && i == cfg.num_res_blocks {
                    block.push(Layer::Up(Conv2d::new(ch, ch, 3, 1, 1, rng)));
                }
                output_blocks.push(block);
            }
        }
        debug_assert!(skips.is_empty());
        Self {
            time_embed,
            input_blocks,
            middle,
            output_blocks,
            out_norm: GroupNorm::new(g, ch),
            out_conv: Conv2d::new(ch, IMAGE_CHANNELS, 3, 1, 1, rng),
        }
    }
}

impl<T: Float> Parameterized<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.time_embed.visit(&join(prefix, "time_embed"), f);
        visit_blocks(&self.input_blocks, &join(prefix, "input_blocks"), f);
        visit_blocks(std::slice::from_ref(&self.middle), &join(prefix, "middle"), f);
        visit_blocks(&self.output_blocks, &join(prefix, "output_blocks"), f);
        self.out_norm.visit(&join(prefix, "out_norm"), f);
        self.out_conv.visit(&join(prefix, "out_conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.time_embed.visit_mut(&join(prefix, "time_embed"), f);
        visit_blocks_mut(&mut self.input_blocks, &join(prefix, "input_blocks"), f);
        visit_blocks_mut(std::slice::from_mut(&mut self.middle), &join(prefix, "middle"), f);
        visit_blocks_mut(&mut self.output_blocks, &join(prefix, "output_blocks"), f);
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
        self.out_conv.visit_mut(&join(prefix, "out_conv"), f);
    }
}

/// Stacked convolutions with one stride-2 stage: `in -> c/2 -> c/2 -> c (stride 2) -> c`,
/// SiLU between layers and none after the last.
#[derive(Clone, Debug)]
pub struct PromptEncoder<T> {
    pub convs: Vec<Conv2d<T>>,
}

crate::impl_parameterized!(PromptEncoder { convs });

pub struct PromptEncoderCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

impl<T: Float> PromptEncoder<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = c_out / 2;
        let mut convs = vec![
            Conv2d::new(c_in, mid, 3, 1, 1, rng),
            Conv2d::new(mid, mid, 3, 1, 1, rng),
            Conv2d::new(mid, c_out, 3, 2, 1, rng),
            Conv2d::new(c_out, c_out, 3, 1, 1, rng),
        ];
        // small-variance output layer
        let last = convs.last_mut().unwrap();
        let k = T::from_f64(0.1);
        last.weight.value.iter_mut().for_each(|v| *v *= k);
        last.bias.value.iter_mut().for_each(|v| *v *= k);
        Self { convs }
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, PromptEncoderCache<T>) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len() - 1);
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(&h);
            inputs.push(h);
            h = if i + 1 < self.convs.len() {
                let a = silu(&y);
                pre.push(y);
                a
            } else {
                y
            };
        }
        (h, PromptEncoderCache { inputs, pre })
    }

    pub fn backward(&mut self, cache: &PromptEncoderCache<T>, dy: &Tensor<T>) {
        let mut d = dy.clone();
        for i in (0..self.convs.len()).rev() {
            match self.convs[i].backward(&cache.inputs[i], &d, i > 0) {
                Some(dx) => d = silu_backward(&cache.pre[i - 1], &dx),
                None => break,
            }
        }
    }
}

/// Trainable copy of the U-Net encoder and middle block that sees the prompt
/// images, with one zero-initialized 1x1 connector per encoder output and
/// one after the middle block.
#[derive(Clone, Debug)]
pub struct ControlBranch<T> {
    pub time_embed: TimeEmbed<T>,
    pub input_blocks: Vec<Block<T>>,
    pub middle: Block<T>,
    pub connectors: Vec<Conv2d<T>>,
    pub middle_connector: Conv2d<T>,
    pub pair_encoder: Option<PromptEncoder<T>>,
    pub query_encoder: PromptEncoder<T>,
    /// Encoder block whose output receives the prompt features.
    pub inject_at: usize,
}

impl<T: Float> Parameterized<T> for ControlBranch<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.time_embed.visit(&join(prefix, "time_embed"), f);
        visit_blocks(&self.input_blocks, &join(prefix, "input_blocks"), f);
        visit_blocks(std::slice::from_ref(&self.middle), &join(prefix, "middle"), f);
        self.connectors.visit(&join(prefix, "connectors"), f);
        self.middle_connector.visit(&join(prefix, "middle_connector"), f);
        self.pair_encoder.visit(&join(prefix, "pair_encoder"), f);
        self.query_encoder.visit(&join(prefix, "query_encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.time_embed.visit_mut(&join(prefix, "time_embed"), f);
        visit_blocks_mut(&mut self.input_blocks, &join(prefix, "input_blocks"), f);
        visit_blocks_mut(std::slice::from_mut(&mut self.middle), &join(prefix, "middle"), f);
        self.connectors.visit_mut(&join(prefix, "connectors"), f);
        self.middle_connector.visit_mut(&join(prefix, "middle_connector"), f);
        self.pair_encoder.visit_mut(&join(prefix, "pair_encoder"), f);
        self.query_encoder.visit_mut(&join(prefix, "query_encoder"), f);
    }
}

impl<T: Float> ControlBranch<T> {
    /// Copies the encoder and middle block of `unet`; connectors start at zero
    /// and the prompt encoders are freshly initialized from `rng`.
    pub fn from_base(unet: &UNet<T>, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.base_channels * cfg.channel_mult[0];
        let connectors = unet
            .input_blocks
            .iter()
            .map(|b| {
                let ch = block_out_channels(b);
                Conv2d::zeroed(ch, ch, 1, 1, 0)
            })
            .collect();
        let mid = block_out_channels(&unet.middle);
        let inject_at = unet
            .input_blocks
            .iter()
            .position(|b| matches!(b.as_slice(), [Layer::Conv(conv)] if conv.stride == 2))
            .unwrap_or(0);
        Self {
            time_embed: unet.time_embed.clone(),
            input_blocks: unet.input_blocks.clone(),
            middle: unet.middle.clone(),
            connectors,
            middle_connector: Conv2d::zeroed(mid, mid, 1, 1, 0),
            pair_encoder: cfg.example_pair.then(|| PromptEncoder::new(2 * IMAGE_CHANNELS, c, rng)),
            query_encoder: PromptEncoder::new(IMAGE_CHANNELS, c, rng),
            inject_at,
        }
    }

    /// Sum of the pair and query encodings.
    pub fn encode_prompt_images(&self, prompt: &PromptImages<'_, T>) -> Tensor<T> {
        let q = self.query_encoder.forward_train(prompt.query).0;
        match &self.pair_encoder {
            Some(enc) => {
                let pair = Tensor::cat_channels(prompt.example_source, prompt.example_target);
                enc.forward_train(&pair).0.add(&q)
            }
            None => q,
        }
    }
}

struct ControlCache<T> {
    temb: Tensor<T>,
    temb_cache: TimeEmbedCache<T>,
    s: Tensor<T>,
    pair: Option<PromptEncoderCache<T>>,
    query: PromptEncoderCache<T>,
    blocks: Vec<Vec<LayerCache<T>>>,
    outs: Vec<Tensor<T>>,
    middle: Vec<LayerCache<T>>,
    middle_out: Tensor<T>,
}

/// Text encoder, U-Net and (in the prompt phase) the control branch.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub text: TextEncoder<T>,
    pub unet: UNet<T>,
    pub control: Option<ControlBranch<T>>,
}

pub struct ModelCache<T> {
    text: TextCache<T>,
    ctx: Tensor<T>,
    mask: Vec<bool>,
    temb: Tensor<T>,
    temb_cache: TimeEmbedCache<T>,
    s: Tensor<T>,
    inputs: Vec<Vec<LayerCache<T>>>,
    skip_channels: Vec<usize>,
    middle: Vec<LayerCache<T>>,
    outputs: Vec<Vec<LayerCache<T>>>,
    out_norm: NormCache<T>,
    out_g: Tensor<T>,
    out_a: Tensor<T>,
    control: Option<ControlCache<T>>,
}

/// Parameter-name prefixes excluded from updates by [`Model::lock_encoder`].
pub const LOCKED_PREFIXES: [&str; 2] = ["unet.time_embed.", "unet.input_blocks."];

impl<T: Float> Model<T> {
    /// A base-phase model with every weight drawn from `seed`.
    pub fn new_base(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::new(config.text_dim, config.text_heads, config.text_layers, config.text_len, &mut rng);
        let unet = UNet::new(config, &mut rng);
        let mut model = Self {
            config: config.clone(),
            text,
            unet,
            control: None,
        };
        model.apply_text_freeze();
        Ok(model)
    }

    pub fn phase(&self) -> Phase {
        if self.control.is_some() {
            Phase::Prompt
        } else {
            Phase::Base
        }
    }

    /// Builds the prompt-phase model: base weights kept, control branch copied
    /// from the base encoder, zero connectors, fresh prompt encoders.
    pub fn init_control_from_base(&self, seed: u64) -> Result<Self> {
        if self.phase() != Phase::Base {
            return Err(Error::PhaseMismatch {
                expected: Phase::Base.to_string(),
                found: self.phase().to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = self.clone();
        model.control = Some(ControlBranch::from_base(&self.unet, &self.config, &mut rng));
        model.visit_mut("", &mut |_, p| p.frozen = false);
        model.apply_text_freeze();
        Ok(model)
    }

    /// Freezes the base encoder blocks and the base timestep MLP.
    pub fn lock_encoder(&mut self) {
        self.visit_mut("", &mut |name, p| {
            if LOCKED_PREFIXES.iter().any(|pre| name.starts_with(pre)) {
                p.frozen = true;
            }
        });
    }

    pub fn is_locked(&self) -> bool {
        let mut locked = true;
        self.visit("", &mut |name, p| {
            if LOCKED_PREFIXES.iter().any(|pre| name.starts_with(pre)) && !p.frozen {
                locked = false;
            }
        });
        locked
    }

    fn apply_text_freeze(&mut self) {
        if !self.config.train_text_encoder {
            self.text.set_frozen(true);
        }
    }

    pub fn encode_text(&self, tokens: &TextTokens) -> Tensor<T> {
        self.text.encode(tokens)
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        t: &[usize],
        tokens: &TextTokens,
        prompt: Option<&PromptImages<'_, T>>,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_train(x, t, tokens, prompt)?.0)
    }

    fn check_inputs(
        &self,
        x: &Tensor<T>,
        t: &[usize],
        tokens: &TextTokens,
        prompt: Option<&PromptImages<'_, T>>,
    ) -> Result<()> {
        let r = self.config.resolution;
        if x.shape().len() != 4 || x.shape()[1..] != [IMAGE_CHANNELS, r, r] {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input {:?}, expected (n, {IMAGE_CHANNELS}, {r}, {r})",
                x.shape()
            )));
        }
        let n = x.shape()[0];
        if t.len() != n || tokens.batch() != n || tokens.len != self.config.text_len {
            return Err(Error::ShapeMismatch(format!(
                "batch of {n} images with {} timesteps and {} captions",
                t.len(),
                tokens.batch()
            )));
        }
        if let Some(p) = prompt {
            if self.control.is_none() {
                return Err(Error::InvalidPrompt("a base-phase model takes no prompt images".into()));
            }
            for (name, img) in [
                ("example source", p.example_source),
                ("example target", p.example_target),
                ("query", p.query),
            ] {
                if img.shape() != x.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "{name} image {:?} does not match {:?}",
                        img.shape(),
                        x.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forward pass keeping what [`Model::backward`] needs. Without prompt
    /// images the control branch is skipped.
    pub fn forward_train(
        &self,
        x: &Tensor<T>,
        t: &[usize],
        tokens: &TextTokens,
        prompt: Option<&PromptImages<'_, T>>,
    ) -> Result<(Tensor<T>, ModelCache<T>)> {
        self.check_inputs(x, t, tokens, prompt)?;
        let (ctx, text_cache) = self.text.forward_train(tokens);
        let mask = tokens.attention_mask();
        let unet = &self.unet;
        let (temb, temb_cache) = unet.time_embed.forward_train(t);
        let s = silu(&temb);
        let input = BlockInput {
            s: &s,
            ctx: &ctx,
            mask: &mask,
        };
        let mut hs = Vec::with_capacity(unet.input_blocks.len());
        let mut inputs = Vec::with_capacity(unet.input_blocks.len());
        let mut h = x.clone();
        for block in &unet.input_blocks {
            let (out, cache) = block_forward(block, &h, &input);
            hs.push(out.clone());
            inputs.push(cache);
            h = out;
        }
        let (mut h, middle) = block_forward(&unet.middle, &h, &input);
        let control = match (&self.control, prompt) {
            (Some(ctrl), Some(p)) => {
                let (skips, mid, cache) = control_forward(ctrl, x, t, &ctx, &mask, p);
                h.add_assign(&mid);
                for (hs_i, sk) in hs.iter_mut().zip(&skips) {
                    hs_i.add_assign(sk);
                }
                Some(cache)
            }
            _ => None,
        };
        let skip_channels = hs.iter().map(|s| s.shape()[1]).collect();
        let mut outputs = Vec::with_capacity(unet.output_blocks.len());
        for block in &unet.output_blocks {
            let skip = hs.pop().expect("skip available");
            let (out, cache) = block_forward(block, &Tensor::cat_channels(&h, &skip), &input);
            outputs.push(cache);
            h = out;
        }
        let (out_g, out_norm) = unet.out_norm.forward_train(&h);
        let out_a = silu(&out_g);
        let eps = unet.out_conv.forward(&out_a);
        let cache = ModelCache {
            text: text_cache,
            ctx,
            mask,
            temb,
            temb_cache,
            s,
            inputs,
            skip_channels,
            middle,
            outputs,
            out_norm,
            out_g,
            out_a,
            control,
        };
        Ok((eps, cache))
    }

    /// Accumulates parameter gradients of `sum(d_eps * eps_hat)`.
    pub fn backward(&mut self, cache: &ModelCache<T>, d_eps: &Tensor<T>) {
        let unet = &mut self.unet;
        let input = BlockInput {
            s: &cache.s,
            ctx: &cache.ctx,
            mask: &cache.mask,
        };
        let da = unet.out_conv.backward(&cache.out_a, d_eps, true).unwrap();
        let mut dh = unet.out_norm.backward(&cache.out_norm, &silu_backward(&cache.out_g, &da));
        let mut grads = BlockGrads::zeros(&cache.s, &cache.ctx);
        let n_in = unet.input_blocks.len();
        let mut dskips: Vec<Option<Tensor<T>>> = (0..n_in).map(|_| None).collect();
        for (k, (block, bc)) in unet.output_blocks.iter_mut().zip(&cache.outputs).enumerate().rev() {
            let idx = n_in - 1 - k;
            let dcat = block_backward(block, bc, &input, dh, true, &mut grads).unwrap();
            let c_total = dcat.shape()[1];
            let (d_h, d_skip) = dcat.split_channels(c_total - cache.skip_channels[idx]);
            dskips[idx] = Some(d_skip);
            dh = d_h;
        }
        let dskips: Vec<Tensor<T>> = dskips.into_iter().map(|d| d.expect("every skip consumed")).collect();
        let mut dctx = Tensor::zeros(cache.ctx.shape());
        if let (Some(ctrl), Some(cc)) = (self.control.as_mut(), cache.control.as_ref()) {
            dctx.add_assign(&control_backward(ctrl, cc, &cache.ctx, &cache.mask, &dskips, &dh));
        }
        let need_encoder = self.config.train_text_encoder
            || unet.input_blocks.iter().any(|b| b.iter().any(|l| l.any_trainable()))
            || unet.middle.iter().any(|l| l.any_trainable())
            || unet.time_embed.lin1.weight.trainable();
        if need_encoder {
            let mut d = block_backward(&mut unet.middle, &cache.middle, &input, dh, true, &mut grads).unwrap();
            for i in (0..n_in).rev() {
                d.add_assign(&dskips[i]);
                match block_backward(&mut unet.input_blocks[i], &cache.inputs[i], &input, d, i > 0, &mut grads) {
                    Some(next) => d = next,
                    None => break,
                }
            }
            unet.time_embed
                .backward(&cache.temb_cache, &silu_backward(&cache.temb, &grads.ds));
        }
        if self.config.train_text_encoder {
            dctx.add_assign(&grads.dctx);
            self.text.backward(&cache.text, &dctx);
        }
    }
}

fn control_forward<T: Float>(
    ctrl: &ControlBranch<T>,
    x: &Tensor<T>,
    t: &[usize],
    ctx: &Tensor<T>,
    mask: &[bool],
    prompt: &PromptImages<'_, T>,
) -> (Vec<Tensor<T>>, Tensor<T>, ControlCache<T>) {
    let (temb, temb_cache) = ctrl.time_embed.forward_train(t);
    let s = silu(&temb);
    let input = BlockInput { s: &s, ctx, mask };
    let (mut hint, query) = ctrl.query_encoder.forward_train(prompt.query);
    let pair = ctrl.pair_encoder.as_ref().map(|enc| {
        let pair_in = Tensor::cat_channels(prompt.example_source, prompt.example_target);
        let (hp, cache) = enc.forward_train(&pair_in);
        hint.add_assign(&hp);
        cache
    });
    let mut h = x.clone();
    let mut blocks = Vec::with_capacity(ctrl.input_blocks.len());
    let mut outs = Vec::with_capacity(ctrl.input_blocks.len());
    let mut skips = Vec::with_capacity(ctrl.input_blocks.len());
    for (i, block) in ctrl.input_blocks.iter().enumerate() {
        let (mut out, cache) = block_forward(block, &h, &input);
        if i == ctrl.inject_at {
            out.add_assign(&hint);
        }
        skips.push(ctrl.connectors[i].forward(&out));
        blocks.push(cache);
        outs.push(out.clone());
        h = out;
    }
    let (middle_out, middle) = block_forward(&ctrl.middle, &h, &input);
    let mid = ctrl.middle_connector.forward(&middle_out);
    let cache = ControlCache {
        temb,
        temb_cache,
        s,
        pair,
        query,
        blocks,
        outs,
        middle,
        middle_out,
    };
    (skips, mid, cache)
}

/// Returns the control branch's contribution to the text-context gradient.
fn control_backward<T: Float>(
    ctrl: &mut ControlBranch<T>,
    cache: &ControlCache<T>,
    ctx: &Tensor<T>,
    mask: &[bool],
    dskips: &[Tensor<T>],
    dmid: &Tensor<T>,
) -> Tensor<T> {
    let input = BlockInput {
        s: &cache.s,
        ctx,
        mask,
    };
    let mut grads = BlockGrads::zeros(&cache.s, ctx);
    let dm = ctrl.middle_connector.backward(&cache.middle_out, dmid, true).unwrap();
    let mut d = block_backward(&mut ctrl.middle, &cache.middle, &input, dm, true, &mut grads).unwrap();
    for i in (0..ctrl.input_blocks.len()).rev() {
        d.add_assign(&ctrl.connectors[i].backward(&cache.outs[i], &dskips[i], true).unwrap());
        if i == ctrl.inject_at {
            if let (Some(enc), Some(pc)) = (ctrl.pair_encoder.as_mut(), cache.pair.as_ref()) {
                enc.backward(pc, &d);
            }
            ctrl.query_encoder.backward(&cache.query, &d);
        }
        match block_backward(&mut ctrl.input_blocks[i], &cache.blocks[i], &input, d, i > 0, &mut grads) {
            Some(next) => d = next,
            None => break,
        }
    }
    ctrl.time_embed
        .backward(&cache.temb_cache, &silu_backward(&cache.temb, &grads.ds));
    grads.dctx
}

impl<T: Float> Layer<T> {
    fn any_trainable(&self) -> bool {
        let mut any = false;
        self.visit("", &mut |_, p| any |= p.trainable());
        any
    }
}

impl<T: Float> Parameterized<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.text.visit(&join(prefix, "text"), f);
        self.unet.visit(&join(prefix, "unet"), f);
        self.control.visit(&join(prefix, "control"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.text.visit_mut(&join(prefix, "text"), f);
        self.unet.visit_mut(&join(prefix, "unet"), f);
        self.control.visit_mut(&join(prefix, "control"), f);
    }
}

impl Model<f32> {
    /// Same architecture and weights in another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut out = Model::<U>::new_base(&self.config, 0).expect("validated config");
        if let Some(ctrl) = &self.control {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            out.control = Some(ControlBranch::from_base(&out.unet, &self.config, &mut rng));
            out.control.as_mut().unwrap().inject_at = ctrl.inject_at;
        }
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push((p.value.clone(), p.frozen)));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| {
            let (v, frozen) = it.next().expect("same parameter layout");
            p.value = v.iter().map(|&x| U::from_f64(x as f64)).collect();
            p.frozen = frozen;
        });
        out
    }
}
