//! Image and text encoders.
//!
//! The default encoders are small, seeded stand-ins for a contrastive
//! vision-language backbone: a stride-2 convolutional stack producing a dense
//! embedding per stride cell, an attention pool producing one global vector,
//! and a causal transformer over prompt token embeddings. Pretrained weights
//! can be installed through [`crate::checkpoint::load_pretrained`] as long as
//! they follow the same tensor naming.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::prompting::PromptSequence;
use crate::tensor::Tensor;

/// Per-channel pixel normalization: `(v / 255 - PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

/// Built-in single-token vocabulary used to embed the predefined prompt.
pub const VOCABULARY: [&str; 8] = [
    "Text", "Word", "Character", "Letter", "Sign", "Caption", "Number", "Symbol",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Image/text embedding width `C`.
    pub embed_dim: usize,
    /// Token embedding width `D` of the text encoder input.
    pub token_dim: usize,
    /// Image downsampling ratio `s`; must be a power of two.
    pub stride: usize,
    pub image_lr_factor: f64,
    pub text_lr_factor: f64,
    pub toy_mode: bool,
    /// Channels of the first convolution; doubled per stage up to `embed_dim`.
    pub stem_width: usize,
    pub pool_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Maximum prompt length accepted by the text encoder.
    pub context_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Full-size dimensions (`C = 1024`, `D = 512`, `s = 32`).
    pub fn reference() -> Self {
        Self {
            embed_dim: 1024,
            token_dim: 512,
            stride: 32,
            image_lr_factor: 0.1,
            text_lr_factor: 0.0,
            toy_mode: false,
            stem_width: 64,
            pool_heads: 32,
            text_layers: 1,
            text_heads: 8,
            context_len: 77,
            seed: 0,
        }
    }

    /// Desk-scale dimensions used by the tests and the toy experiments.
    pub fn toy() -> Self {
        Self {
            embed_dim: 32,
            token_dim: 16,
            stride: 8,
            image_lr_factor: 0.1,
            text_lr_factor: 0.0,
            toy_mode: true,
            stem_width: 16,
            pool_heads: 2,
            text_layers: 1,
            text_heads: 2,
            context_len: 40,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.embed_dim == 0 || self.token_dim == 0 || self.stride == 0 {
            return bad("embed_dim, token_dim and stride must be positive".into());
        }
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return bad(format!("stride {} must be a power of two >= 2", self.stride));
        }
        if !(self.image_lr_factor >= 0.0 && self.text_lr_factor >= 0.0) {
            return bad("learning-rate factors must be >= 0".into());
        }
        if self.pool_heads == 0 || !self.embed_dim.is_multiple_of(self.pool_heads) {
            return bad(format!("pool_heads {} must divide embed_dim {}", self.pool_heads, self.embed_dim));
        }
        if self.text_heads == 0 || !self.token_dim.is_multiple_of(self.text_heads) {
            return bad(format!("text_heads {} must divide token_dim {}", self.text_heads, self.token_dim));
        }
        if self.stem_width == 0 || self.context_len == 0 {
            return bad("stem_width and context_len must be positive".into());
        }
        Ok(())
    }

    /// Encoder kind recorded in checkpoints.
    pub fn kind(&self) -> &'static str {
        if self.toy_mode {
            "toy"
        } else {
            "clip-import"
        }
    }

    /// Channel widths of the convolution stages.
    pub fn stage_widths(&self) -> Vec<usize> {
        let stages = self.stride.trailing_zeros() as usize;
        (0..stages)
            .map(|i| {
                if i + 1 == stages {
                    self.embed_dim
                } else {
                    (self.stem_width << i).min(self.embed_dim)
                }
            })
            .collect()
    }

    pub fn feature_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

/// A normalized `H × W × 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = Tensor::new(&[height, width, 3], data)?;
        if !data.is_finite() {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img
            .as_raw()
            .iter()
            .map(|&v| (f64::from(v) / 255.0 - PIXEL_MEAN) / PIXEL_STD)
            .collect();
        Self {
            data: Tensor::new(&[h as usize, w as usize, 3], data).expect("rgb buffer size"),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// Height and width after bottom/right zero padding to a multiple of `stride`.
    pub fn padded_size(&self, stride: usize) -> (usize, usize) {
        (
            self.height().div_ceil(stride) * stride,
            self.width().div_ceil(stride) * stride,
        )
    }

    /// Channel-first copy, zero padded at the bottom and right.
    pub fn padded_chw(&self, stride: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let (hp, wp) = self.padded_size(stride);
        let src = self.data.data();
        let mut out = vec![0.0; 3 * hp * wp];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[c * hp * wp + y * wp + x] = src[(y * w + x) * 3 + c];
                }
            }
        }
        Tensor::new(&[3, hp, wp], out).expect("padded size")
    }
}

/// Dense image embedding `H̃ × W̃ × C` aligned to stride `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    stride: usize,
    source_size: (usize, usize),
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize, source_size: (usize, usize)) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!("feature map must be 3-D, got {s:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("feature map stride must be positive".into()));
        }
        let (eh, ew) = (source_size.0.div_ceil(stride), source_size.1.div_ceil(stride));
        if s[0] != eh || s[1] != ew {
            return Err(Error::ShapeMismatch(format!(
                "feature grid {}x{} does not match source {}x{} at stride {stride}",
                s[0], s[1], source_size.0, source_size.1
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("feature map has non-finite entries".into()));
        }
        Ok(Self {
            data,
            stride,
            source_size,
        })
    }

    /// Builds a map from `[h·w, c]` row-major tokens.
    pub fn from_tokens(tokens: Tensor, h: usize, w: usize, stride: usize, source_size: (usize, usize)) -> Result<Self> {
        let (n, c) = tokens.dims2();
        if n != h * w {
            return Err(Error::dim("feature tokens", h * w, n));
        }
        Self::new(tokens.reshape(&[h, w, c])?, stride, source_size)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// The embedding vector at grid cell `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let c = self.channels();
        let off = (i * self.width() + j) * c;
        &self.data.data()[off..off + c]
    }

    /// `[h·w, c]` view of the grid, row-major over positions.
    pub fn tokens(&self) -> Tensor {
        let n = self.height() * self.width();
        self.data.clone().reshape(&[n, self.channels()]).expect("token reshape")
    }

    /// Sub-grid `rows × cols` starting at cell `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.height() || left + cols > self.width() || rows == 0 || cols == 0 {
            return Err(Error::InvalidInput("crop window outside feature map".into()));
        }
        let c = self.channels();
        let mut out = Vec::with_capacity(rows * cols * c);
        for i in top..top + rows {
            for j in left..left + cols {
                out.extend_from_slice(self.at(i, j));
            }
        }
        Self::new(
            Tensor::new(&[rows, cols, c], out)?,
            self.stride,
            (rows * self.stride, cols * self.stride),
        )
    }

    /// Per-cell L2 norm of the embedding, `[h, w]`.
    pub fn channel_norms(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let data = (0..h * w)
            .map(|p| self.at(p / w, p % w).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Tensor::new(&[h, w], data).expect("norm grid")
    }
}

/// Pooled image-level embedding `Ī`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEmbedding {
    pub data: Vec<f64>,
}

/// Text class embedding `t_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub data: Vec<f64>,
}

impl TextEmbedding {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("text embedding has non-finite entries".into()));
        }
        Ok(Self { data })
    }
}

/// Strided convolutional stack; stage `i` halves the resolution.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stages: Vec<Conv2d>,
    pub stride: usize,
    pub embed_dim: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) -> Self {
        let widths = cfg.stage_widths();
        let mut cin = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let last = i + 1 == widths.len();
                let gain = if last { 0.15 } else { 1.0 };
                let conv = Conv2d::new(
                    store,
                    init,
                    &format!("image_encoder.stage{i}"),
                    ParamGroup::Image,
                    cin,
                    cout,
                    3,
                    2,
                    gain,
                );
                cin = cout;
                conv
            })
            .collect();
        Self {
            stages,
            stride: cfg.stride,
            embed_dim: cfg.embed_dim,
        }
    }

    pub fn numel(cfg: &EncoderConfig) -> usize {
        let mut cin = 3;
        cfg.stage_widths()
            .into_iter()
            .map(|cout| {
                let n = Conv2d::numel(cin, cout, 3);
                cin = cout;
                n
            })
            .sum()
    }

    /// Encodes `image` into `[h̃·w̃, C]` tokens; returns the tokens and the grid size.
    pub fn forward(&self, g: &mut Graph, image: &Image) -> Result<(Var, (usize, usize))> {
        let (h, w) = (image.height(), image.width());
        if h < self.stride || w < self.stride {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} is smaller than one stride cell ({})",
                self.stride
            )));
        }
        if !image.data().is_finite() {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        let mut x = g.constant(image.padded_chw(self.stride));
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(g, x)?;
            if i + 1 < self.stages.len() {
                x = g.relu(x);
            }
        }
        let s = g.value(x).shape().to_vec();
        let (c, hh, ww) = (s[0], s[1], s[2]);
        let flat = g.reshape(x, &[c, hh * ww])?;
        Ok((g.transpose(flat)?, (hh, ww)))
    }

    pub fn encode(&self, store: &ParamStore, image: &Image) -> Result<FeatureMap> {
        let mut g = Graph::with_params(store);
        let (tokens, (h, w)) = self.forward(&mut g, image)?;
        FeatureMap::from_tokens(
            g.value(tokens).clone(),
            h,
            w,
            self.stride,
            (image.height(), image.width()),
        )
    }
}

/// Attention pooling: the spatial mean queries every position.
///
/// No positional encoding is added, so the pool is invariant to permutations
/// of the grid cells.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub attn: MultiHeadAttention,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) -> Self {
        let c = cfg.embed_dim;
        Self {
            attn: MultiHeadAttention::new(
                store,
                init,
                "image_encoder.attn_pool",
                ParamGroup::Image,
                c,
                c,
                c,
                c,
                cfg.pool_heads,
            ),
        }
    }

    pub fn numel(cfg: &EncoderConfig) -> usize {
        let c = cfg.embed_dim;
        MultiHeadAttention::numel(c, c, c, c)
    }

    /// `[n, C]` tokens to a `[1, C]` global vector.
    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let query = g.mean_rows(tokens)?;
        Ok(self.attn.forward(g, query, tokens, None)?.output)
    }

    pub fn pool(&self, store: &ParamStore, fm: &FeatureMap) -> Result<GlobalEmbedding> {
        let mut g = Graph::with_params(store);
        let t = g.constant(fm.tokens());
        let out = self.forward(&mut g, t)?;
        Ok(GlobalEmbedding {
            data: g.value(out).data().to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
struct TextBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: FeedForward,
}

/// Causal transformer over prompt token embeddings; the last position is
/// projected to the `C`-dimensional text embedding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub positional: ParamId,
    blocks: Vec<TextBlock>,
    ln_final: LayerNorm,
    pub projection: ParamId,
    pub token_dim: usize,
    pub context_len: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) -> Self {
        let (c, d) = (cfg.embed_dim, cfg.token_dim);
        let grp = ParamGroup::Text;
        let token_embedding = store.add("text_encoder.token_embedding", grp, init.normal(&[VOCABULARY.len(), d], 0.02));
        let positional = store.add("text_encoder.positional", grp, init.normal(&[cfg.context_len, d], 0.01));
        let blocks = (0..cfg.text_layers)
            .map(|i| {
                let name = format!("text_encoder.block{i}");
                TextBlock {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), grp, d),
                    attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), grp, d, d, d, d, cfg.text_heads),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), grp, d),
                    mlp: FeedForward::new(store, init, &format!("{name}.mlp"), grp, d, 4 * d),
                }
            })
            .collect();
        let ln_final = LayerNorm::new(store, "text_encoder.ln_final", grp, d);
        let projection = store.add(
            "text_encoder.projection",
            grp,
            init.normal(&[d, c], 1.0 / ((c * d) as f64).sqrt()),
        );
        Self {
            token_embedding,
            positional,
            blocks,
            ln_final,
            projection,
            token_dim: d,
            context_len: cfg.context_len,
        }
    }

    pub fn numel(cfg: &EncoderConfig) -> usize {
        let (c, d) = (cfg.embed_dim, cfg.token_dim);
        let block = 2 * LayerNorm::numel(d) + MultiHeadAttention::numel(d, d, d, d) + FeedForward::numel(d, 4 * d);
        VOCABULARY.len() * d + cfg.context_len * d + cfg.text_layers * block + LayerNorm::numel(d) + d * c
    }

    pub fn token_id(name: &str) -> Result<usize> {
        VOCABULARY
            .iter()
            .position(|&v| v == name)
            .ok_or_else(|| Error::Vocabulary(name.to_string()))
    }

    /// Word embedding of a vocabulary entry as a `[1, D]` node.
    pub fn embed_token(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let id = Self::token_id(name)?;
        let table = g.param(self.token_embedding);
        g.slice_rows(table, id, 1)
    }

    /// `[L, D]` prompt to `[1, C]` embedding.
    pub fn forward(&self, g: &mut Graph, prompt: Var) -> Result<Var> {
        let (len, d) = g.value(prompt).dims2();
        if d != self.token_dim {
            return Err(Error::dim("text encoder token width", self.token_dim, d));
        }
        if len == 0 || len > self.context_len {
            return Err(Error::InvalidInput(format!(
                "prompt length {len} outside 1..={}",
                self.context_len
            )));
        }
        let pos_table = g.param(self.positional);
        let pos = g.slice_rows(pos_table, 0, len)?;
        let mut x = g.add(prompt, pos)?;
        let mask = causal_mask(len);
        for b in &self.blocks {
            let h = b.ln1.forward(g, x)?;
            let a = b.attn.forward(g, h, h, Some(&mask))?.output;
            x = g.add(x, a)?;
            let h = b.ln2.forward(g, x)?;
            let m = b.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        let x = self.ln_final.forward(g, x)?;
        let last = g.slice_rows(x, len - 1, 1)?;
        let proj = g.param(self.projection);
        g.matmul(last, proj)
    }

    pub fn encode(&self, store: &ParamStore, prompt: &PromptSequence) -> Result<TextEmbedding> {
        let mut g = Graph::with_params(store);
        let p = g.constant(prompt.tokens().clone());
        let out = self.forward(&mut g, p)?;
        TextEmbedding::new(g.value(out).data().to_vec())
    }
}

fn causal_mask(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(&[len, len], m).expect("mask size")
}

/// Image encoder, attention pool and text encoder with their own weights.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub pool: AttentionPool,
    pub text: TextEncoder,
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let image = ImageEncoder::new(&mut store, &mut init, &config);
        let pool = AttentionPool::new(&mut store, &mut init, &config);
        let text = TextEncoder::new(&mut store, &mut init, &config);
        Ok(Self {
            config,
            store,
            image,
            pool,
            text,
        })
    }

    pub fn encode_image(&self, image: &Image) -> Result<FeatureMap> {
        self.image.encode(&self.store, image)
    }

    pub fn attention_pool(&self, fm: &FeatureMap) -> Result<GlobalEmbedding> {
        if fm.channels() != self.config.embed_dim {
            return Err(Error::dim("attention pool channels", self.config.embed_dim, fm.channels()));
        }
        self.pool.pool(&self.store, fm)
    }

    pub fn encode_text(&self, prompt: &PromptSequence) -> Result<TextEmbedding> {
        self.text.encode(&self.store, prompt)
    }
}
