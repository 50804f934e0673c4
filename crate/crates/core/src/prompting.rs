//! Text-encoder input assembly and image conditioning.
//!
//! The prompt fed to the text encoder is `[c₁, …, cₙ, t′]`: `n` learnable
//! token vectors followed by the word embedding of the predefined class
//! string. The language prompt generator maps the pooled image embedding to
//! a conditional cue which is added to every row of that prompt.

use crate::autograd::{Graph, Var};
use crate::encoders::{GlobalEmbedding, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Std of the Gaussian used for learnable prompt rows.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// `(n + 1) × D` text-encoder input; the last row is the predefined class token.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    tokens: Tensor,
    learnable: usize,
}

impl PromptSequence {
    pub fn new(tokens: Tensor, learnable: usize) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!("prompt must be 2-D, got {:?}", tokens.shape())));
        }
        let (rows, _) = tokens.dims2();
        if rows != learnable + 1 {
            return Err(Error::dim("prompt rows", learnable + 1, rows));
        }
        Ok(Self { tokens, learnable })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// Number of learnable rows `n`.
    pub fn learnable(&self) -> usize {
        self.learnable
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.dims2().1
    }

    pub fn len(&self) -> usize {
        self.learnable + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Image-conditioned offset `cc` added to every prompt row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalCue {
    pub data: Vec<f64>,
}

/// Word embedding of the predefined prompt string (length `D`).
pub fn embed_predefined(store: &ParamStore, text: &TextEncoder, class_name: &str) -> Result<Vec<f64>> {
    let id = TextEncoder::token_id(class_name)?;
    Ok(store.get(text.token_embedding).row(id).to_vec())
}

/// Stacks the learnable rows on top of the predefined row.
pub fn assemble_prompt(learnable: &Tensor, predefined: &[f64]) -> Result<PromptSequence> {
    let (n, d) = if learnable.numel() == 0 {
        (0, predefined.len())
    } else {
        learnable.dims2()
    };
    if predefined.len() != d {
        return Err(Error::dim("predefined prompt width", d, predefined.len()));
    }
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(learnable.data());
    data.extend_from_slice(predefined);
    PromptSequence::new(Tensor::new(&[n + 1, d], data)?, n)
}

/// Broadcast-adds `cc` to every row of the prompt, learnable rows included.
pub fn condition_prompt(p: &PromptSequence, cc: &ConditionalCue) -> Result<PromptSequence> {
    let d = p.token_dim();
    if cc.data.len() != d {
        return Err(Error::dim("conditional cue width", d, cc.data.len()));
    }
    let mut tokens = p.tokens.clone();
    for row in tokens.data_mut().chunks_mut(d) {
        for (x, c) in row.iter_mut().zip(&cc.data) {
            *x += c;
        }
    }
    PromptSequence::new(tokens, p.learnable)
}

/// `cc = LN(ReLU(LN(Ī)·W₁ + b₁))·W₂ + b₂`.
#[derive(Clone, Debug)]
pub struct LanguagePromptGenerator {
    pub ln_in: LayerNorm,
    pub fc1: Linear,
    pub ln_hidden: LayerNorm,
    pub fc2: Linear,
    pub embed_dim: usize,
    pub token_dim: usize,
}

impl LanguagePromptGenerator {
    pub fn new(store: &mut ParamStore, init: &mut Init, embed_dim: usize, token_dim: usize) -> Self {
        let grp = ParamGroup::Task;
        Self {
            ln_in: LayerNorm::new(store, "lang_prompt_gen.ln_in", grp, embed_dim),
            fc1: Linear::lecun(store, init, "lang_prompt_gen.fc1", grp, embed_dim, embed_dim),
            ln_hidden: LayerNorm::new(store, "lang_prompt_gen.ln_hidden", grp, embed_dim),
            fc2: Linear::lecun(store, init, "lang_prompt_gen.fc2", grp, embed_dim, token_dim),
            embed_dim,
            token_dim,
        }
    }

    pub fn numel(embed_dim: usize, token_dim: usize) -> usize {
        2 * LayerNorm::numel(embed_dim) + Linear::numel(embed_dim, embed_dim) + Linear::numel(embed_dim, token_dim)
    }

    /// `[1, C]` pooled embedding to a `[1, D]` cue.
    pub fn forward(&self, g: &mut Graph, global: Var) -> Result<Var> {
        let x = self.ln_in.forward(g, global)?;
        let x = self.fc1.forward(g, x)?;
        let x = g.relu(x);
        let x = self.ln_hidden.forward(g, x)?;
        self.fc2.forward(g, x)
    }
}

pub fn generate_conditional_cue(
    store: &ParamStore,
    lg: &LanguagePromptGenerator,
    global: &GlobalEmbedding,
) -> Result<ConditionalCue> {
    if global.data.len() != lg.embed_dim {
        return Err(Error::dim("global embedding width", lg.embed_dim, global.data.len()));
    }
    let mut g = Graph::with_params(store);
    let x = g.constant(Tensor::new(&[1, lg.embed_dim], global.data.clone())?);
    let cc = lg.forward(&mut g, x)?;
    let data = g.value(cc).data().to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("conditional cue is non-finite".into()));
    }
    Ok(ConditionalCue { data })
}
