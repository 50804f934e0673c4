//! The full detector: encoders, prompting, cross-modal fusion and head,
//! assembled according to the component toggles.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cross_modal::{match_graph, ScoreMap, VgConfig, VisualPromptGenerator, BCE_EPS, DEFAULT_TAU};
use crate::detector::{det_loss_graph, polygonize, HeadConfig, SegHead, TargetMasks, TextInstance};
use crate::encoders::{AttentionPool, EncoderConfig, FeatureMap, Image, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::prompting::{LanguagePromptGenerator, PROMPT_INIT_STD};
use crate::tensor::Tensor;

/// Which prompting components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Predefined "Text" token as the last prompt row.
    pub pp: bool,
    /// Learnable prompt rows.
    pub lp: bool,
    /// Language prompt generator (image-conditioned cue).
    pub lg: bool,
    /// Visual prompt generator.
    pub vg: bool,
}

impl Toggles {
    pub const ALL: Self = Self {
        pp: true,
        lp: true,
        lg: true,
        vg: true,
    };
    pub const NONE: Self = Self {
        pp: false,
        lp: false,
        lg: false,
        vg: false,
    };

    /// All sixteen combinations, baseline first.
    pub fn all_combinations() -> Vec<Self> {
        (0..16)
            .map(|m| Self {
                pp: m & 1 != 0,
                lp: m & 2 != 0,
                lg: m & 4 != 0,
                vg: m & 8 != 0,
            })
            .collect()
    }

    /// Whether the text branch (and with it the score map) exists.
    pub fn text_branch(&self) -> bool {
        self.pp || self.lp || self.lg || self.vg
    }

    pub fn label(&self) -> String {
        if !self.text_branch() {
            return "baseline".into();
        }
        let mut parts = Vec::new();
        for (on, name) in [(self.pp, "pp"), (self.lp, "lp"), (self.lg, "lg"), (self.vg, "vg")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vg: VgConfig,
    pub head: HeadConfig,
    pub toggles: Toggles,
    /// Number of learnable prompt rows when `toggles.lp` is on.
    pub n_prompts: usize,
    pub class_name: String,
    pub tau_init: f64,
    /// Weight of the auxiliary score-map loss.
    pub lambda: f64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            vg: VgConfig::toy(),
            head: HeadConfig::default(),
            toggles: Toggles::ALL,
            n_prompts: 4,
            class_name: "Text".into(),
            tau_init: DEFAULT_TAU,
            lambda: 1.0,
        }
    }

    pub fn reference() -> Self {
        Self {
            encoder: EncoderConfig::reference(),
            vg: VgConfig::reference(),
            head: HeadConfig {
                width: 256,
                ..HeadConfig::default()
            },
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.toggles.vg {
            self.vg.validate()?;
        }
        if self.head.width == 0 {
            return Err(Error::InvalidConfig("head width must be positive".into()));
        }
        if !(self.head.bin_thresh > 0.0 && self.head.bin_thresh < 1.0) {
            return Err(Error::InvalidConfig(format!("bin_thresh {} outside (0, 1)", self.head.bin_thresh)));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau_init must be positive, got {}", self.tau_init)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.toggles.lp && self.n_prompts == 0 {
            return Err(Error::InvalidConfig("learnable prompts enabled with n_prompts = 0".into()));
        }
        if self.prompt_len() > self.encoder.context_len {
            return Err(Error::InvalidConfig(format!(
                "prompt length {} exceeds context_len {}",
                self.prompt_len(),
                self.encoder.context_len
            )));
        }
        TextEncoder::token_id(&self.class_name)?;
        Ok(())
    }

    /// Learnable rows actually instantiated.
    pub fn learnable_rows(&self) -> usize {
        if self.toggles.lp {
            self.n_prompts
        } else {
            0
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.learnable_rows() + 1
    }

    /// Parameter count implied by the configuration, computed from the
    /// component formulas rather than from an instantiated model.
    pub fn expected_params(&self) -> ParamCount {
        let e = &self.encoder;
        let t = &self.toggles;
        let text_on = t.text_branch();
        let count = |on: bool, n: usize| if on { n } else { 0 };
        ParamCount {
            image_encoder: ImageEncoder::numel(e) + AttentionPool::numel(e),
            text_encoder: count(text_on, TextEncoder::numel(e)),
            learnable_prompts: count(t.lp, self.n_prompts * e.token_dim),
            replacement_row: count(text_on && !t.pp, e.token_dim),
            language_prompt_generator: count(t.lg, LanguagePromptGenerator::numel(e.embed_dim, e.token_dim)),
            visual_prompt_generator: count(t.vg, VisualPromptGenerator::numel(e.embed_dim, &self.vg)),
            temperature: count(text_on, 1),
            head: SegHead::numel(e.embed_dim + usize::from(text_on), e.stride, &self.head),
        }
    }
}

/// Scalar counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub image_encoder: usize,
    pub text_encoder: usize,
    pub learnable_prompts: usize,
    pub replacement_row: usize,
    pub language_prompt_generator: usize,
    pub visual_prompt_generator: usize,
    pub temperature: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.image_encoder
            + self.text_encoder
            + self.learnable_prompts
            + self.replacement_row
            + self.language_prompt_generator
            + self.visual_prompt_generator
            + self.temperature
            + self.head
    }
}

/// Text-side modules; present only when at least one toggle is on.
#[derive(Clone, Debug)]
pub struct TextBranch {
    pub encoder: TextEncoder,
    /// `[n, D]` learnable rows.
    pub prompts: Option<ParamId>,
    /// `[1, D]` learnable row standing in for the predefined token.
    pub replacement_row: Option<ParamId>,
    pub lg: Option<LanguagePromptGenerator>,
    pub vg: Option<VisualPromptGenerator>,
    /// `log τ`, scalar.
    pub log_tau: ParamId,
}

#[derive(Clone, Debug)]
pub struct TcmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub pool: AttentionPool,
    pub text: Option<TextBranch>,
    pub head: SegHead,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `I`, `[h̃·w̃, C]`.
    pub features: Var,
    pub grid: (usize, usize),
    /// Padded image size.
    pub size: (usize, usize),
    pub cue: Option<Var>,
    /// `t_out`, `[1, C]`.
    pub text: Option<Var>,
    /// `Ĩ`, `[h̃·w̃, C]`.
    pub visual_prompt: Option<Var>,
    /// `Î`, `[h̃·w̃, C]`.
    pub fused: Var,
    /// `P`, `[h̃·w̃, 1]`.
    pub score: Option<Var>,
    pub tau: Option<Var>,
    /// `[1, H, W]` text probability.
    pub prob: Var,
}

#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub det: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub det: f64,
    pub aux: Option<f64>,
}

/// Intermediate maps of one image, for inspection and export.
#[derive(Clone, Debug)]
pub struct Maps {
    pub image_embedding: FeatureMap,
    pub visual_prompt: Option<FeatureMap>,
    pub fused: FeatureMap,
    pub score: Option<ScoreMap>,
    pub text_embedding: Option<Vec<f64>>,
    /// `[H, W]` over the padded image.
    pub prob: Tensor,
}

impl TcmModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        let mut store = ParamStore::new();
        let mut init = Init::new(e.seed);
        let image = ImageEncoder::new(&mut store, &mut init, e);
        let pool = AttentionPool::new(&mut store, &mut init, e);
        let t = config.toggles;
        let text = if t.text_branch() {
            let encoder = TextEncoder::new(&mut store, &mut init, e);
            let d = e.token_dim;
            let prompts = t.lp.then(|| {
                store.add(
                    "prompt.learnable",
                    ParamGroup::Task,
                    init.normal(&[config.n_prompts, d], PROMPT_INIT_STD),
                )
            });
            let replacement_row =
                (!t.pp).then(|| store.add("prompt.replacement", ParamGroup::Task, init.normal(&[1, d], PROMPT_INIT_STD)));
            let lg = t
                .lg
                .then(|| LanguagePromptGenerator::new(&mut store, &mut init, e.embed_dim, d));
            let vg = if t.vg {
                Some(VisualPromptGenerator::new(&mut store, &mut init, e.embed_dim, config.vg.clone())?)
            } else {
                None
            };
            let log_tau = store.add("matching.log_tau", ParamGroup::Task, Tensor::scalar(config.tau_init.ln()));
            Some(TextBranch {
                encoder,
                prompts,
                replacement_row,
                lg,
                vg,
                log_tau,
            })
        } else {
            None
        };
        let in_ch = e.embed_dim + usize::from(text.is_some());
        let head = SegHead::new(&mut store, &mut init, in_ch, e.stride, &config.head);
        Ok(Self {
            config,
            store,
            image,
            pool,
            text,
            head,
        })
    }

    pub fn stride(&self) -> usize {
        self.config.encoder.stride
    }

    /// Parameter count measured on the instantiated store.
    pub fn param_count(&self) -> ParamCount {
        let s = &self.store;
        let tb = self.text.as_ref();
        let numel = |id: Option<ParamId>| id.map_or(0, |id| s.get(id).numel());
        ParamCount {
            image_encoder: s.numel_with_prefix("image_encoder."),
            text_encoder: s.numel_with_prefix("text_encoder."),
            learnable_prompts: numel(tb.and_then(|t| t.prompts)),
            replacement_row: numel(tb.and_then(|t| t.replacement_row)),
            language_prompt_generator: s.numel_with_prefix("lang_prompt_gen."),
            visual_prompt_generator: s.numel_with_prefix("visual_prompt_gen."),
            temperature: numel(tb.map(|t| t.log_tau)),
            head: s.numel_with_prefix("head."),
        }
    }

    /// Builds the forward graph for one image.
    pub fn forward(&self, g: &mut Graph, image: &Image) -> Result<ForwardNodes> {
        let (features, grid) = self.image.forward(g, image)?;
        let size = image.padded_size(self.stride());
        let Some(tb) = &self.text else {
            let prob = self.head.forward(g, features, None, grid, size)?;
            return Ok(ForwardNodes {
                features,
                grid,
                size,
                cue: None,
                text: None,
                visual_prompt: None,
                fused: features,
                score: None,
                tau: None,
                prob,
            });
        };

        let last = match tb.replacement_row {
            Some(id) => g.param(id),
            None => tb.encoder.embed_token(g, &self.config.class_name)?,
        };
        let mut prompt = match tb.prompts {
            Some(id) => {
                let rows = g.param(id);
                g.concat_rows(&[rows, last])?
            }
            None => last,
        };
        let cue = match &tb.lg {
            Some(lg) => {
                let global = self.pool.forward(g, features)?;
                let cc = lg.forward(g, global)?;
                prompt = g.add_row(prompt, cc)?;
                Some(cc)
            }
            None => None,
        };
        let text = tb.encoder.forward(g, prompt)?;
        let (visual_prompt, fused) = match &tb.vg {
            Some(vg) => {
                let vp = vg.forward(g, features, grid, text)?.output;
                (Some(vp), g.add(features, vp)?)
            }
            None => (None, features),
        };
        let log_tau = g.param(tb.log_tau);
        let tau = g.exp(log_tau);
        let score = match_graph(g, fused, text, tau)?;
        let prob = self.head.forward(g, fused, Some(score), grid, size)?;
        Ok(ForwardNodes {
            features,
            grid,
            size,
            cue,
            text: Some(text),
            visual_prompt,
            fused,
            score: Some(score),
            tau: Some(tau),
            prob,
        })
    }

    /// `det + λ·aux`, the auxiliary term only when a score map exists.
    pub fn loss(&self, g: &mut Graph, fwd: &ForwardNodes, targets: &TargetMasks) -> Result<LossNodes> {
        if targets.size() != fwd.size || targets.grid() != fwd.grid {
            return Err(Error::ShapeMismatch(format!(
                "targets {:?}/{:?} vs forward {:?}/{:?}",
                targets.size(),
                targets.grid(),
                fwd.size,
                fwd.grid
            )));
        }
        let det = det_loss_graph(g, fwd.prob, targets)?;
        let aux = match fwd.score {
            Some(p) => {
                let w: Vec<f64> = targets.ignore_mask.data().iter().map(|v| 1.0 - v).collect();
                Some(g.bce(p, targets.text_mask.data(), &w, BCE_EPS)?)
            }
            None => None,
        };
        let total = match aux {
            Some(a) if self.config.lambda != 0.0 => {
                let wa = g.scale(a, self.config.lambda);
                g.add(det, wa)?
            }
            _ => det,
        };
        Ok(LossNodes { total, det, aux })
    }

    /// Loss values and per-parameter gradients for one image.
    pub fn gradients(&self, image: &Image, targets: &TargetMasks) -> Result<(LossValues, Vec<Option<Tensor>>)> {
        let mut g = Graph::with_params(&self.store);
        let fwd = self.forward(&mut g, image)?;
        let loss = self.loss(&mut g, &fwd, targets)?;
        let scalar = |v: Var| g.value(v).data()[0];
        let values = LossValues {
            total: scalar(loss.total),
            det: scalar(loss.det),
            aux: loss.aux.map(scalar),
        };
        if !values.total.is_finite() {
            return Err(Error::Numeric(format!("loss became {}", values.total)));
        }
        let grads = g.backward(loss.total)?;
        Ok((values, g.param_grads(&grads)))
    }

    pub fn maps(&self, image: &Image) -> Result<Maps> {
        let mut g = Graph::with_params(&self.store);
        let f = self.forward(&mut g, image)?;
        let s = self.stride();
        let src = (image.height(), image.width());
        let (h, w) = f.grid;
        let fm = |g: &Graph, v: Var| FeatureMap::from_tokens(g.value(v).clone(), h, w, s, src);
        let score = match f.score {
            Some(p) => Some(ScoreMap {
                probs: g.value(p).clone().reshape(&[h, w, 1])?,
                stride: s,
                temperature_used: g.value(f.tau.expect("tau with score")).data()[0],
            }),
            None => None,
        };
        Ok(Maps {
            image_embedding: fm(&g, f.features)?,
            visual_prompt: f.visual_prompt.map(|v| fm(&g, v)).transpose()?,
            fused: fm(&g, f.fused)?,
            score,
            text_embedding: f.text.map(|t| g.value(t).data().to_vec()),
            prob: g.value(f.prob).clone().reshape(&[f.size.0, f.size.1])?,
        })
    }

    /// Probability map cropped to the original image and its polygons.
    pub fn predict(&self, image: &Image) -> Result<(Tensor, Vec<TextInstance>)> {
        let maps = self.maps(image)?;
        let (h, w) = (image.height(), image.width());
        let pw = maps.prob.shape()[1];
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            data.extend_from_slice(&maps.prob.data()[r * pw..r * pw + w]);
        }
        let prob = Tensor::new(&[h, w], data)?;
        let inst = polygonize(&prob, self.config.head.bin_thresh, self.config.head.min_area)?;
        Ok((prob, inst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_formulas_for_every_toggle_set() {
        for t in Toggles::all_combinations() {
            let cfg = ModelConfig {
                toggles: t,
                ..ModelConfig::toy()
            };
            let m = TcmModel::new(cfg.clone()).unwrap();
            assert_eq!(m.param_count(), cfg.expected_params(), "{}", t.label());
            assert_eq!(m.param_count().total(), m.store.numel(None), "{}", t.label());
        }
    }

    #[test]
    fn forward_shapes() {
        let m = TcmModel::new(ModelConfig::toy()).unwrap();
        let img = Image::new(40, 48, vec![0.1; 3 * 40 * 48]).unwrap();
        let maps = m.maps(&img).unwrap();
        assert_eq!(maps.prob.shape(), &[40, 48]);
        assert_eq!(maps.score.as_ref().unwrap().probs.shape(), &[5, 6, 1]);
        assert_eq!(maps.fused, maps.image_embedding);
        let (p, _) = m.predict(&Image::new(37, 45, vec![0.1; 3 * 37 * 45]).unwrap()).unwrap();
        assert_eq!(p.shape(), &[37, 45]);
    }
}
