//! Visual prompt generation, residual fusion, instance-language matching and
//! loss assembly.

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_value, Graph, Var};
use crate::encoders::{FeatureMap, TextEmbedding};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Probabilities of the score map are clamped into `[SCORE_EPS, 1 - SCORE_EPS]`.
pub const SCORE_EPS: f64 = 1e-7;
/// Probability clamp inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Initial matching temperature.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VgConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_dim: usize,
    /// Add 2-D sinusoidal positions to the queries before the first layer.
    pub pos_embed: bool,
}

impl VgConfig {
    /// 3 layers, 4 heads, width 256, feed-forward 1024.
    pub fn reference() -> Self {
        Self {
            depth: 3,
            heads: 4,
            width: 256,
            ffn_dim: 1024,
            pos_embed: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            depth: 1,
            heads: 2,
            width: 16,
            ffn_dim: 32,
            pos_embed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidConfig("visual prompt generator dims must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "vg width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Transformer decoder whose queries are image positions and whose memory
/// is the single text embedding.
///
/// Each layer is pre-norm self-attention over the image tokens, then
/// cross-attention to the text token, then a feed-forward block. Linear
/// projections map `C → width` on entry and `width → C` on exit; the exit
/// projection starts at zero so `Î = I` before training.
#[derive(Clone, Debug)]
pub struct VisualPromptGenerator {
    pub config: VgConfig,
    pub embed_dim: usize,
    pub in_proj: Linear,
    pub memory_proj: Linear,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    pub out_proj: Linear,
}

/// Forward output with the per-layer, per-head cross-attention weights.
pub struct VisualPromptTrace {
    pub output: Var,
    /// `cross_attention[layer][head]` is `[positions, 1]`.
    pub cross_attention: Vec<Vec<Var>>,
}

impl VisualPromptGenerator {
    pub fn new(store: &mut ParamStore, init: &mut Init, embed_dim: usize, config: VgConfig) -> Result<Self> {
        config.validate()?;
        let grp = ParamGroup::Task;
        let w = config.width;
        let layers = (0..config.depth)
            .map(|i| {
                let n = format!("visual_prompt_gen.layer{i}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), grp, w),
                    self_attn: MultiHeadAttention::new(store, init, &format!("{n}.self_attn"), grp, w, w, w, w, config.heads),
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), grp, w),
                    cross_attn: MultiHeadAttention::new(store, init, &format!("{n}.cross_attn"), grp, w, w, w, w, config.heads),
                    ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), grp, w),
                    ffn: FeedForward::new(store, init, &format!("{n}.ffn"), grp, w, config.ffn_dim),
                }
            })
            .collect();
        Ok(Self {
            in_proj: Linear::lecun(store, init, "visual_prompt_gen.in_proj", grp, embed_dim, w),
            memory_proj: Linear::lecun(store, init, "visual_prompt_gen.memory_proj", grp, embed_dim, w),
            layers,
            ln_out: LayerNorm::new(store, "visual_prompt_gen.ln_out", grp, w),
            out_proj: Linear::new(store, init, "visual_prompt_gen.out_proj", grp, w, embed_dim, 0.0),
            config,
            embed_dim,
        })
    }

    pub fn numel(embed_dim: usize, cfg: &VgConfig) -> usize {
        let w = cfg.width;
        let layer = 3 * LayerNorm::numel(w) + 2 * MultiHeadAttention::numel(w, w, w, w) + FeedForward::numel(w, cfg.ffn_dim);
        2 * Linear::numel(embed_dim, w) + cfg.depth * layer + LayerNorm::numel(w) + Linear::numel(w, embed_dim)
    }

    /// `tokens[h·w, C]` and `text[1, C]` to the visual prompt `[h·w, C]`.
    pub fn forward(&self, g: &mut Graph, tokens: Var, grid: (usize, usize), text: Var) -> Result<VisualPromptTrace> {
        let (n, c) = g.value(tokens).dims2();
        if c != self.embed_dim {
            return Err(Error::dim("visual prompt generator input channels", self.embed_dim, c));
        }
        if n != grid.0 * grid.1 {
            return Err(Error::dim("visual prompt generator positions", grid.0 * grid.1, n));
        }
        let (_, tc) = g.value(text).dims2();
        if tc != self.embed_dim {
            return Err(Error::dim("visual prompt generator text channels", self.embed_dim, tc));
        }
        let mut x = self.in_proj.forward(g, tokens)?;
        if self.config.pos_embed {
            let pe = sinusoidal_2d(grid.0, grid.1, self.config.width);
            x = g.add_const(x, &pe)?;
        }
        let memory = self.memory_proj.forward(g, text)?;
        let mut cross_attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, x)?;
            let a = layer.self_attn.forward(g, h, h, None)?;
            x = g.add(x, a.output)?;
            let h = layer.ln_cross.forward(g, x)?;
            let a = layer.cross_attn.forward(g, h, memory, None)?;
            x = g.add(x, a.output)?;
            cross_attention.push(a.weights);
            let h = layer.ln_ffn.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let x = self.ln_out.forward(g, x)?;
        Ok(VisualPromptTrace {
            output: self.out_proj.forward(g, x)?,
            cross_attention,
        })
    }
}

/// 2-D sinusoidal table `[h·w, width]`: the first half of the channels
/// encode the row index, the second half the column index.
pub fn sinusoidal_2d(h: usize, w: usize, width: usize) -> Tensor {
    let half = width / 2;
    let pairs = half / 2;
    let mut out = vec![0.0; h * w * width];
    for i in 0..h {
        for j in 0..w {
            let row = &mut out[(i * w + j) * width..(i * w + j + 1) * width];
            for (axis, pos) in [(0, i), (1, j)] {
                for k in 0..pairs {
                    let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                    let a = pos as f64 * freq;
                    row[axis * half + 2 * k] = a.sin();
                    row[axis * half + 2 * k + 1] = a.cos();
                }
            }
        }
    }
    Tensor::new(&[h * w, width], out).expect("table size")
}

/// Runs the visual prompt generator on concrete inputs.
pub fn generate_visual_prompt(
    store: &ParamStore,
    vg: &VisualPromptGenerator,
    fm: &FeatureMap,
    text: &TextEmbedding,
) -> Result<FeatureMap> {
    let mut g = Graph::with_params(store);
    let tokens = g.constant(fm.tokens());
    let t = g.constant(Tensor::new(&[1, text.data.len()], text.data.clone())?);
    let trace = vg.forward(&mut g, tokens, (fm.height(), fm.width()), t)?;
    FeatureMap::from_tokens(
        g.value(trace.output).clone(),
        fm.height(),
        fm.width(),
        fm.stride(),
        fm.source_size(),
    )
}

/// Residual fusion `Î = I + Ĩ`.
pub fn fuse(fm: &FeatureMap, vp: &FeatureMap) -> Result<FeatureMap> {
    if fm.data().shape() != vp.data().shape() || fm.stride() != vp.stride() {
        return Err(Error::ShapeMismatch(format!(
            "fuse: {:?}/s{} vs {:?}/s{}",
            fm.data().shape(),
            fm.stride(),
            vp.data().shape(),
            vp.stride()
        )));
    }
    let data: Vec<f64> = fm.data().data().iter().zip(vp.data().data()).map(|(a, b)| a + b).collect();
    FeatureMap::new(Tensor::new(fm.data().shape(), data)?, fm.stride(), fm.source_size())
}

/// Binary text score map `P`, one probability per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    /// `[h, w, 1]`.
    pub probs: Tensor,
    pub stride: usize,
    pub temperature_used: f64,
}

impl ScoreMap {
    pub fn height(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[1]
    }
}

/// Graph form of the matching: `clamp(sigmoid(Î·tᵀ / τ))` as `[n, 1]`.
pub fn match_graph(g: &mut Graph, fused: Var, text: Var, tau: Var) -> Result<Var> {
    let tt = g.transpose(text)?;
    let logits = g.matmul(fused, tt)?;
    let scaled = g.div_scalar(logits, tau)?;
    let p = g.sigmoid(scaled);
    Ok(g.clamp(p, SCORE_EPS, 1.0 - SCORE_EPS))
}

/// `P[i,j] = sigmoid(⟨Î[i,j], t⟩ / τ)`, clamped to `[ε, 1 − ε]`.
pub fn match_text(fm_hat: &FeatureMap, text: &TextEmbedding, tau: f64) -> Result<ScoreMap> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    if text.data.len() != fm_hat.channels() {
        return Err(Error::dim("matching channels", fm_hat.channels(), text.data.len()));
    }
    let mut g = Graph::new();
    let f = g.constant(fm_hat.tokens());
    let t = g.constant(Tensor::new(&[1, text.data.len()], text.data.clone())?);
    let tv = g.constant(Tensor::scalar(tau));
    let p = match_graph(&mut g, f, t, tv)?;
    Ok(ScoreMap {
        probs: g.value(p).clone().reshape(&[fm_hat.height(), fm_hat.width(), 1])?,
        stride: fm_hat.stride(),
        temperature_used: tau,
    })
}

fn check_labels(y: &Tensor, p: &ScoreMap) -> Result<()> {
    if y.numel() != p.probs.numel() || y.shape()[0] != p.height() {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs score map {:?}",
            y.shape(),
            p.probs.shape()
        )));
    }
    if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidLabel(format!("mask value {v} not in {{0, 1}}")));
    }
    Ok(())
}

/// Mean binary cross-entropy between the score map and a `{0,1}` mask of
/// the same grid.
pub fn aux_loss(p: &ScoreMap, y: &Tensor) -> Result<f64> {
    check_labels(y, p)?;
    let w = vec![1.0; y.numel()];
    Ok(bce_value(p.probs.data(), y.data(), &w, BCE_EPS))
}

/// [`aux_loss`] with cells flagged in `ignore` excluded from the mean.
pub fn aux_loss_masked(p: &ScoreMap, y: &Tensor, ignore: &Tensor) -> Result<f64> {
    check_labels(y, p)?;
    if ignore.numel() != y.numel() {
        return Err(Error::dim("ignore mask", y.numel(), ignore.numel()));
    }
    let w: Vec<f64> = ignore.data().iter().map(|&v| 1.0 - v).collect();
    Ok(bce_value(p.probs.data(), y.data(), &w, BCE_EPS))
}

/// `total = det + λ · aux`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub det_loss: f64,
    pub aux_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(det: f64, aux: f64, lambda: f64) -> Result<LossBundle> {
    if !(det.is_finite() && aux.is_finite() && lambda.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss input det={det} aux={aux} lambda={lambda}")));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(LossBundle {
        det_loss: det,
        aux_loss: aux,
        lambda,
        total: det + lambda * aux,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> FeatureMap {
        FeatureMap::new(
            Tensor::new(&[h, w, c], (0..h * w * c).map(f).collect()).unwrap(),
            8,
            (h * 8, w * 8),
        )
        .unwrap()
    }

    #[test]
    fn zero_dot_gives_half() {
        let f = fm(2, 3, 4, |i| if i % 4 == 0 { 0.0 } else { 1.0 });
        let t = TextEmbedding::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = match_text(&f, &t, 0.07).unwrap();
        assert!(p.probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ratio_invariance_is_bitwise() {
        let f = fm(2, 2, 3, |i| (i as f64 * 0.91).sin());
        let t = TextEmbedding::new(vec![0.3, -0.7, 0.2]).unwrap();
        let a = match_text(&f, &t, 0.07).unwrap();
        let t4 = TextEmbedding::new(t.data.iter().map(|v| v * 4.0).collect()).unwrap();
        let b = match_text(&f, &t4, 0.28).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn unit_basis_closed_form() {
        let f = fm(1, 1, 3, |i| if i == 0 { 1.0 } else { 0.0 });
        let t = TextEmbedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        let p = match_text(&f, &t, 1.0).unwrap();
        assert!((p.probs.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let f = fm(1, 1, 2, |_| 1.0);
        let t = TextEmbedding::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(match_text(&f, &t, 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(match_text(&f, &t, -1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn adversarial_logits_stay_clamped() {
        let f = fm(1, 2, 1, |i| if i == 0 { 1e6 } else { -1e6 });
        let t = TextEmbedding::new(vec![1.0]).unwrap();
        let p = match_text(&f, &t, 0.07).unwrap();
        assert_eq!(p.probs.data(), &[1.0 - SCORE_EPS, SCORE_EPS]);
    }

    #[test]
    fn aux_loss_closed_forms() {
        let p = ScoreMap {
            probs: Tensor::full(&[3, 3, 1], 0.5),
            stride: 8,
            temperature_used: 1.0,
        };
        let y = Tensor::new(&[3, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((aux_loss(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let exact = ScoreMap {
            probs: y.clone().reshape(&[3, 3, 1]).unwrap(),
            ..p.clone()
        };
        let l = aux_loss(&exact, &y).unwrap();
        assert!(l >= 0.0 && l <= BCE_EPS * BCE_EPS.ln().abs());

        let bad = Tensor::new(&[3, 3], vec![0.5; 9]).unwrap();
        assert!(matches!(aux_loss(&p, &bad), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn total_loss_cases() {
        let b = total_loss(0.3, 0.2, 1.0).unwrap();
        assert!((b.total - 0.5).abs() < 1e-15);
        assert_eq!(total_loss(0.3, 0.2, 0.0).unwrap().total, 0.3);
        assert_eq!(total_loss(0.0, 0.0, 1.0).unwrap().total, 0.0);
        assert!(matches!(total_loss(f64::NAN, 0.0, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn fuse_identity_and_difference() {
        let a = fm(2, 3, 4, |i| i as f64 * 0.1);
        let z = fm(2, 3, 4, |_| 0.0);
        assert_eq!(fuse(&a, &z).unwrap(), a);
        let b = fm(2, 3, 4, |i| (i as f64).cos());
        let s = fuse(&a, &b).unwrap();
        for ((x, y), v) in s.data().data().iter().zip(a.data().data()).zip(b.data().data()) {
            assert!((x - y - v).abs() < 1e-12);
        }
        let crop = |m: &FeatureMap| m.crop(0, 1, 2, 2).unwrap();
        assert_eq!(crop(&s), fuse(&crop(&a), &crop(&b)).unwrap());
        assert!(fuse(&a, &fm(3, 2, 4, |_| 0.0)).is_err());
    }
}
