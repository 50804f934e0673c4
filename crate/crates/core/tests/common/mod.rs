#![allow(dead_code)]

pub mod matching;

use clipdet::autograd::{Graph, Var};
use clipdet::cross_modal::VgConfig;
use clipdet::detector::{rasterize_targets, HeadConfig, TargetMasks, TextInstance};
use clipdet::encoders::{EncoderConfig, Image};
use clipdet::model::{ModelConfig, TcmModel};
use clipdet::params::{Init, ParamId, ParamStore};
use clipdet::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_err: f64,
    /// Both gradients vanish to within rounding: the exact gradient is zero
    /// (e.g. attention key biases, which softmax cancels).
    pub structural_zero: bool,
}

/// Rounding floor of a central difference at `FD_STEP` on O(1) losses.
pub const FD_NOISE: f64 = 1e-8;

/// Central differences of the scalar built by `f` against its backward pass,
/// for every element of every listed parameter.
///
/// Error per tensor: `‖a − n‖ / max(‖a‖, ‖n‖)`; 0 for structural zeros.
pub fn fd_check(store: &ParamStore, ids: &[ParamId], f: &dyn for<'a> Fn(&mut Graph<'a>) -> Var) -> Vec<TensorCheck> {
    let mut g = Graph::with_params(store);
    let y = f(&mut g);
    let grads = g.backward(y).unwrap();
    let all = g.param_grads(&grads);
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let y = f(&mut g);
        g.value(y).data()[0]
    };
    let mut work = store.clone();
    ids.iter()
        .map(|&id| {
            let n = store.get(id).numel();
            let analytic = all[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
            let mut numeric = vec![0.0; n];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + FD_STEP;
                let up = eval(&work);
                work.get_mut(id).data_mut()[i] = orig - FD_STEP;
                let down = eval(&work);
                work.get_mut(id).data_mut()[i] = orig;
                *slot = (up - down) / (2.0 * FD_STEP);
            }
            let a = analytic.data();
            let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            let structural_zero = na < 1e-12 && nn < FD_NOISE;
            TensorCheck {
                name: store.name(id).to_string(),
                analytic_norm: na,
                numeric_norm: nn,
                rel_err: if structural_zero { 0.0 } else { diff / na.max(nn) },
                structural_zero,
            }
        })
        .collect()
}

pub fn worst(checks: &[TensorCheck]) -> &TensorCheck {
    checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("at least one tensor")
}

pub fn random(seed: u64, shape: &[usize], std: f64) -> Tensor {
    Init::new(seed).normal(shape, std)
}

/// Fixed weights that turn a tensor into a scalar loss via `mean(x ⊙ r)`.
pub fn probe(seed: u64, shape: &[usize]) -> Tensor {
    random(seed, shape, 1.0)
}

pub fn weighted_mean(g: &mut Graph, x: Var, seed: u64) -> Var {
    let r = probe(seed, g.value(x).shape());
    let r = g.constant(r);
    let m = g.mul(x, r).unwrap();
    g.mean(m)
}

/// `C = 8`, `D = 6`, VG width 8, stride 4: an 8×8 image gives a 2×2 map.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 8,
            token_dim: 6,
            stride: 4,
            stem_width: 4,
            pool_heads: 2,
            text_layers: 1,
            text_heads: 2,
            context_len: 8,
            ..EncoderConfig::toy()
        },
        vg: VgConfig {
            depth: 1,
            heads: 2,
            width: 8,
            ffn_dim: 16,
            pos_embed: true,
        },
        head: HeadConfig {
            width: 4,
            ..HeadConfig::default()
        },
        n_prompts: 2,
        ..ModelConfig::toy()
    }
}

/// Tiny model whose zero-initialized visual-prompt output layer is
/// randomized so every component carries gradient.
pub fn tiny_model(cfg: ModelConfig) -> TcmModel {
    let mut m = TcmModel::new(cfg).unwrap();
    if let Some(vg) = m.text.as_ref().and_then(|t| t.vg.clone()) {
        let shape = m.store.get(vg.out_proj.weight).shape().to_vec();
        m.store.set(vg.out_proj.weight, random(77, &shape, 0.3)).unwrap();
    }
    m
}

pub fn tiny_sample() -> (Image, TargetMasks) {
    let data = (0..8 * 8 * 3).map(|i| (i as f64 * 0.37).sin() * 0.8).collect();
    let img = Image::new(8, 8, data).unwrap();
    let mut ign = TextInstance::rect(6.0, 0.0, 8.0, 3.0);
    ign.ignore = true;
    let t = rasterize_targets(&[TextInstance::rect(1.0, 2.0, 6.0, 6.0), ign], (8, 8), 4).unwrap();
    (img, t)
}

use clipdet::cross_modal::{match_graph, VisualPromptGenerator, BCE_EPS};
use clipdet::encoders::TextEncoder;
use clipdet::params::ParamGroup;
use clipdet::prompting::LanguagePromptGenerator;

const C: usize = 8;
const D: usize = 6;

/// Language prompt generator w.r.t. its weights and the pooled input.
pub fn lg_checks() -> Vec<TensorCheck> {
    let mut store = ParamStore::new();
    let mut init = Init::new(11);
    let lg = LanguagePromptGenerator::new(&mut store, &mut init, C, D);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains(".ln_") {
            let shape = store.get(id).shape().to_vec();
            let base = if store.name(id).ends_with("gamma") { 1.0 } else { 0.0 };
            let t = random(id.index() as u64 + 50, &shape, 0.2).map(|v| v + base);
            store.set(id, t).unwrap();
        }
    }
    let x = store.add("input.global", ParamGroup::Task, random(12, &[1, C], 1.0));
    let ids: Vec<ParamId> = store.ids().collect();
    fd_check(&store, &ids, &|g| {
        let xv = g.param(x);
        let cc = lg.forward(g, xv).unwrap();
        weighted_mean(g, cc, 13)
    })
}

/// Visual prompt generator w.r.t. its weights, the image tokens and the text token.
pub fn vg_checks() -> Vec<TensorCheck> {
    let mut store = ParamStore::new();
    let mut init = Init::new(21);
    let vg = VisualPromptGenerator::new(&mut store, &mut init, C, tiny_config().vg).unwrap();
    store.set(vg.out_proj.weight, random(22, &[8, C], 0.4)).unwrap();
    let tokens = store.add("input.tokens", ParamGroup::Task, random(23, &[4, C], 1.0));
    let text = store.add("input.text", ParamGroup::Task, random(24, &[1, C], 1.0));
    let ids: Vec<ParamId> = store.ids().collect();
    fd_check(&store, &ids, &|g| {
        let (tv, xv) = (g.param(tokens), g.param(text));
        let out = vg.forward(g, tv, (2, 2), xv).unwrap().output;
        weighted_mean(g, out, 25)
    })
}

/// Matching plus auxiliary BCE w.r.t. `Î`, `t` and `log τ`.
pub fn match_aux_checks() -> Vec<TensorCheck> {
    let mut store = ParamStore::new();
    let fused = store.add("input.fused", ParamGroup::Task, random(31, &[4, C], 0.3));
    let text = store.add("input.text", ParamGroup::Task, random(32, &[1, C], 0.3));
    let log_tau = store.add("input.log_tau", ParamGroup::Task, Tensor::scalar(0.5f64.ln()));
    let y = [1.0, 0.0, 1.0, 0.0];
    let w = [1.0, 1.0, 1.0, 0.0];
    let ids: Vec<ParamId> = store.ids().collect();
    fd_check(&store, &ids, &|g| {
        let (f, t, lt) = (g.param(fused), g.param(text), g.param(log_tau));
        let tau = g.exp(lt);
        let p = match_graph(g, f, t, tau).unwrap();
        g.bce(p, &y, &w, BCE_EPS).unwrap()
    })
}

/// `det + λ·aux` of the assembled tiny model w.r.t. every parameter.
pub fn composed_checks() -> Vec<TensorCheck> {
    let m = tiny_model(tiny_config());
    let (img, targets) = tiny_sample();
    let ids: Vec<ParamId> = m.store.ids().collect();
    fd_check(&m.store, &ids, &|g| {
        let fwd = m.forward(g, &img).unwrap();
        m.loss(g, &fwd, &targets).unwrap().total
    })
}

/// Text encoder output w.r.t. the prompt rows (and its own weights).
pub fn text_checks() -> Vec<TensorCheck> {
    let cfg = tiny_config().encoder;
    let mut store = ParamStore::new();
    let mut init = Init::new(41);
    let enc = TextEncoder::new(&mut store, &mut init, &cfg);
    let prompt = store.add("input.prompt", ParamGroup::Task, random(42, &[3, D], 0.5));
    let ids: Vec<ParamId> = store.ids().collect();
    fd_check(&store, &ids, &|g| {
        let p = g.param(prompt);
        let t = enc.forward(g, p).unwrap();
        weighted_mean(g, t, 43)
    })
}
