mod common;

use clipdet::autograd::Graph;
use clipdet::cross_modal::{fuse, VgConfig, VisualPromptGenerator};
use clipdet::detector::{polygonize, rasterize_targets, TextInstance};
use clipdet::encoders::{EncoderConfig, Encoders, FeatureMap, GlobalEmbedding, Image};
use clipdet::evalkit::polygon_iou;
use clipdet::geometry;
use clipdet::params::{Init, ParamStore};
use clipdet::prompting::{
    assemble_prompt, condition_prompt, generate_conditional_cue, ConditionalCue, LanguagePromptGenerator,
};
use clipdet::tensor::Tensor;
use proptest::prelude::*;
use std::sync::OnceLock;

fn toy() -> &'static Encoders {
    static ENC: OnceLock<Encoders> = OnceLock::new();
    ENC.get_or_init(|| Encoders::new(EncoderConfig::toy()).unwrap())
}

fn feature_map(seed: u64, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(common::random(seed, &[h, w, c], 1.0), 8, (h * 8, w * 8)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encode_image_shape_contract(h in 8usize..90, w in 8usize..90, seed in 0u64..1000) {
        let enc = toy();
        let img = Image::new(h, w, common::random(seed, &[h * w * 3], 0.5).into_data()).unwrap();
        let fm = enc.encode_image(&img).unwrap();
        prop_assert_eq!(fm.data().shape(), &[h.div_ceil(8), w.div_ceil(8), 32]);
        prop_assert!(fm.data().is_finite());
    }

    #[test]
    fn cue_width_independent_of_grid(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let enc = toy();
        let mut store = ParamStore::new();
        let lg = LanguagePromptGenerator::new(&mut store, &mut Init::new(3), 32, 16);
        let pooled = enc.attention_pool(&feature_map(seed, h, w, 32)).unwrap();
        let cc = generate_conditional_cue(&store, &lg, &pooled).unwrap();
        prop_assert_eq!(cc.data.len(), 16);
    }

    #[test]
    fn condition_prompt_is_affine_in_cue(
        n in 0usize..5,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let d = 6;
        let rows = common::random(seed, &[n, d], 1.0);
        let pre = common::random(seed + 1, &[d], 1.0).into_data();
        let p = assemble_prompt(&rows, &pre).unwrap();
        let c1 = common::random(seed + 2, &[d], 1.0).into_data();
        let c2 = common::random(seed + 3, &[d], 1.0).into_data();
        let mix = ConditionalCue { data: c1.iter().zip(&c2).map(|(x, y)| a * x + b * y).collect() };
        let lhs = condition_prompt(&p, &mix).unwrap();
        let r1 = condition_prompt(&p, &ConditionalCue { data: c1 }).unwrap();
        let r2 = condition_prompt(&p, &ConditionalCue { data: c2 }).unwrap();
        for i in 0..lhs.tokens().numel() {
            let rhs = a * r1.tokens().data()[i] + b * r2.tokens().data()[i] - (a + b - 1.0) * p.tokens().data()[i];
            prop_assert!((lhs.tokens().data()[i] - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_pool_permutation_invariant(h in 1usize..5, w in 1usize..5, seed in 0u64..1000, shuffle in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let enc = toy();
        let fm = feature_map(seed, h, w, 32);
        let mut order: Vec<usize> = (0..h * w).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
        let data: Vec<f64> = order.iter().flat_map(|&k| fm.at(k / w, k % w).to_vec()).collect();
        let permuted = FeatureMap::new(Tensor::new(&[h, w, 32], data).unwrap(), 8, fm.source_size()).unwrap();
        let GlobalEmbedding { data: x } = enc.attention_pool(&fm).unwrap();
        let GlobalEmbedding { data: y } = enc.attention_pool(&permuted).unwrap();
        for (u, v) in x.iter().zip(&y) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn fuse_commutes_with_crop(top in 0usize..3, left in 0usize..3, seed in 0u64..1000) {
        let (a, b) = (feature_map(seed, 4, 4, 5), feature_map(seed + 9, 4, 4, 5));
        let (rows, cols) = (4 - top, 4 - left);
        let x = fuse(&a, &b).unwrap().crop(top, left, rows, cols).unwrap();
        let y = fuse(&a.crop(top, left, rows, cols).unwrap(), &b.crop(top, left, rows, cols).unwrap()).unwrap();
        prop_assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rasterized_cells_track_rectangle_area(
        x0 in 0.0f64..120.0,
        y0 in 0.0f64..120.0,
        w in 40.0f64..130.0,
        h in 40.0f64..130.0,
    ) {
        let s = 8usize;
        let rect = TextInstance::rect(x0, y0, x0 + w, y0 + h);
        let t = rasterize_targets(std::slice::from_ref(&rect), (256, 256), s).unwrap();
        let covered = t.text_mask.sum() * (s * s) as f64;
        let bound = 2.0 * s as f64 * geometry::perimeter(&rect.polygon);
        prop_assert!((covered - rect.area()).abs() <= bound, "{covered} vs {}", rect.area());
    }

    #[test]
    fn polygonize_recovers_rasterized_rectangle(
        x0 in 0.0f64..60.0,
        y0 in 0.0f64..60.0,
        w in 24.0f64..60.0,
        h in 24.0f64..60.0,
    ) {
        let rect = TextInstance::rect(x0, y0, x0 + w, y0 + h);
        let t = rasterize_targets(std::slice::from_ref(&rect), (128, 128), 4).unwrap();
        let found = polygonize(&t.full_res_mask, 0.5, 10.0).unwrap();
        prop_assert_eq!(found.len(), 1);
        let iou = polygon_iou(&found[0], &rect);
        prop_assert!(iou >= 0.9, "iou {iou}");
    }
}

fn vg_outputs(pos_embed: bool, tokens: &Tensor) -> Tensor {
    let mut store = ParamStore::new();
    let cfg = VgConfig {
        pos_embed,
        ..common::tiny_config().vg
    };
    let vg = VisualPromptGenerator::new(&mut store, &mut Init::new(5), 8, cfg).unwrap();
    store.set(vg.out_proj.weight, common::random(6, &[8, 8], 0.5)).unwrap();
    let mut g = Graph::with_params(&store);
    let t = g.constant(tokens.clone());
    let text = g.constant(common::random(7, &[1, 8], 1.0));
    let out = vg.forward(&mut g, t, (2, 3), text).unwrap().output;
    g.value(out).clone()
}

#[test]
fn visual_prompt_positional_sensitivity() {
    let tokens = common::random(8, &[6, 8], 1.0);
    let order = [3usize, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor| {
        let data = order.iter().flat_map(|&k| t.row(k).to_vec()).collect();
        Tensor::new(&[6, t.shape()[1]], data).unwrap()
    };
    let close = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-10);

    let plain = vg_outputs(false, &tokens);
    let plain_perm = vg_outputs(false, &permute(&tokens));
    assert!(close(&permute(&plain), &plain_perm), "without positions the decoder must be equivariant");

    let pos = vg_outputs(true, &tokens);
    let pos_perm = vg_outputs(true, &permute(&tokens));
    assert!(!close(&permute(&pos), &pos_perm), "positional embeddings must break equivariance");
}
