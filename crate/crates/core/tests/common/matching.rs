//! Random instance sets and an exhaustive matching oracle.

use clipdet::detector::TextInstance;
use clipdet::evalkit::{match_instances, polygon_iou, MatchConfig};
use clipdet::geometry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SLOT: f64 = 100.0;

/// Ground truths in separate 100-px slots, so they never overlap.
pub fn disjoint_gts(rng: &mut ChaCha8Rng, n: usize) -> Vec<TextInstance> {
    (0..n)
        .map(|k| {
            let x0 = k as f64 * SLOT + rng.random_range(0.0..20.0);
            let y0 = rng.random_range(0.0..20.0);
            TextInstance::rect(x0, y0, x0 + rng.random_range(30.0..75.0), y0 + rng.random_range(20.0..70.0))
        })
        .collect()
}

pub fn jitter(rng: &mut ChaCha8Rng, g: &TextInstance, amount: f64) -> TextInstance {
    let (x0, y0, x1, y1) = geometry::bounds(&g.polygon);
    let mut d = || rng.random_range(-amount..amount);
    TextInstance::rect(x0 + d(), y0 + d(), x1 + d(), y1 + d())
}

/// Near-duplicates of ground truths mixed with arbitrary boxes that may
/// straddle several of them.
pub fn random_preds(rng: &mut ChaCha8Rng, gts: &[TextInstance], n: usize) -> Vec<TextInstance> {
    (0..n)
        .map(|_| {
            if !gts.is_empty() && rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                jitter(rng, g, 15.0)
            } else {
                let x0 = rng.random_range(0.0..450.0);
                let y0 = rng.random_range(0.0..60.0);
                TextInstance::rect(x0, y0, x0 + rng.random_range(20.0..150.0), y0 + rng.random_range(20.0..80.0))
            }
        })
        .collect()
}

/// Largest number of disjoint (pred, gt) pairs with IoU above the threshold,
/// by exhaustive search over every assignment.
pub fn brute_force_max(eligible: &[Vec<bool>], pred: usize, used: &mut Vec<bool>) -> usize {
    if pred == eligible.len() {
        return 0;
    }
    let mut best = brute_force_max(eligible, pred + 1, used);
    for j in 0..used.len() {
        if eligible[pred][j] && !used[j] {
            used[j] = true;
            best = best.max(1 + brute_force_max(eligible, pred + 1, used));
            used[j] = false;
        }
    }
    best
}

/// Outcome of one seeded greedy-vs-exhaustive comparison.
pub struct Trial {
    pub greedy: (usize, usize, usize),
    pub optimum: usize,
    pub preds: usize,
    pub gts: usize,
    /// More eligible pairs than matches: the greedy order actually mattered.
    pub contested: bool,
}

/// Up to five disjoint ground truths and up to five predictions from `seed`.
pub fn greedy_trial(seed: u64) -> Trial {
    let cfg = MatchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ng, np) = (rng.random_range(0..=5), rng.random_range(0..=5));
    let gts = disjoint_gts(&mut rng, ng);
    let preds = random_preds(&mut rng, &gts, np);
    let eligible: Vec<Vec<bool>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| polygon_iou(p, g) > cfg.iou_thresh).collect())
        .collect();
    let optimum = brute_force_max(&eligible, 0, &mut vec![false; gts.len()]);
    let m = match_instances(&preds, &gts, &cfg);
    Trial {
        greedy: (m.tp, m.fp, m.fn_),
        optimum,
        preds: preds.len(),
        gts: gts.len(),
        contested: eligible.iter().flatten().filter(|&&e| e).count() > m.tp,
    }
}
