//! Segmentation detection head, its loss, ground-truth rasterization and
//! polygon extraction.
//!
//! The head consumes the prompted embedding `Î` with the score map `P`
//! stacked as one extra channel, so any head that accepts `C + 1` channels at
//! stride `s` can take its place.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_value, dice_value, Graph, Var};
use crate::cross_modal::{ScoreMap, BCE_EPS};
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{self, Point};
use crate::nn::Conv2d;
use crate::params::{Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Smoothing constant of the Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// A text region: ground truth (optionally flagged "do not care") or a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    /// Vertices in image pixel coordinates.
    pub polygon: Vec<Point>,
    pub ignore: bool,
    /// Confidence in `[0, 1]`; predictions only.
    pub score: Option<f64>,
    pub transcription: Option<String>,
}

impl TextInstance {
    pub fn new(polygon: Vec<Point>, ignore: bool) -> Self {
        Self {
            polygon,
            ignore,
            score: None,
            transcription: None,
        }
    }

    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)`, listed clockwise in image coordinates.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]], false)
    }

    pub fn area(&self) -> f64 {
        geometry::area(&self.polygon)
    }

    /// At least three vertices, positive area, no self-intersection.
    pub fn is_valid(&self) -> bool {
        self.polygon.len() >= 3
            && self.polygon.iter().all(|p| p[0].is_finite() && p[1].is_finite())
            && self.area() > 0.0
            && geometry::is_simple(&self.polygon)
    }
}

/// Rasterized supervision for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMasks {
    pub stride: usize,
    /// `[h̃, w̃]`, 1 where a cell center lies in a non-ignore polygon.
    pub text_mask: Tensor,
    /// `[h̃, w̃]`, 1 where a cell center lies in an ignore polygon.
    pub ignore_mask: Tensor,
    /// `[H, W]` per-pixel text mask.
    pub full_res_mask: Tensor,
    /// `[H, W]` per-pixel ignore mask.
    pub full_res_ignore: Tensor,
    /// One entry per skipped degenerate polygon.
    pub warnings: Vec<String>,
}

impl TargetMasks {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.text_mask.shape();
        (s[0], s[1])
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.full_res_mask.shape();
        (s[0], s[1])
    }
}

fn paint(mask: &mut [f64], rows: usize, cols: usize, cell: f64, poly: &[Point]) {
    let (x0, y0, x1, y1) = geometry::bounds(poly);
    let c0 = ((x0 / cell - 0.5).floor().max(0.0)) as usize;
    let r0 = ((y0 / cell - 0.5).floor().max(0.0)) as usize;
    let c1 = ((x1 / cell).ceil().max(0.0) as usize).min(cols);
    let r1 = ((y1 / cell).ceil().max(0.0) as usize).min(rows);
    for r in r0..r1 {
        for c in c0..c1 {
            if geometry::contains(poly, (c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell) {
                mask[r * cols + c] = 1.0;
            }
        }
    }
}

/// Rasterizes `instances` at stride `stride` (cell-center rule) and at full
/// resolution (pixel-center rule) for an image of `size = (H, W)` pixels.
///
/// Ignore polygons take precedence where they overlap text polygons.
pub fn rasterize_targets(instances: &[TextInstance], size: (usize, usize), stride: usize) -> Result<TargetMasks> {
    if stride == 0 || size.0 == 0 || size.1 == 0 {
        return Err(Error::InvalidInput("rasterize: empty image or zero stride".into()));
    }
    let (h, w) = size;
    let (gh, gw) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut text = vec![0.0; gh * gw];
    let mut ign = vec![0.0; gh * gw];
    let mut text_full = vec![0.0; h * w];
    let mut ign_full = vec![0.0; h * w];
    let mut warnings = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if !inst.is_valid() {
            let msg = format!(
                "instance {i}: degenerate polygon ({} vertices, area {})",
                inst.polygon.len(),
                inst.area()
            );
            warn!("{msg}; skipped");
            warnings.push(msg);
            continue;
        }
        let (grid, full) = if inst.ignore {
            (&mut ign, &mut ign_full)
        } else {
            (&mut text, &mut text_full)
        };
        paint(grid, gh, gw, stride as f64, &inst.polygon);
        paint(full, h, w, 1.0, &inst.polygon);
    }
    for (t, i) in text.iter_mut().zip(&ign).chain(text_full.iter_mut().zip(&ign_full)) {
        if *i == 1.0 {
            *t = 0.0;
        }
    }
    Ok(TargetMasks {
        stride,
        text_mask: Tensor::new(&[gh, gw], text)?,
        ignore_mask: Tensor::new(&[gh, gw], ign)?,
        full_res_mask: Tensor::new(&[h, w], text_full)?,
        full_res_ignore: Tensor::new(&[h, w], ign_full)?,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channels of the hidden convolutions.
    pub width: usize,
    pub bin_thresh: f64,
    pub min_area: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            width: 16,
            bin_thresh: 0.3,
            min_area: 10.0,
        }
    }
}

/// Convolution at stride `s`, then ×2 upsample + convolution steps down to
/// stride 4, a 1×1 logit layer, bilinear resize to full resolution and a
/// sigmoid.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub in_channels: usize,
    pub stride: usize,
    reduce: Conv2d,
    refine: Vec<Conv2d>,
    logits: Conv2d,
}

impl SegHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, in_channels: usize, stride: usize, cfg: &HeadConfig) -> Self {
        let grp = ParamGroup::Task;
        let reduce = Conv2d::new(store, init, "head.reduce", grp, in_channels, cfg.width, 3, 1, 1.0);
        let refine = (0..Self::upsample_steps(stride))
            .map(|i| Conv2d::new(store, init, &format!("head.refine{i}"), grp, cfg.width, cfg.width, 3, 1, 1.0))
            .collect();
        let logits = Conv2d::new(store, init, "head.logits", grp, cfg.width, 1, 1, 1, 0.5);
        Self {
            in_channels,
            stride,
            reduce,
            refine,
            logits,
        }
    }

    fn upsample_steps(stride: usize) -> usize {
        let mut cur = stride;
        let mut n = 0;
        while cur > 4 {
            cur /= 2;
            n += 1;
        }
        n
    }

    pub fn numel(in_channels: usize, stride: usize, cfg: &HeadConfig) -> usize {
        Conv2d::numel(in_channels, cfg.width, 3)
            + Self::upsample_steps(stride) * Conv2d::numel(cfg.width, cfg.width, 3)
            + Conv2d::numel(cfg.width, 1, 1)
    }

    /// `features[h̃·w̃, C]` (plus optional `score[h̃·w̃, 1]`) to a `[1, H, W]`
    /// probability map.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: Var,
        score: Option<Var>,
        grid: (usize, usize),
        out_size: (usize, usize),
    ) -> Result<Var> {
        let x = match score {
            Some(p) => g.concat_cols(&[features, p])?,
            None => features,
        };
        let (n, c) = g.value(x).dims2();
        if c != self.in_channels {
            return Err(Error::dim("detection head input channels", self.in_channels, c));
        }
        if n != grid.0 * grid.1 {
            return Err(Error::dim("detection head positions", grid.0 * grid.1, n));
        }
        let x = g.transpose(x)?;
        let x = g.reshape(x, &[c, grid.0, grid.1])?;
        let x = self.reduce.forward(g, x)?;
        let mut x = g.relu(x);
        let (mut h, mut w) = grid;
        for conv in &self.refine {
            h *= 2;
            w *= 2;
            x = g.resize_bilinear(x, h, w)?;
            x = conv.forward(g, x)?;
            x = g.relu(x);
        }
        let x = self.logits.forward(g, x)?;
        let x = g.resize_bilinear(x, out_size.0, out_size.1)?;
        Ok(g.sigmoid(x))
    }
}

/// Runs the head on a fused embedding and its score map; returns `[H, W]`
/// probabilities at padded full resolution.
pub fn head_forward(store: &ParamStore, head: &SegHead, fused: &FeatureMap, p: Option<&ScoreMap>) -> Result<Tensor> {
    if let Some(p) = p {
        if p.stride != fused.stride() {
            return Err(Error::ShapeMismatch(format!(
                "score map stride {} vs features stride {}",
                p.stride,
                fused.stride()
            )));
        }
        if p.height() != fused.height() || p.width() != fused.width() {
            return Err(Error::ShapeMismatch("score map grid differs from features".into()));
        }
    }
    let mut g = Graph::with_params(store);
    let f = g.constant(fused.tokens());
    let s = match p {
        Some(p) => Some(g.constant(p.probs.clone().reshape(&[p.probs.numel(), 1])?)),
        None => None,
    };
    let grid = (fused.height(), fused.width());
    let size = (grid.0 * fused.stride(), grid.1 * fused.stride());
    let out = head.forward(&mut g, f, s, grid, size)?;
    g.value(out).clone().reshape(&[size.0, size.1])
}

fn det_weights(targets: &TargetMasks) -> Vec<f64> {
    targets.full_res_ignore.data().iter().map(|&v| 1.0 - v).collect()
}

/// Graph form of [`det_loss`] on a `[1, H, W]` probability node.
pub fn det_loss_graph(g: &mut Graph, pred: Var, targets: &TargetMasks) -> Result<Var> {
    let y = targets.full_res_mask.data();
    let w = det_weights(targets);
    let bce = g.bce(pred, y, &w, BCE_EPS)?;
    let dice = g.dice(pred, y, &w, DICE_SMOOTH)?;
    g.add(bce, dice)
}

/// Mean BCE plus soft Dice over non-ignored pixels. Zero (with a warning)
/// when every pixel is ignored.
pub fn det_loss(pred: &Tensor, targets: &TargetMasks) -> Result<f64> {
    if pred.numel() != targets.full_res_mask.numel() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            targets.full_res_mask.shape()
        )));
    }
    let w = det_weights(targets);
    if w.iter().all(|&v| v == 0.0) {
        warn!("det_loss: every pixel is ignored; returning 0");
        return Ok(0.0);
    }
    let y = targets.full_res_mask.data();
    Ok(bce_value(pred.data(), y, &w, BCE_EPS) + dice_value(pred.data(), y, &w, DICE_SMOOTH))
}

const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Outer boundary of the component containing raster-first pixel `start`,
/// traced along pixel edges with the component on the right-hand side.
fn trace_outer(labels: &[u32], w: usize, h: usize, label: u32, start: (usize, usize)) -> Vec<Point> {
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && labels[y as usize * w + x as usize] == label
    };
    let origin = (start.0 as i64, start.1 as i64);
    let mut v = origin;
    let mut d = 0usize;
    let mut poly = vec![[v.0 as f64, v.1 as f64]];
    v = (v.0 + 1, v.1);
    while v != origin {
        let (dx, dy) = DIRS[d];
        let right = (d + 1) % 4;
        let left = (d + 3) % 4;
        let (rx, ry) = DIRS[right];
        let (lx, ly) = DIRS[left];
        // cell whose center is v + (d + side) / 2
        let cell = |sx: i64, sy: i64| ((2 * v.0 + dx + sx - 1).div_euclid(2), (2 * v.1 + dy + sy - 1).div_euclid(2));
        let ahead_right = cell(rx, ry);
        let ahead_left = cell(lx, ly);
        let nd = if !inside(ahead_right.0, ahead_right.1) {
            right
        } else if inside(ahead_left.0, ahead_left.1) {
            left
        } else {
            d
        };
        if nd != d {
            poly.push([v.0 as f64, v.1 as f64]);
            d = nd;
        }
        v = (v.0 + DIRS[d].0, v.1 + DIRS[d].1);
    }
    poly
}

/// Binarizes `prob[H, W]` at `bin_thresh`, labels 4-connected components,
/// drops those smaller than `min_area` pixels and returns each remaining
/// component's outer contour with its mean probability as score.
pub fn polygonize(prob: &Tensor, bin_thresh: f64, min_area: f64) -> Result<Vec<TextInstance>> {
    if !(bin_thresh > 0.0 && bin_thresh < 1.0) {
        return Err(Error::InvalidConfig(format!("bin_thresh {bin_thresh} outside (0, 1)")));
    }
    if prob.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("polygonize expects [H, W], got {:?}", prob.shape())));
    }
    let (h, w) = prob.dims2();
    let p = prob.data();
    let mut labels = vec![0u32; h * w];
    let mut out = Vec::new();
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != 0 || p[start] <= bin_thresh {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        let mut count = 0usize;
        let mut sum = 0.0;
        while let Some(i) = queue.pop_front() {
            count += 1;
            sum += p[i];
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if labels[j] == 0 && p[j] > bin_thresh {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if (count as f64) < min_area {
            continue;
        }
        let polygon = trace_outer(&labels, w, h, next, (start % w, start / w));
        out.push(TextInstance {
            polygon,
            ignore: false,
            score: Some(sum / count as f64),
            transcription: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_sets_top_left_cells() {
        let m = rasterize_targets(&[TextInstance::rect(0.0, 0.0, 64.0, 64.0)], (128, 128), 32).unwrap();
        let want: Vec<f64> = (0..16).map(|i| if i / 4 < 2 && i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        assert_eq!(m.text_mask.data(), want.as_slice());
        assert_eq!(m.ignore_mask.sum(), 0.0);
        assert_eq!(m.full_res_mask.sum(), 64.0 * 64.0);
    }

    #[test]
    fn ignore_instance_only_hits_ignore_mask() {
        let mut inst = TextInstance::rect(0.0, 0.0, 64.0, 64.0);
        inst.ignore = true;
        let m = rasterize_targets(&[inst], (128, 128), 32).unwrap();
        assert_eq!(m.text_mask.sum(), 0.0);
        assert_eq!(m.ignore_mask.sum(), 4.0);
        assert_eq!(m.full_res_ignore.sum(), 4096.0);
    }

    #[test]
    fn empty_and_degenerate() {
        let m = rasterize_targets(&[], (64, 64), 32).unwrap();
        assert_eq!(m.text_mask.sum() + m.ignore_mask.sum() + m.full_res_mask.sum(), 0.0);
        let line = TextInstance::new(vec![[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]], false);
        let two = TextInstance::new(vec![[0.0, 0.0], [10.0, 10.0]], false);
        let m = rasterize_targets(&[line, two], (64, 64), 32).unwrap();
        assert_eq!(m.warnings.len(), 2);
        assert_eq!(m.full_res_mask.sum(), 0.0);
    }

    #[test]
    fn ignore_overrides_overlapping_text() {
        let mut ign = TextInstance::rect(0.0, 0.0, 16.0, 16.0);
        ign.ignore = true;
        let m = rasterize_targets(&[TextInstance::rect(0.0, 0.0, 32.0, 32.0), ign], (32, 32), 8).unwrap();
        for (t, i) in m.text_mask.data().iter().zip(m.ignore_mask.data()) {
            assert_eq!(t * i, 0.0);
        }
        assert_eq!(m.text_mask.sum(), 12.0);
    }

    fn solid(h: usize, w: usize, rects: &[(usize, usize, usize, usize, f64)]) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for &(x0, y0, x1, y1, v) in rects {
            for y in y0..y1 {
                for x in x0..x1 {
                    t.data_mut()[y * w + x] = v;
                }
            }
        }
        t
    }

    #[test]
    fn polygonize_single_rectangle() {
        let prob = solid(60, 80, &[(10, 20, 50, 40, 0.9)]);
        let out = polygonize(&prob, 0.3, 10.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(
            out[0].polygon,
            vec![[10.0, 20.0], [50.0, 20.0], [50.0, 40.0], [10.0, 40.0]]
        );
        assert!((out[0].score.unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn polygonize_blobs_and_min_area() {
        let prob = solid(40, 40, &[(2, 2, 10, 10, 0.8), (20, 20, 30, 25, 0.7), (35, 35, 37, 37, 0.9)]);
        let out = polygonize(&prob, 0.3, 10.0).unwrap();
        assert_eq!(out.len(), 2);
        let tiny = solid(40, 40, &[(35, 35, 37, 37, 0.9)]);
        assert!(polygonize(&tiny, 0.3, 10.0).unwrap().is_empty());
        assert!(polygonize(&tiny, 0.0, 10.0).is_err());
    }

    #[test]
    fn polygonize_l_shape_area_matches_pixels() {
        let prob = solid(20, 20, &[(2, 2, 12, 5, 1.0), (2, 5, 5, 15, 1.0)]);
        let out = polygonize(&prob, 0.5, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].polygon.len(), 6);
        assert_eq!(out[0].area(), 30.0 + 30.0);
        assert!(out[0].is_valid());
    }

    #[test]
    fn det_loss_cases() {
        let m = rasterize_targets(&[TextInstance::rect(4.0, 4.0, 12.0, 10.0)], (16, 16), 8).unwrap();
        let half = Tensor::full(&[16, 16], 0.5);
        let bce_only = bce_value(half.data(), m.full_res_mask.data(), &[1.0; 256], BCE_EPS);
        assert!((bce_only - std::f64::consts::LN_2).abs() < 1e-12);

        let exact = m.full_res_mask.clone();
        assert!(det_loss(&exact, &m).unwrap() < 1e-5);

        let mut ign = TextInstance::rect(0.0, 12.0, 16.0, 16.0);
        ign.ignore = true;
        let m2 = rasterize_targets(&[TextInstance::rect(4.0, 4.0, 12.0, 10.0), ign], (16, 16), 8).unwrap();
        let base = det_loss(&half, &m2).unwrap();
        let mut changed = half.clone();
        for v in &mut changed.data_mut()[12 * 16..] {
            *v = 0.99;
        }
        assert_eq!(det_loss(&changed, &m2).unwrap(), base);

        let mut all = TextInstance::rect(0.0, 0.0, 16.0, 16.0);
        all.ignore = true;
        let m3 = rasterize_targets(&[all], (16, 16), 8).unwrap();
        assert_eq!(det_loss(&half, &m3).unwrap(), 0.0);
    }
}
