//! IoU-based detection evaluation.

use std::collections::BTreeMap;

use geo::{Area, BooleanOps, Coord, LineString, Polygon};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::detector::TextInstance;
use crate::error::{Error, Result};

/// How a prediction is tested against an ignore ("###") ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgnoreCriterion {
    /// Intersection over union.
    #[default]
    Iou,
    /// Intersection over the prediction's own area.
    PredArea,
}

impl std::str::FromStr for IgnoreCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(Self::Iou),
            "pred_area" => Ok(Self::PredArea),
            _ => Err(Error::InvalidConfig(format!("unknown ignore criterion {s:?}"))),
        }
    }
}

fn to_geo(poly: &[[f64; 2]]) -> Polygon<f64> {
    let ring: Vec<Coord<f64>> = poly.iter().map(|&[x, y]| Coord { x, y }).collect();
    Polygon::new(LineString::new(ring), vec![])
}

fn intersection_area(a: &TextInstance, b: &TextInstance) -> Option<(f64, f64, f64)> {
    if !a.is_valid() || !b.is_valid() {
        warn!("polygon_iou: degenerate polygon, treating overlap as 0");
        return None;
    }
    let (pa, pb) = (to_geo(&a.polygon), to_geo(&b.polygon));
    let inter = pa.intersection(&pb).unsigned_area();
    Some((inter, pa.unsigned_area(), pb.unsigned_area()))
}

/// `area(a ∩ b) / area(a ∪ b)` by exact polygon clipping; 0 for degenerate input.
pub fn polygon_iou(a: &TextInstance, b: &TextInstance) -> f64 {
    match intersection_area(a, b) {
        Some((inter, aa, ab)) => {
            let union = aa + ab - inter;
            if union <= 0.0 {
                0.0
            } else {
                (inter / union).clamp(0.0, 1.0)
            }
        }
        None => 0.0,
    }
}

/// `area(pred ∩ gt) / area(pred)`.
pub fn intersection_over_pred(pred: &TextInstance, gt: &TextInstance) -> f64 {
    match intersection_area(pred, gt) {
        Some((inter, ap, _)) if ap > 0.0 => (inter / ap).clamp(0.0, 1.0),
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_thresh: f64,
    pub ignore_criterion: IgnoreCriterion,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            ignore_criterion: IgnoreCriterion::Iou,
        }
    }
}

/// One image's matching outcome.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(pred index, gt index, iou)` in selection order.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Predictions dropped for overlapping an ignore region.
    pub ignored_preds: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Drops predictions overlapping ignore ground truths, then matches the rest
/// one-to-one to the remaining ground truths by descending IoU. Only pairs
/// with IoU strictly above the threshold are eligible; ties go to the
/// smaller `(pred, gt)` index pair.
pub fn match_instances(preds: &[TextInstance], gts: &[TextInstance], cfg: &MatchConfig) -> Matching {
    let t = cfg.iou_thresh;
    let mut ignored_preds = Vec::new();
    let mut live = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let hits_ignore = gts.iter().filter(|g| g.ignore).any(|g| {
            let v = match cfg.ignore_criterion {
                IgnoreCriterion::Iou => polygon_iou(p, g),
                IgnoreCriterion::PredArea => intersection_over_pred(p, g),
            };
            v > t
        });
        if hits_ignore {
            ignored_preds.push(i);
        } else {
            live.push(i);
        }
    }
    let cares: Vec<usize> = (0..gts.len()).filter(|&j| !gts[j].ignore).collect();
    let mut cand = Vec::new();
    for &i in &live {
        for &j in &cares {
            let iou = polygon_iou(&preds[i], &gts[j]);
            if iou > t {
                cand.push((i, j, iou));
            }
        }
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (i, j, iou) in cand {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j, iou));
        }
    }
    let tp = pairs.len();
    Matching {
        tp,
        fp: live.len() - tp,
        fn_: cares.len() - tp,
        pairs,
        ignored_preds,
    }
}

/// Precision, recall and F-measure; an empty denominator counts as 1.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ignored_preds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub fmeasure: f64,
    pub per_image: Vec<ImageRecord>,
    /// Configuration echo.
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_records(per_image: Vec<ImageRecord>, config: BTreeMap<String, String>) -> Self {
        let tp = per_image.iter().map(|r| r.tp).sum();
        let fp = per_image.iter().map(|r| r.fp).sum();
        let fn_ = per_image.iter().map(|r| r.fn_).sum();
        let (precision, recall, fmeasure) = prf(tp, fp, fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            fmeasure,
            per_image,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates named `(predictions, ground truth)` pairs image by image.
pub fn evaluate<'a, I>(images: I, cfg: &MatchConfig, config: BTreeMap<String, String>) -> EvalReport
where
    I: IntoIterator<Item = (&'a str, &'a [TextInstance], &'a [TextInstance])>,
{
    let records = images
        .into_iter()
        .map(|(name, preds, gts)| {
            let m = match_instances(preds, gts, cfg);
            ImageRecord {
                name: name.to_string(),
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
                ignored_preds: m.ignored_preds.len(),
            }
        })
        .collect();
    EvalReport::from_records(records, config)
}
