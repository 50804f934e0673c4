//! Training loop and dataset evaluation.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{random_crop_resize, MIN_CROP};
use super::config::TrainConfig;
use super::data::Dataset;
use crate::detector::{rasterize_targets, TargetMasks, TextInstance};
use crate::encoders::Image;
use crate::error::Result;
use crate::evalkit::{EvalReport, ImageRecord, MatchConfig};
use crate::model::TcmModel;
use crate::optim::{accumulate, GroupFactors, Sgd};
use crate::tensor::Tensor;

/// A sample with its rasterized targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub name: String,
    pub image: Image,
    pub instances: Vec<TextInstance>,
    pub targets: TargetMasks,
}

pub fn prepare(ds: &Dataset, stride: usize) -> Result<Vec<Prepared>> {
    ds.samples
        .par_iter()
        .map(|s| {
            let targets = rasterize_targets(&s.instances, s.image.padded_size(stride), stride)?;
            Ok(Prepared {
                name: s.name.clone(),
                image: s.image.clone(),
                instances: s.instances.clone(),
                targets,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub det: f64,
    pub aux: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    /// Mean total loss of the last batch.
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,det,aux,grad_norm\n");
        for l in &self.log {
            let aux = l.aux.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", l.step, l.total, l.det, aux, l.grad_norm));
        }
        s
    }
}

/// Seeded epoch-wise shuffling; batches may straddle epochs.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    n: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
            n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Keeps augmentation draws independent of the batch-order stream.
const AUGMENT_SALT: u64 = 0xa11c_e5ed;

/// Runs `cfg.steps` momentum-SGD steps on mean batch gradients.
///
/// Per-image graphs run in parallel; their gradients are summed in batch
/// order, so the result does not depend on thread scheduling.
pub fn train(model: &mut TcmModel, data: &[Prepared], cfg: &TrainConfig, factors: GroupFactors) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(crate::error::Error::InvalidInput("training set is empty".into()));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, factors)?;
    opt.clip_norm = cfg.clip_norm;
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch = sampler.next(cfg.batch_size);
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                if !cfg.augment {
                    return model.gradients(&data[i].image, &data[i].targets);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_SALT);
                rng.set_stream((step * cfg.batch_size + slot) as u64);
                let (img, inst) = random_crop_resize(&mut rng, &data[i].image, &data[i].instances, MIN_CROP);
                let targets = rasterize_targets(&inst, img.padded_size(model.stride()), model.stride())?;
                model.gradients(&img, &targets)
            })
            .collect::<Result<Vec<_>>>()?;
        let b = results.len() as f64;
        let (mut total, mut det, mut aux) = (0.0, 0.0, None::<f64>);
        let mut grads = Vec::new();
        for (v, g) in results {
            total += v.total;
            det += v.det;
            if let Some(a) = v.aux {
                *aux.get_or_insert(0.0) += a;
            }
            accumulate(&mut grads, g);
        }
        for t in grads.iter_mut().flatten() {
            *t = t.map(|x| x / b);
        }
        let grad_norm = opt.step(&mut model.store, &grads)?;
        let entry = StepLog {
            step,
            total: total / b,
            det: det / b,
            aux: aux.map(|a| a / b),
            grad_norm,
        };
        if step % 100 == 0 || step + 1 == cfg.steps {
            let aux = entry.aux.map_or_else(|| "-".to_string(), |a| format!("{a:.5}"));
            info!("step {step}: loss {:.5} det {:.5} aux {aux}", entry.total, entry.det);
        } else {
            debug!("step {step}: loss {:.5}", entry.total);
        }
        final_loss = entry.total;
        log.push(entry);
    }
    Ok(TrainOutcome { log, final_loss })
}

/// Predictions per sample, in dataset order.
pub fn predict_all(model: &TcmModel, data: &[Prepared]) -> Result<Vec<(Tensor, Vec<TextInstance>)>> {
    data.par_iter().map(|p| model.predict(&p.image)).collect()
}

pub fn evaluate_prepared(
    model: &TcmModel,
    data: &[Prepared],
    matching: &MatchConfig,
    echo: BTreeMap<String, String>,
) -> Result<(EvalReport, Vec<Vec<TextInstance>>)> {
    let preds: Vec<Vec<TextInstance>> = predict_all(model, data)?.into_iter().map(|(_, i)| i).collect();
    let records = data
        .par_iter()
        .zip(&preds)
        .map(|(p, pred)| {
            let m = crate::evalkit::match_instances(pred, &p.instances, matching);
            ImageRecord {
                name: p.name.clone(),
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
                ignored_preds: m.ignored_preds.len(),
            }
        })
        .collect();
    Ok((EvalReport::from_records(records, echo), preds))
}
