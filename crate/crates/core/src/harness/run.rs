//! Experiment orchestration behind the CLI subcommands.
//!
//! Every entry point writes `manifest.json` into the output directory: on
//! success it lists the finished legs and artifacts, on failure it keeps
//! whatever completed plus the error.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::info;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{format_predictions, ingest_dataset, load_image, subsample_fewshot, Dataset, DatasetSpec, Split};
use super::toy::{generate_toy_data, Domain};
use super::train::{evaluate_prepared, prepare, train, TrainOutcome};
use crate::checkpoint::{self, Header, LoadManifest};
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::evalkit::EvalReport;
use crate::model::{ParamCount, TcmModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegRecord {
    pub name: String,
    pub report: PathBuf,
    pub fmeasure: f64,
}

/// Progress record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub legs: Vec<LegRecord>,
    pub artifacts: Vec<PathBuf>,
    pub error: Option<ErrorRecord>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            status: "running".into(),
            legs: Vec::new(),
            artifacts: Vec::new(),
            error: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Runs `body`, then writes the manifest with the final status.
fn tracked<T>(cfg: &ExperimentConfig, command: &str, body: impl FnOnce(&mut RunManifest) -> Result<T>) -> Result<T> {
    let mut manifest = RunManifest::new(command);
    let out = body(&mut manifest);
    match &out {
        Ok(_) => manifest.status = "ok".into(),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.into());
        }
    }
    // a failing write must not mask the original error
    let written = manifest.write(&cfg.output_dir);
    let value = out?;
    written?;
    Ok(value)
}

fn write_json<T: Serialize>(path: &Path, value: &T, manifest: &mut RunManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    manifest.artifacts.push(path.to_path_buf());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegReport {
    pub leg: String,
    pub dataset: String,
    pub images: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub final_loss: f64,
    pub params: ParamCount,
    pub checkpoint: PathBuf,
    pub legs: Vec<LegReport>,
    pub manifest: RunManifest,
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    ingest_dataset(&DatasetSpec::at(root, split))
}

fn load_train_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    if cfg.train_sets.is_empty() {
        return Err(Error::InvalidConfig("no training set given (key `train`)".into()));
    }
    let mut names = Vec::new();
    let mut samples = Vec::new();
    for root in &cfg.train_sets {
        let ds = load_dataset(root, Split::Train)?;
        names.push(ds.name);
        samples.extend(ds.samples);
    }
    Ok(Dataset {
        name: names.join("+"),
        samples,
    })
}

/// Fresh model for `cfg`, with encoder weights imported when configured.
pub fn build_model(cfg: &ExperimentConfig) -> Result<TcmModel> {
    let mut model = TcmModel::new(cfg.model.clone())?;
    if let Some(p) = &cfg.pretrained {
        let m = checkpoint::load_pretrained(p, &mut model.store, &cfg.model.encoder)?;
        info!("imported {} tensors from {}", m.tensors.len(), p.display());
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &TcmModel, cfg: &ExperimentConfig) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(path, &Header::for_encoder(&model.config.encoder), &cfg.to_text(), &model.store)
}

/// Rebuilds a trained model from its checkpoint; every tensor must be present.
pub fn load_model(path: &Path) -> Result<(TcmModel, ExperimentConfig, LoadManifest)> {
    let ck = checkpoint::read(path)?;
    let cfg = ExperimentConfig::from_text(&ck.config, path)?;
    let mut model = TcmModel::new(cfg.model.clone())?;
    let manifest = checkpoint::install(path, &mut model.store, &cfg.model.encoder, true)?;
    Ok((model, cfg, manifest))
}

fn train_and_save(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(TcmModel, TrainOutcome, PathBuf)> {
    cfg.validate()?;
    let mut model = build_model(cfg)?;
    let data = prepare(train_set, model.stride())?;
    info!("training {} on {} images for {} steps", model.config.toggles.label(), data.len(), cfg.train.steps);
    let outcome = train(&mut model, &data, &cfg.train, cfg.factors())?;
    fs::create_dir_all(out_dir)?;
    let losses = out_dir.join("losses.csv");
    fs::write(&losses, outcome.to_csv())?;
    manifest.artifacts.push(losses);
    let ck = out_dir.join("model.ckpt");
    save_model(&ck, &model, cfg)?;
    manifest.artifacts.push(ck.clone());
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text())?;
    manifest.artifacts.push(cfg_path);
    Ok((model, outcome, ck))
}

fn eval_leg(
    model: &TcmModel,
    cfg: &ExperimentConfig,
    leg: &str,
    ds: &Dataset,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<LegReport> {
    let data = prepare(ds, model.stride())?;
    let mut echo = cfg.echo();
    echo.insert("leg".into(), leg.to_string());
    echo.insert("dataset".into(), ds.name.clone());
    let (report, _) = evaluate_prepared(model, &data, &cfg.matching, echo)?;
    let path = out_dir.join(format!("report_{}.json", leg.replace(['/', ':'], "_")));
    write_json(&path, &report, manifest)?;
    info!("{leg}: P {:.4} R {:.4} F {:.4}", report.precision, report.recall, report.fmeasure);
    manifest.legs.push(LegRecord {
        name: leg.to_string(),
        report: path,
        fmeasure: report.fmeasure,
    });
    Ok(LegReport {
        leg: leg.to_string(),
        dataset: ds.name.clone(),
        images: ds.len(),
        report,
    })
}

fn experiment(cfg: &ExperimentConfig, command: &str, target_prefix: &str) -> Result<ExperimentOutcome> {
    tracked(cfg, command, |manifest| {
        cfg.validate()?;
        let train_set = load_train_set(cfg)?;
        let (model, outcome, ck) = train_and_save(cfg, &train_set, &cfg.output_dir, manifest)?;
        let mut legs = Vec::new();
        if cfg.eval_sets.is_empty() {
            legs.push(eval_leg(&model, cfg, "train", &train_set, &cfg.output_dir, manifest)?);
        }
        for root in &cfg.eval_sets {
            let ds = load_dataset(root, Split::Test)?;
            let leg = format!("{target_prefix}:{}", ds.name);
            legs.push(eval_leg(&model, cfg, &leg, &ds, &cfg.output_dir, manifest)?);
        }
        Ok(ExperimentOutcome {
            final_loss: outcome.final_loss,
            params: model.param_count(),
            checkpoint: ck,
            legs,
            manifest: manifest.clone(),
        })
    })
}

/// Trains on the `train` legs and evaluates each `eval` leg (or the
/// training set when none is given).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    experiment(cfg, "train", "eval")
}

/// Source-to-target transfer: one report per `eval` (target) leg.
pub fn adapt(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if cfg.eval_sets.is_empty() {
        return Err(Error::InvalidConfig("adapt needs at least one target leg (key `eval`)".into()));
    }
    experiment(cfg, "adapt", "target")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotLeg {
    pub ratio: f64,
    pub available: usize,
    pub sampled: usize,
    pub sampled_names: Vec<String>,
    pub final_loss: f64,
    pub reports: Vec<LegReport>,
}

/// One training run per few-shot ratio, each from a fresh model.
pub fn fewshot_sweep(cfg: &ExperimentConfig) -> Result<Vec<FewshotLeg>> {
    tracked(cfg, "fewshot-sweep", |manifest| {
        cfg.validate()?;
        if cfg.fewshot_ratios.is_empty() {
            return Err(Error::InvalidConfig("fewshot_ratios is empty".into()));
        }
        let full = load_train_set(cfg)?;
        let evals = cfg
            .eval_sets
            .iter()
            .map(|r| load_dataset(r, Split::Test))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &ratio in &cfg.fewshot_ratios {
            let subset = subsample_fewshot(&full, ratio, cfg.train.seed)?;
            let dir = cfg.output_dir.join(format!("ratio_{ratio}"));
            let (model, outcome, _) = train_and_save(cfg, &subset, &dir, manifest)?;
            let mut reports = Vec::new();
            let targets: Vec<&Dataset> = if evals.is_empty() { vec![&subset] } else { evals.iter().collect() };
            for ds in targets {
                let leg = format!("ratio_{ratio}:{}", ds.name);
                let mut rep = eval_leg(&model, cfg, &leg, ds, &dir, manifest)?;
                rep.report.config.insert("fewshot_ratio".into(), ratio.to_string());
                rep.report.config.insert("fewshot_sampled".into(), subset.len().to_string());
                reports.push(rep);
            }
            let leg = FewshotLeg {
                ratio,
                available: full.len(),
                sampled: subset.len(),
                sampled_names: subset.samples.iter().map(|s| s.name.clone()).collect(),
                final_loss: outcome.final_loss,
                reports,
            };
            write_json(&dir.join("fewshot.json"), &leg, manifest)?;
            out.push(leg);
        }
        Ok(out)
    })
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("key `{key}` is required for this command")))
}

/// Evaluates a saved checkpoint on every `eval` leg.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Vec<LegReport>> {
    tracked(cfg, "evaluate", |manifest| {
        let (model, _, _) = load_model(require(&cfg.checkpoint, "checkpoint")?)?;
        if cfg.eval_sets.is_empty() {
            return Err(Error::InvalidConfig("no evaluation set given (key `eval`)".into()));
        }
        let mut legs = Vec::new();
        for root in &cfg.eval_sets {
            let ds = load_dataset(root, Split::Test)?;
            let leg = format!("eval:{}", ds.name);
            legs.push(eval_leg(&model, cfg, &leg, &ds, &cfg.output_dir, manifest)?);
        }
        Ok(legs)
    })
}

/// Images named by `input`: one PNG file, or every PNG under `<dir>/images`
/// (or `<dir>` itself).
fn input_images(input: &Path) -> Result<Vec<(String, Image)>> {
    if input.is_file() {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(stem, load_image(input)?)]);
    }
    let dir = if input.join("images").is_dir() { input.join("images") } else { input.to_path_buf() };
    if !dir.is_dir() {
        return Err(Error::NotFound(input.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().expect("file stem").to_string_lossy().into_owned();
            Ok((stem, load_image(&p)?))
        })
        .collect()
}

/// Writes `res_<stem>.txt` prediction files for the `input` images.
pub fn predict(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    tracked(cfg, "predict", |manifest| {
        let (model, _, _) = load_model(require(&cfg.checkpoint, "checkpoint")?)?;
        let dir = cfg.output_dir.join("predictions");
        fs::create_dir_all(&dir)?;
        let mut files = Vec::new();
        for (stem, img) in input_images(require(&cfg.input, "input")?)? {
            let (_, inst) = model.predict(&img)?;
            let path = dir.join(format!("res_{stem}.txt"));
            fs::write(&path, format_predictions(&inst))?;
            manifest.artifacts.push(path.clone());
            files.push(path);
        }
        Ok(files)
    })
}

/// Writes the toy corpus described by the `toy_*` keys.
pub fn gen_toy(cfg: &ExperimentConfig) -> Result<DatasetSpec> {
    tracked(cfg, "gen-toy", |manifest| {
        let domain: Domain = cfg.toy.domain.parse()?;
        let spec = generate_toy_data(&cfg.toy.dir, cfg.toy.count, cfg.toy.seed, cfg.toy.size, domain)?;
        manifest.artifacts.push(spec.images_dir.clone());
        manifest.artifacts.push(spec.annotations_dir.clone());
        Ok(spec)
    })
}

/// Grayscale rendering scaled so the maximum maps to 255; an all-zero map stays black.
pub fn to_gray(map: &Tensor) -> GrayImage {
    let (h, w) = map.dims2();
    let max = map.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map.data()[y as usize * w + x as usize];
        let g = if max > 0.0 { (v.abs() / max * 255.0).round() } else { 0.0 };
        image::Luma([g as u8])
    })
}

/// Files written for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedMaps {
    pub image: String,
    pub grid: (usize, usize),
    pub files: Vec<PathBuf>,
}

/// Channel-norm maps of `I` and `Ĩ`, the score map `P`, and raw arrays of each.
pub fn export_maps(cfg: &ExperimentConfig) -> Result<Vec<ExportedMaps>> {
    tracked(cfg, "export-maps", |manifest| {
        let (model, _, _) = load_model(require(&cfg.checkpoint, "checkpoint")?)?;
        let dir = cfg.output_dir.join("maps");
        fs::create_dir_all(&dir)?;
        let mut out = Vec::new();
        for (stem, img) in input_images(require(&cfg.input, "input")?)? {
            let maps = model.maps(&img)?;
            let grid = (maps.image_embedding.height(), maps.image_embedding.width());
            let mut items = vec![("image_embedding", maps.image_embedding.channel_norms())];
            if let Some(vp) = &maps.visual_prompt {
                items.push(("visual_prompt", vp.channel_norms()));
            }
            if let Some(p) = &maps.score {
                items.push(("score", p.probs.clone().reshape(&[grid.0, grid.1])?));
            }
            let mut files = Vec::new();
            for (name, map) in items {
                let png = dir.join(format!("{stem}_{name}.png"));
                let raw = dir.join(format!("{stem}_{name}.bin"));
                if name == "score" {
                    // probabilities are already in [0, 1]; keep the absolute scale
                    let (h, w) = map.dims2();
                    GrayImage::from_fn(w as u32, h as u32, |x, y| {
                        image::Luma([(map.data()[y as usize * w + x as usize] * 255.0).round() as u8])
                    })
                    .save(&png)?;
                } else {
                    to_gray(&map).save(&png)?;
                }
                checkpoint::write_array(&raw, &map)?;
                files.push(png);
                files.push(raw);
            }
            manifest.artifacts.extend(files.iter().cloned());
            out.push(ExportedMaps {
                image: stem,
                grid,
                files,
            });
        }
        Ok(out)
    })
}
