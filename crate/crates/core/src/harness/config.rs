//! Flat `key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. Every key has a default, so
//! an empty file is a valid toy configuration. Unknown keys are rejected.
//! List values are comma separated; an empty value clears an optional path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{IgnoreCriterion, MatchConfig};
use crate::model::ModelConfig;
use crate::optim::GroupFactors;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Seeds batch order and few-shot sampling.
    pub seed: u64,
    /// Random crop + resize of every training image (toy mode only).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            steps: 2000,
            batch_size: 4,
            clip_norm: Some(5.0),
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub domain: String,
    pub dir: PathBuf,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            count: 20,
            seed: 7,
            size: 64,
            domain: "domainA".into(),
            dir: PathBuf::from("toy/domainA"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub matching: MatchConfig,
    /// Dataset roots trained on, concatenated in order.
    pub train_sets: Vec<PathBuf>,
    /// Dataset roots evaluated separately, one report each.
    pub eval_sets: Vec<PathBuf>,
    pub fewshot_ratios: Vec<f64>,
    pub output_dir: PathBuf,
    /// Trained checkpoint for `evaluate`, `predict` and `export-maps`.
    pub checkpoint: Option<PathBuf>,
    /// Encoder weights imported before training.
    pub pretrained: Option<PathBuf>,
    /// Image file or dataset root for `predict` and `export-maps`.
    pub input: Option<PathBuf>,
    pub toy: ToyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            matching: MatchConfig::default(),
            train_sets: Vec::new(),
            eval_sets: Vec::new(),
            fewshot_ratios: vec![0.1, 0.3, 0.5, 1.0],
            output_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            pretrained: None,
            input: None,
            toy: ToyConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_list(xs: &[PathBuf]) -> String {
    xs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn opt_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let e = &mut m.encoder;
        match key {
            "embed_dim" => e.embed_dim = parse(key, v)?,
            "token_dim" => e.token_dim = parse(key, v)?,
            "stride" => e.stride = parse(key, v)?,
            "stem_width" => e.stem_width = parse(key, v)?,
            "pool_heads" => e.pool_heads = parse(key, v)?,
            "text_layers" => e.text_layers = parse(key, v)?,
            "text_heads" => e.text_heads = parse(key, v)?,
            "context_len" => e.context_len = parse(key, v)?,
            "encoder_seed" => e.seed = parse(key, v)?,
            "toy_mode" => e.toy_mode = parse_bool(key, v)?,
            "image_lr_factor" => e.image_lr_factor = parse(key, v)?,
            "text_lr_factor" => e.text_lr_factor = parse(key, v)?,
            "vg_depth" => m.vg.depth = parse(key, v)?,
            "vg_heads" => m.vg.heads = parse(key, v)?,
            "vg_width" => m.vg.width = parse(key, v)?,
            "vg_ffn_dim" => m.vg.ffn_dim = parse(key, v)?,
            "vg_pos_embed" => m.vg.pos_embed = parse_bool(key, v)?,
            "head_width" => m.head.width = parse(key, v)?,
            "bin_thresh" => m.head.bin_thresh = parse(key, v)?,
            "min_area" => m.head.min_area = parse(key, v)?,
            "use_pp" => m.toggles.pp = parse_bool(key, v)?,
            "use_lp" => m.toggles.lp = parse_bool(key, v)?,
            "use_lg" => m.toggles.lg = parse_bool(key, v)?,
            "use_vg" => m.toggles.vg = parse_bool(key, v)?,
            "n_prompts" => m.n_prompts = parse(key, v)?,
            "class_name" => m.class_name = v.to_string(),
            "tau_init" => m.tau_init = parse(key, v)?,
            "lambda" => m.lambda = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "clip_norm" => {
                let c: f64 = parse(key, v)?;
                self.train.clip_norm = (c > 0.0).then_some(c);
            }
            "seed" => self.train.seed = parse(key, v)?,
            "augment" => self.train.augment = parse_bool(key, v)?,
            "iou_thresh" => self.matching.iou_thresh = parse(key, v)?,
            "ignore_criterion" => self.matching.ignore_criterion = v.parse::<IgnoreCriterion>()?,
            "train" => self.train_sets = parse_list(key, v)?,
            "eval" => self.eval_sets = parse_list(key, v)?,
            "fewshot_ratios" => self.fewshot_ratios = parse_list(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "pretrained" => self.pretrained = opt_path(v),
            "input" => self.input = opt_path(v),
            "toy_count" => self.toy.count = parse(key, v)?,
            "toy_seed" => self.toy.seed = parse(key, v)?,
            "toy_size" => self.toy.size = parse(key, v)?,
            "toy_domain" => self.toy.domain = v.to_string(),
            "toy_dir" => self.toy.dir = PathBuf::from(v),
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        vec![
            ("embed_dim", e.embed_dim.to_string()),
            ("token_dim", e.token_dim.to_string()),
            ("stride", e.stride.to_string()),
            ("stem_width", e.stem_width.to_string()),
            ("pool_heads", e.pool_heads.to_string()),
            ("text_layers", e.text_layers.to_string()),
            ("text_heads", e.text_heads.to_string()),
            ("context_len", e.context_len.to_string()),
            ("encoder_seed", e.seed.to_string()),
            ("toy_mode", e.toy_mode.to_string()),
            ("image_lr_factor", e.image_lr_factor.to_string()),
            ("text_lr_factor", e.text_lr_factor.to_string()),
            ("vg_depth", m.vg.depth.to_string()),
            ("vg_heads", m.vg.heads.to_string()),
            ("vg_width", m.vg.width.to_string()),
            ("vg_ffn_dim", m.vg.ffn_dim.to_string()),
            ("vg_pos_embed", m.vg.pos_embed.to_string()),
            ("head_width", m.head.width.to_string()),
            ("bin_thresh", m.head.bin_thresh.to_string()),
            ("min_area", m.head.min_area.to_string()),
            ("use_pp", m.toggles.pp.to_string()),
            ("use_lp", m.toggles.lp.to_string()),
            ("use_lg", m.toggles.lg.to_string()),
            ("use_vg", m.toggles.vg.to_string()),
            ("n_prompts", m.n_prompts.to_string()),
            ("class_name", m.class_name.clone()),
            ("tau_init", m.tau_init.to_string()),
            ("lambda", m.lambda.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("clip_norm", t.clip_norm.unwrap_or(0.0).to_string()),
            ("seed", t.seed.to_string()),
            ("augment", t.augment.to_string()),
            ("iou_thresh", self.matching.iou_thresh.to_string()),
            (
                "ignore_criterion",
                match self.matching.ignore_criterion {
                    IgnoreCriterion::Iou => "iou",
                    IgnoreCriterion::PredArea => "pred_area",
                }
                .to_string(),
            ),
            ("train", path_list(&self.train_sets)),
            ("eval", path_list(&self.eval_sets)),
            ("fewshot_ratios", join(&self.fewshot_ratios)),
            ("output_dir", self.output_dir.display().to_string()),
            ("checkpoint", opt_str(&self.checkpoint)),
            ("pretrained", opt_str(&self.pretrained)),
            ("input", opt_str(&self.input)),
            ("toy_count", self.toy.count.to_string()),
            ("toy_seed", self.toy.seed.to_string()),
            ("toy_size", self.toy.size.to_string()),
            ("toy_domain", self.toy.domain.clone()),
            ("toy_dir", self.toy.dir.display().to_string()),
        ]
    }

    /// Configuration echo for reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies the lines of `text` on top of the defaults. `file` only labels errors.
    pub fn from_text(text: &str, file: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                file: file.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_text(&fs::read_to_string(path)?, path)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn factors(&self) -> GroupFactors {
        GroupFactors {
            image: self.model.encoder.image_lr_factor,
            text: self.model.encoder.text_lr_factor,
            task: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if t.lr.is_nan() || t.lr <= 0.0 || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::InvalidConfig("lr must be > 0 and momentum in [0, 1)".into()));
        }
        if t.augment && !self.model.encoder.toy_mode {
            return Err(Error::InvalidConfig("augment is only available with toy_mode".into()));
        }
        if !(self.matching.iou_thresh > 0.0 && self.matching.iou_thresh < 1.0) {
            return Err(Error::InvalidConfig("iou_thresh must be in (0, 1)".into()));
        }
        Ok(())
    }
}
