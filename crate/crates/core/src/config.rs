//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::DistanceMetric;
use crate::model::{ModelConfig, Placement, ProjHead};

/// Every key accepted in a config file or `--set`, in echo order.
pub const KEYS: [&str; 29] = [
    "desk_profile",
    "dataset",
    "data_path",
    "num_classes",
    "labels_per_class",
    "split_index",
    "seed",
    "B_s",
    "mu",
    "tau",
    "lambda_u",
    "lambda_r",
    "lr0",
    "momentum",
    "weight_decay",
    "nesterov",
    "ema_decay",
    "total_steps",
    "dist_metric",
    "dist_placement",
    "proj_head",
    "pairing",
    "detach_weak",
    "rot_includes_labeled",
    "cutout_side",
    "crop_pad",
    "log_every",
    "eval_every",
    "out_dir",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar,
}

/// Which augmentation each unlabeled branch receives. The pseudo-label is
/// always read from the first branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    WeakStrong,
    WeakWeak,
    StrongStrong,
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak-strong" => Ok(Pairing::WeakStrong),
            "weak-weak" => Ok(Pairing::WeakWeak),
            "strong-strong" => Ok(Pairing::StrongStrong),
            _ => Err(Error::Config(format!("unknown pairing `{s}`"))),
        }
    }
}

impl Pairing {
    pub fn name(self) -> &'static str {
        match self {
            Pairing::WeakStrong => "weak-strong",
            Pairing::WeakWeak => "weak-weak",
            Pairing::StrongStrong => "strong-strong",
        }
    }
}

/// Order of rotation and weak augmentation in the rotation branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationOrder {
    /// Weakly augment the rotated image.
    RotateThenAugment,
    /// Rotate the weakly augmented image.
    AugmentThenRotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// lr0·cos(7πk / 16K).
    Cosine,
    /// lr0·(1 + cos(πk / K)) / 2.
    HalfCosine,
}

/// Desk-scale synthetic data sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSizes {
    pub unlabeled: usize,
    pub test_per_class: usize,
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub desk_profile: bool,
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub num_classes: usize,
    pub labels_per_class: usize,
    pub split_index: usize,
    pub seed: u64,
    pub b_s: usize,
    pub mu: usize,
    pub tau: f64,
    pub lambda_u: f64,
    pub lambda_r: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub ema_decay: f64,
    pub total_steps: usize,
    pub dist_metric: Option<DistanceMetric>,
    pub dist_placement: Placement,
    pub proj_head: ProjHead,
    pub pairing: Pairing,
    pub detach_weak: bool,
    pub rot_includes_labeled: bool,
    pub cutout_side: Option<usize>,
    pub crop_pad: Option<usize>,
    pub log_every: usize,
    pub eval_every: usize,
    pub out_dir: Option<PathBuf>,

    pub width: usize,
    pub proj_dim: usize,
    pub rotation_order: RotationOrder,
    pub schedule: Schedule,
    pub synthetic: SyntheticSizes,
}

pub const NUM_SPLITS: usize = 5;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            desk_profile: false,
            dataset: DatasetKind::Synthetic,
            data_path: None,
            num_classes: 4,
            labels_per_class: 4,
            split_index: 0,
            seed: 0,
            b_s: 64,
            mu: 7,
            tau: 0.95,
            lambda_u: 1.0,
            lambda_r: 1.0,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            ema_decay: 0.999,
            total_steps: 2000,
            dist_metric: Some(DistanceMetric::CosineSimilarity),
            dist_placement: Placement::A,
            proj_head: ProjHead::Linear,
            pairing: Pairing::WeakStrong,
            detach_weak: false,
            rot_includes_labeled: false,
            cutout_side: None,
            crop_pad: None,
            log_every: 50,
            eval_every: 500,
            out_dir: None,
            width: 16,
            proj_dim: 128,
            rotation_order: RotationOrder::RotateThenAugment,
            schedule: Schedule::Cosine,
            synthetic: SyntheticSizes {
                unlabeled: 2000,
                test_per_class: 250,
                image_size: 32,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".into(), |n| n.to_string())
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Paper-scale defaults shrunk to run on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            desk_profile: true,
            b_s: 16,
            mu: 4,
            total_steps: 2000,
            width: 8,
            ema_decay: 0.99,
            ..TrainConfig::default()
        }
    }

    pub fn b_u(&self) -> usize {
        self.mu * self.b_s
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "desk_profile" => {
                let on = parse_bool(key, v)?;
                if on && !self.desk_profile {
                    let keep = self.clone();
                    *self = TrainConfig::desk();
                    self.out_dir = keep.out_dir;
                }
                self.desk_profile = on;
            }
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar" => DatasetKind::Cifar,
                    _ => return Err(Error::Config(format!("dataset must be synthetic|cifar, got `{v}`"))),
                }
            }
            "data_path" => self.data_path = opt_path(v),
            "num_classes" => self.num_classes = parse(key, v)?,
            "labels_per_class" => self.labels_per_class = parse(key, v)?,
            "split_index" => self.split_index = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "B_s" => self.b_s = parse(key, v)?,
            "mu" => self.mu = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda_u" => self.lambda_u = parse(key, v)?,
            "lambda_r" => self.lambda_r = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "nesterov" => self.nesterov = parse_bool(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "dist_metric" => self.dist_metric = DistanceMetric::parse_optional(v)?,
            "dist_placement" => self.dist_placement = v.parse()?,
            "proj_head" => self.proj_head = v.parse()?,
            "pairing" => self.pairing = v.parse()?,
            "detach_weak" => self.detach_weak = parse_bool(key, v)?,
            "rot_includes_labeled" => self.rot_includes_labeled = parse_bool(key, v)?,
            "cutout_side" => self.cutout_side = parse_auto(key, v)?,
            "crop_pad" => self.crop_pad = parse_auto(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "out_dir" => self.out_dir = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments. `desk_profile` is applied first so
    /// that explicit keys override the profile regardless of order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        for &(k, v) in pairs.iter().filter(|(k, _)| *k == "desk_profile") {
            self.set(k, v)?;
        }
        for &(k, v) in pairs.iter().filter(|(k, _)| *k != "desk_profile") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses config text: `key = value` lines, `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = Self::parse_text(text)?;
        let mut cfg = TrainConfig::default();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as config-file text.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "desk_profile" => self.desk_profile.to_string(),
            "dataset" => match self.dataset {
                DatasetKind::Synthetic => "synthetic".into(),
                DatasetKind::Cifar => "cifar".into(),
            },
            "data_path" => show_path(&self.data_path),
            "num_classes" => self.num_classes.to_string(),
            "labels_per_class" => self.labels_per_class.to_string(),
            "split_index" => self.split_index.to_string(),
            "seed" => self.seed.to_string(),
            "B_s" => self.b_s.to_string(),
            "mu" => self.mu.to_string(),
            "tau" => self.tau.to_string(),
            "lambda_u" => self.lambda_u.to_string(),
            "lambda_r" => self.lambda_r.to_string(),
            "lr0" => self.lr0.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "nesterov" => self.nesterov.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "dist_metric" => self.dist_metric.map_or("none", DistanceMetric::name).into(),
            "dist_placement" => self.dist_placement.to_string(),
            "proj_head" => self.proj_head.to_string(),
            "pairing" => self.pairing.name().into(),
            "detach_weak" => self.detach_weak.to_string(),
            "rot_includes_labeled" => self.rot_includes_labeled.to_string(),
            "cutout_side" => show_auto(self.cutout_side),
            "crop_pad" => show_auto(self.crop_pad),
            "log_every" => self.log_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "out_dir" => show_path(&self.out_dir),
            _ => String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.b_s == 0 || self.mu == 0 {
            return bad("B_s and mu must be positive".into());
        }
        if self.labels_per_class == 0 {
            return bad("labels_per_class must be positive".into());
        }
        if self.split_index >= NUM_SPLITS {
            return bad(format!("split_index must be below {NUM_SPLITS}"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if self.lambda_u < 0.0 || self.lambda_r < 0.0 || self.lr0 <= 0.0 {
            return bad("lambda_u, lambda_r must be >= 0 and lr0 > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay >= 0".into());
        }
        if self.log_every == 0 || self.eval_every == 0 {
            return bad("log_every and eval_every must be positive".into());
        }
        if self.dataset == DatasetKind::Cifar && self.data_path.is_none() {
            return bad("dataset = cifar needs data_path".into());
        }
        self.model_config(self.synthetic.image_size).validate()
    }

    pub fn model_config(&self, image_size: usize) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            image_size,
            width: self.width,
            proj_dim: self.proj_dim,
            proj_head: self.proj_head,
            placement: self.dist_placement,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_pad: self.crop_pad,
            cutout_side: self.cutout_side,
            ..AugmentConfig::default()
        }
    }
}
