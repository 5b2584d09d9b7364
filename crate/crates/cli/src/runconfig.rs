//! Effective run settings: defaults, then a `key = value` file, then flags.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use effnet3d::data::{AugmentConfig, ClipSpec, Normalization};
use effnet3d::model::{scale_config, ModelConfig};
use effnet3d::optim::SgdConfig;
use effnet3d::trainer::TrainConfig;
use effnet3d::{Error, Result};

/// Every key a config file or `--set` may name.
pub const KEYS: &[&str] = &[
    "augment",
    "batch",
    "bn_decay",
    "bn_eps",
    "classes",
    "clip_len",
    "decay",
    "depth_mult",
    "deterministic",
    "drop_connect",
    "dropout",
    "epochs",
    "eval_batch",
    "height",
    "lr",
    "momentum",
    "normalization",
    "patience",
    "seed",
    "stages",
    "threads",
    "train_frac",
    "variant",
    "weight_decay",
    "width",
    "width_mult",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Compound-scaling exponent: `b0` is 0.
    pub variant: u32,
    pub classes: usize,
    pub width_mult: Option<f64>,
    pub depth_mult: Option<f64>,
    pub stages: Option<usize>,
    pub clip_len: usize,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub normalization: Normalization,
    pub dropout: f64,
    pub drop_connect: f64,
    pub bn_decay: f64,
    pub bn_eps: f64,
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub eval_batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub augment: bool,
    pub seed: u64,
    pub threads: usize,
    pub deterministic: bool,
    pub train_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let model = ModelConfig::b0(2);
        Self {
            variant: 0,
            classes: 2,
            width_mult: None,
            depth_mult: None,
            stages: None,
            clip_len: 32,
            height: None,
            width: None,
            normalization: Normalization::HALF,
            dropout: model.dropout,
            drop_connect: model.drop_connect,
            bn_decay: model.bn_decay,
            bn_eps: model.bn_eps,
            lr: sgd.lr0,
            momentum: sgd.momentum,
            decay: sgd.decay,
            weight_decay: sgd.weight_decay,
            batch: 32,
            eval_batch: 32,
            epochs: 100,
            patience: 10,
            augment: true,
            seed: 0,
            threads: 0,
            deterministic: false,
            train_frac: 0.8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

pub fn parse_variant(value: &str) -> Result<u32> {
    match value {
        "b0" => Ok(0),
        "b1" => Ok(1),
        "b2" => Ok(2),
        _ => Err(Error::Config(format!("unknown variant `{value}` (expected b0, b1 or b2)"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = parse_variant(v)?,
            "classes" => self.classes = parse(key, v)?,
            "width_mult" => self.width_mult = parse_auto(key, v)?,
            "depth_mult" => self.depth_mult = parse_auto(key, v)?,
            "stages" => self.stages = parse_auto(key, v)?,
            "clip_len" => self.clip_len = parse(key, v)?,
            "height" => self.height = parse_auto(key, v)?,
            "width" => self.width = parse_auto(key, v)?,
            "normalization" => {
                self.normalization = Normalization::by_name(v).ok_or_else(|| {
                    Error::Config(format!("unknown normalization `{v}` (expected half or imagenet)"))
                })?
            }
            "dropout" => self.dropout = parse(key, v)?,
            "drop_connect" => self.drop_connect = parse(key, v)?,
            "bn_decay" => self.bn_decay = parse(key, v)?,
            "bn_eps" => self.bn_eps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "decay" => self.decay = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "train_frac" => self.train_frac = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{origin}:{}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// The network this run trains, with all overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = scale_config(self.variant, self.classes)?;
        if let Some(w) = self.width_mult {
            cfg.width_mult = w;
        }
        if let Some(d) = self.depth_mult {
            cfg.depth_mult = d;
        }
        let side = cfg.resolution[1];
        cfg.resolution = [self.clip_len, self.height.unwrap_or(side), self.width.unwrap_or(side)];
        cfg.dropout = self.dropout;
        cfg.drop_connect = self.drop_connect;
        cfg.bn_decay = self.bn_decay;
        cfg.bn_eps = self.bn_eps;
        if let Some(s) = self.stages {
            cfg = cfg.truncate_stages(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.lr,
            momentum: self.momentum,
            decay: self.decay,
            weight_decay: self.weight_decay,
        }
    }

    pub fn clip_spec(&self) -> Result<ClipSpec> {
        let [t, h, w] = self.model_config()?.resolution;
        Ok(ClipSpec {
            clip_len: t,
            height: h,
            width: w,
            normalization: self.normalization,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            eval_batch_size: self.eval_batch,
            sgd: self.sgd(),
            patience: self.patience,
            seed: self.seed,
            clip: self.clip_spec()?,
            augment: self.augment.then(AugmentConfig::default),
        })
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.sgd().validate()?;
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac) {
            return Err(Error::Config(format!("train_frac must be in [0,1], got {}", self.train_frac)));
        }
        Ok(())
    }

    /// Resolved settings as sorted `key = value` lines.
    pub fn dump(&self) -> Result<String> {
        let m = self.model_config()?;
        let values: Vec<(&str, String)> = vec![
            ("augment", self.augment.to_string()),
            ("batch", self.batch.to_string()),
            ("bn_decay", m.bn_decay.to_string()),
            ("bn_eps", m.bn_eps.to_string()),
            ("classes", m.num_classes.to_string()),
            ("clip_len", m.resolution[0].to_string()),
            ("decay", self.decay.to_string()),
            ("depth_mult", m.depth_mult.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("drop_connect", m.drop_connect.to_string()),
            ("dropout", m.dropout.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("height", m.resolution[1].to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("normalization", self.normalization.name().unwrap_or("custom").to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("stages", m.stage_table.len().to_string()),
            ("threads", self.threads.to_string()),
            ("train_frac", self.train_frac.to_string()),
            ("variant", format!("b{}", self.variant)),
            ("weight_decay", self.weight_decay.to_string()),
            ("width", m.resolution[2].to_string()),
            ("width_mult", m.width_mult.to_string()),
        ];
        debug_assert!(values.iter().map(|(k, _)| *k).eq(KEYS.iter().copied()));
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        Ok(out)
    }
}
