//! Run configuration: built-in defaults, then a `key = value` file, then
//! command-line overrides, each layer replacing the keys it names.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ynet_core::data::{AugmentPolicy, Split, DEFAULT_SPLIT_SEED};
use ynet_core::model::ArchConfig;
use ynet_core::optim::SgdrSchedule;

use crate::error::CliError;

pub const TINY_INPUT_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub seed: u64,
    pub split_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub loss: String,
    pub lr: f64,
    pub lr_min: f64,
    pub restart_period: f64,
    pub restart_mult: f64,
    pub dropout: [f64; 2],
    /// `None` takes the class count from the dataset.
    pub num_classes: Option<usize>,
    pub input_size: usize,
    pub augment: bool,
    pub augment_policy: AugmentPolicy,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub tiny: bool,
    pub fusam_bypass: bool,
    pub repeat: usize,
    pub split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgdr = SgdrSchedule::default();
        Self {
            data_root: None,
            seed: 0,
            split_seed: DEFAULT_SPLIT_SEED,
            epochs: 200,
            batch_size: 32,
            optimizer: "adam".into(),
            loss: "categorical_crossentropy".into(),
            lr: sgdr.eta_max,
            lr_min: sgdr.eta_min,
            restart_period: sgdr.period,
            restart_mult: sgdr.t_mult,
            dropout: [0.3, 0.2],
            num_classes: None,
            input_size: 224,
            augment: true,
            augment_policy: AugmentPolicy::default(),
            checkpoint: None,
            out_dir: PathBuf::from("runs"),
            tiny: false,
            fusam_bypass: false,
            repeat: 1,
            split: Split::Test,
        }
    }
}

/// Every key accepted in config files and `--set`.
pub const KEYS: &[&str] = &[
    "data_root",
    "seed",
    "split_seed",
    "epochs",
    "batch_size",
    "optimizer",
    "loss",
    "lr",
    "lr_min",
    "restart_period",
    "restart_mult",
    "dropout1",
    "dropout2",
    "num_classes",
    "input_size",
    "augment",
    "p_hflip",
    "p_vflip",
    "p_rot90",
    "p_brightness_contrast",
    "brightness_min",
    "brightness_max",
    "contrast_min",
    "contrast_max",
    "p_rgb_shift",
    "rgb_shift",
    "p_median_blur",
    "median_kernel",
    "checkpoint",
    "out_dir",
    "tiny",
    "fusam_bypass",
    "repeat",
    "split",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Resolves layered settings and remembers which keys were set explicitly.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    config: RunConfig,
    explicit: BTreeSet<String>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<&mut Self, CliError> {
        let c = &mut self.config;
        let p = &mut c.augment_policy;
        let v = value.trim();
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "data_root" => c.data_root = path(),
            "seed" => c.seed = parse(key, v)?,
            "split_seed" => c.split_seed = parse(key, v)?,
            "epochs" => c.epochs = parse(key, v)?,
            "batch_size" => c.batch_size = parse(key, v)?,
            "optimizer" => c.optimizer = v.to_string(),
            "loss" => c.loss = v.to_string(),
            "lr" => c.lr = parse(key, v)?,
            "lr_min" => c.lr_min = parse(key, v)?,
            "restart_period" => c.restart_period = parse(key, v)?,
            "restart_mult" => c.restart_mult = parse(key, v)?,
            "dropout1" => c.dropout[0] = parse(key, v)?,
            "dropout2" => c.dropout[1] = parse(key, v)?,
            "num_classes" => c.num_classes = if v == "auto" { None } else { Some(parse(key, v)?) },
            "input_size" => c.input_size = parse(key, v)?,
            "augment" => c.augment = parse_bool(key, v)?,
            "p_hflip" => p.p_hflip = parse(key, v)?,
            "p_vflip" => p.p_vflip = parse(key, v)?,
            "p_rot90" => p.p_rot90 = parse(key, v)?,
            "p_brightness_contrast" => p.p_brightness_contrast = parse(key, v)?,
            "brightness_min" => p.brightness.0 = parse(key, v)?,
            "brightness_max" => p.brightness.1 = parse(key, v)?,
            "contrast_min" => p.contrast.0 = parse(key, v)?,
            "contrast_max" => p.contrast.1 = parse(key, v)?,
            "p_rgb_shift" => p.p_rgb_shift = parse(key, v)?,
            "rgb_shift" => p.rgb_shift = parse(key, v)?,
            "p_median_blur" => p.p_median_blur = parse(key, v)?,
            "median_kernel" => p.median_kernel = parse(key, v)?,
            "checkpoint" => c.checkpoint = path(),
            "out_dir" => c.out_dir = PathBuf::from(v),
            "tiny" => c.tiny = parse_bool(key, v)?,
            "fusam_bypass" => c.fusam_bypass = parse_bool(key, v)?,
            "repeat" => c.repeat = parse(key, v)?,
            "split" => c.split = v.parse().map_err(|e: ynet_core::Error| CliError::Config(e.to_string()))?,
            other => return Err(CliError::Config(format!("unknown config key {other:?}"))),
        }
        self.explicit.insert(key.to_string());
        Ok(self)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<&mut Self, CliError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", no + 1)))?;
        }
        Ok(self)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let origin = path.display().to_string();
        self.apply_text(&text, &origin)
    }

    /// `KEY=VALUE`, as given to `--set`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<&mut Self, CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Fills scale-dependent defaults and validates the result.
    pub fn build(&self) -> Result<RunConfig, CliError> {
        let mut c = self.config.clone();
        if c.tiny && !self.is_explicit("input_size") {
            c.input_size = TINY_INPUT_SIZE;
        }
        c.validate()?;
        Ok(c)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.optimizer != "adam" {
            return bad(format!("only the adam optimizer is implemented, got {:?}", self.optimizer));
        }
        if self.loss != "categorical_crossentropy" {
            return bad(format!("only categorical_crossentropy is implemented, got {:?}", self.loss));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.repeat == 0 {
            return bad("epochs, batch_size and repeat must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        self.schedule()?;
        self.augment_policy
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.arch(self.num_classes.unwrap_or(2))
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<SgdrSchedule, CliError> {
        SgdrSchedule::new(self.lr, self.lr_min, self.restart_period, self.restart_mult)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn arch(&self, num_classes: usize) -> ArchConfig {
        let base = if self.tiny {
            ArchConfig::tiny(num_classes)
        } else {
            ArchConfig::default().with_num_classes(num_classes)
        };
        ArchConfig {
            dropout: self.dropout,
            ..base.with_input_size(self.input_size)
        }
    }

    pub fn augment_policy(&self) -> Option<AugmentPolicy> {
        self.augment.then(|| self.augment_policy.clone())
    }

    pub fn data_root(&self) -> Result<&Path, CliError> {
        self.data_root
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset root: pass --data-root or set data_root".into()))
    }

    /// The hyperparameter table as resolved for this run.
    pub fn hyperparameters(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "learning_rate": self.lr,
            "lr_scheduler": "cosine_annealing_warm_restarts",
            "scheduler_restart_period": self.restart_period,
            "scheduler_min_lr": self.lr_min,
            "batch_size": self.batch_size,
            "loss": self.loss,
        })
    }
}
