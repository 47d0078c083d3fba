//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored; unknown keys are errors. Every
//! key has a default, so an empty file is a valid configuration and
//! [`RunConfig::to_text`] always writes the full resolved set.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{GsdError, Result};
use crate::gsd::{AnchorMode, EvalBasisMode, GsdConfig};
use crate::synthgen::SynthConfig;
use crate::training::{FrozenInit, TrainSettings};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "GSD_SEED";

/// Every knob of a run: model, decoupling, optimisation, data and output location.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    /// Whether the detector uses decoupling at all; `false` gives the baseline.
    pub gsd_enabled: bool,
    pub gsd: GsdConfig,
    pub train: TrainSettings,
    /// Seeds of multi-seed experiments such as sweeps.
    pub seeds: Vec<u64>,
    /// Synthetic data parameters; `domain` and `seed` are set per split.
    pub data: SynthConfig,
    /// Seed of the synthetic data; `None` follows `train.seed`.
    pub data_seed: Option<u64>,
    pub data_train: Option<PathBuf>,
    pub data_test_a: Option<PathBuf>,
    pub data_test_b: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            gsd_enabled: true,
            gsd: GsdConfig::default(),
            train: TrainSettings::default(),
            seeds: vec![1, 2, 3, 4, 5],
            data: SynthConfig::default(),
            data_seed: None,
            data_train: None,
            data_test_a: None,
            data_test_b: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GsdError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(GsdError::Config(format!("invalid value {value:?} for {key}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses `text` on top of the defaults, then validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GsdError::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GsdError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "encoder.image_size" => e.image_size = parse(key, value)?,
            "encoder.patch_size" => e.patch_size = parse(key, value)?,
            "encoder.dim" => e.dim = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.depth" => e.depth = parse(key, value)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, value)?,
            "gsd.enabled" => self.gsd_enabled = parse_bool(key, value)?,
            "gsd.num_tail_layers" => self.gsd.num_tail_layers = parse(key, value)?,
            "gsd.k" => self.gsd.requested_k = parse(key, value)?,
            "gsd.anchor_mode" => self.gsd.anchor_mode = parse::<AnchorMode>(key, value)?,
            "gsd.eval_basis_mode" => self.gsd.eval_basis_mode = parse::<EvalBasisMode>(key, value)?,
            "train.lr" => t.optimizer.lr = parse(key, value)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, value)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, value)?,
            "train.eps" => t.optimizer.eps = parse(key, value)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, value)?,
            "train.batch" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?
            }
            "train.frozen_init" => {
                t.frozen_init = match value {
                    "pretrained" => FrozenInit::Pretrained,
                    "random" => FrozenInit::Random,
                    _ => return Err(GsdError::Config(format!("invalid value {value:?} for {key}"))),
                }
            }
            "train.pretrain_epochs" => t.pretrain_epochs = parse(key, value)?,
            "train.pretrain_lr" => t.pretrain_lr = parse(key, value)?,
            "train.eval_each_epoch" => t.eval_each_epoch = parse_bool(key, value)?,
            "data.train" => self.data_train = optional_path(value),
            "data.test_a" => self.data_test_a = optional_path(value),
            "data.test_b" => self.data_test_b = optional_path(value),
            "data.seed" => {
                self.data_seed = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            "data.n_identities" => d.n_identities = parse(key, value)?,
            "data.samples_per_identity" => d.samples_per_identity = parse(key, value)?,
            "data.semantic_strength" => d.semantic_strength = parse(key, value)?,
            "data.artifact_strength" => d.artifact_strength = parse(key, value)?,
            "data.noise_sigma" => d.noise_sigma = parse(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(GsdError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gsd.validate(self.encoder.depth)?;
        let mut data = self.data.clone();
        data.image_size = self.encoder.image_size;
        data.validate()?;
        let o = &self.train.optimizer;
        if !(o.lr > 0.0) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(GsdError::Config("lr and eps must be positive, weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(GsdError::Config("betas must lie in [0, 1)".into()));
        }
        if self.train.batch_size == 0 {
            return Err(GsdError::Config("train.batch must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(GsdError::Config("train.seeds must list at least one seed".into()));
        }
        Ok(())
    }

    /// Replaces `train.seed` with the value of [`SEED_ENV`] when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// The decoupling settings the detector trains with, or `None` for the baseline.
    pub fn active_gsd(&self) -> Option<GsdConfig> {
        self.gsd_enabled.then_some(self.gsd)
    }

    pub fn effective_data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.train.seed)
    }

    /// Synthetic parameters with the image size tied to the encoder.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.encoder.image_size,
            ..self.data.clone()
        }
    }

    /// The full resolved configuration, one key per line, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let o = &t.optimizer;
        let d = &self.data;
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let lines = [
            ("encoder.image_size", e.image_size.to_string()),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("gsd.enabled", self.gsd_enabled.to_string()),
            ("gsd.num_tail_layers", self.gsd.num_tail_layers.to_string()),
            ("gsd.k", self.gsd.requested_k.to_string()),
            ("gsd.anchor_mode", self.gsd.anchor_mode.to_string()),
            ("gsd.eval_basis_mode", self.gsd.eval_basis_mode.to_string()),
            ("train.lr", o.lr.to_string()),
            ("train.beta1", o.beta1.to_string()),
            ("train.beta2", o.beta2.to_string()),
            ("train.eps", o.eps.to_string()),
            ("train.weight_decay", o.weight_decay.to_string()),
            ("train.batch", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.seeds", seeds.join(",")),
            (
                "train.frozen_init",
                match t.frozen_init {
                    FrozenInit::Pretrained => "pretrained".to_string(),
                    FrozenInit::Random => "random".to_string(),
                },
            ),
            ("train.pretrain_epochs", t.pretrain_epochs.to_string()),
            ("train.pretrain_lr", t.pretrain_lr.to_string()),
            ("train.eval_each_epoch", t.eval_each_epoch.to_string()),
            ("data.train", show_path(&self.data_train)),
            ("data.test_a", show_path(&self.data_test_a)),
            ("data.test_b", show_path(&self.data_test_b)),
            ("data.seed", self.data_seed.map(|s| s.to_string()).unwrap_or_default()),
            ("data.n_identities", d.n_identities.to_string()),
            ("data.samples_per_identity", d.samples_per_identity.to_string()),
            ("data.semantic_strength", d.semantic_strength.to_string()),
            ("data.artifact_strength", d.artifact_strength.to_string()),
            ("data.noise_sigma", d.noise_sigma.to_string()),
            ("out.dir", self.out_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
