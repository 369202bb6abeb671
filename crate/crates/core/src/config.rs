//! Run configuration files: UTF-8 `key = value` lines with `#` comments,
//! keys grouped under `model.`, `train.`, `loss.`, `augment.` and `data.`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::signals::SplitFractions;
use crate::training::{TrainConfig, TrainMode};

/// Every setting a run reads, starting from each module's defaults.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub split: SplitFractions,
    pub split_seed: u64,
}

/// Recognized keys, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 27] = [
    "model.segment_len",
    "model.patch_size",
    "model.d_enc",
    "model.enc_depth",
    "model.dec_width",
    "model.dec_depth",
    "model.heads",
    "model.ffn_mult",
    "model.dropout",
    "train.batch_size",
    "train.learning_rate",
    "train.scheduler_factor",
    "train.scheduler_patience",
    "train.early_stop_patience",
    "train.max_epochs",
    "train.mask_ratio_min",
    "train.mask_ratio_max",
    "train.seed",
    "train.mode",
    "loss.lambda",
    "loss.tau",
    "augment.warp_step_std",
    "augment.noise_std",
    "data.train_fraction",
    "data.valid_fraction",
    "data.test_fraction",
    "data.split_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::InvalidValue { key: key.to_string(), reason: format!("`{value}`: {e}") })
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`, validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies every line of `text`; a key may appear at most once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("config line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidValue { key: key.to_string(), reason: "set more than once".into() });
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.segment_len" => m.segment_len = parse(key, value)?,
            "model.patch_size" => m.patch_size = parse(key, value)?,
            "model.d_enc" => m.d_enc = parse(key, value)?,
            "model.enc_depth" => m.enc_depth = parse(key, value)?,
            "model.dec_width" => m.dec_width = parse(key, value)?,
            "model.dec_depth" => m.dec_depth = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.scheduler_factor" => t.scheduler_factor = parse(key, value)?,
            "train.scheduler_patience" => t.scheduler_patience = parse(key, value)?,
            "train.early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "train.max_epochs" => t.max_epochs = parse(key, value)?,
            "train.mask_ratio_min" => t.mask_ratio_range.0 = parse(key, value)?,
            "train.mask_ratio_max" => t.mask_ratio_range.1 = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.mode" => t.mode = value.parse::<TrainMode>()?,
            "loss.lambda" => self.loss.lambda = parse(key, value)?,
            "loss.tau" => self.loss.tau = parse(key, value)?,
            "augment.warp_step_std" => self.augment.warp_step_std = parse(key, value)?,
            "augment.noise_std" => self.augment.noise_std = parse(key, value)?,
            "data.train_fraction" => self.split.train = parse(key, value)?,
            "data.valid_fraction" => self.split.valid = parse(key, value)?,
            "data.test_fraction" => self.split.test = parse(key, value)?,
            "data.split_seed" => self.split_seed = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Checks every section with its owning module's rules.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        let f = [self.split.train, self.split.valid, self.split.test];
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(f));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let (m, t) = (&self.model, &self.train);
        match key {
            "model.segment_len" => m.segment_len.to_string(),
            "model.patch_size" => m.patch_size.to_string(),
            "model.d_enc" => m.d_enc.to_string(),
            "model.enc_depth" => m.enc_depth.to_string(),
            "model.dec_width" => m.dec_width.to_string(),
            "model.dec_depth" => m.dec_depth.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.ffn_mult" => m.ffn_mult.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.scheduler_factor" => t.scheduler_factor.to_string(),
            "train.scheduler_patience" => t.scheduler_patience.to_string(),
            "train.early_stop_patience" => t.early_stop_patience.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.mask_ratio_min" => t.mask_ratio_range.0.to_string(),
            "train.mask_ratio_max" => t.mask_ratio_range.1.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.mode" => t.mode.to_string(),
            "loss.lambda" => self.loss.lambda.to_string(),
            "loss.tau" => self.loss.tau.to_string(),
            "augment.warp_step_std" => self.augment.warp_step_std.to_string(),
            "augment.noise_std" => self.augment.noise_std.to_string(),
            "data.train_fraction" => self.split.train.to_string(),
            "data.valid_fraction" => self.split.valid.to_string(),
            "data.test_fraction" => self.split.test.to_string(),
            "data.split_seed" => self.split_seed.to_string(),
            _ => unreachable!("listed key"),
        }
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }
}
