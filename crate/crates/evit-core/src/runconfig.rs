//! Flat key=value run configuration: the model fields plus training and
//! dataset keys. Unknown keys are hard errors; every key has a default, and
//! the resolved snapshot always carries the full set.

use crate::error::{Error, Result};
use crate::model::EvitUnetConfig;
use crate::train::TrainOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: EvitUnetConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dataset_size: usize,
    pub dataset_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: EvitUnetConfig::default(),
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            ce_weight: 0.5,
            dice_weight: 0.5,
            dataset_size: 256,
            dataset_seed: 1234,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = lineno + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigError(format!("line {lineno}: expected key=value, got '{raw}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if EvitUnetConfig::is_model_key(key) {
                cfg.model.apply_kv(key, value, lineno)?;
                continue;
            }
            let bad =
                || Error::ConfigError(format!("line {lineno}: invalid {key} value '{value}'"));
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "momentum" => cfg.momentum = value.parse().map_err(|_| bad())?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad())?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
                "ce_weight" => cfg.ce_weight = value.parse().map_err(|_| bad())?,
                "dice_weight" => cfg.dice_weight = value.parse().map_err(|_| bad())?,
                "dataset_size" => cfg.dataset_size = value.parse().map_err(|_| bad())?,
                "dataset_seed" => cfg.dataset_seed = value.parse().map_err(|_| bad())?,
                _ => {
                    return Err(Error::ConfigError(format!(
                        "line {lineno}: unknown key '{key}'"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::ConfigError("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::ConfigError("epochs must be >= 1".into()));
        }
        if self.dataset_size < 2 {
            return Err(Error::ConfigError("dataset_size must be >= 2".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::ConfigError(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            ce_weight: self.ce_weight,
            dice_weight: self.dice_weight,
            seed: self.model.seed,
        }
    }

    /// Every key with its effective value, sorted, one per line.
    pub fn resolved_text(&self) -> String {
        let mut lines: Vec<String> = self
            .model
            .canonical_text()
            .lines()
            .map(str::to_string)
            .collect();
        lines.push(format!("batch_size={}", self.batch_size));
        lines.push(format!("ce_weight={}", self.ce_weight));
        lines.push(format!("dataset_seed={}", self.dataset_seed));
        lines.push(format!("dataset_size={}", self.dataset_size));
        lines.push(format!("dice_weight={}", self.dice_weight));
        lines.push(format!("epochs={}", self.epochs));
        lines.push(format!("lr={}", self.lr));
        lines.push(format!("momentum={}", self.momentum));
        lines.push(format!("weight_decay={}", self.weight_decay));
        lines.sort();
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.resolved_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("lr=0.1\nlearning_rate=0.2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn missing_keys_use_defaults() {
        let cfg = RunConfig::parse("epochs=3\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
        assert!(cfg.resolved_text().contains("batch_size=8"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nlr=0.01\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
    }
}
