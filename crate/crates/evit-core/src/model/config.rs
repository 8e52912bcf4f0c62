use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Everything needed to rebuild the network graph and its parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvitUnetConfig {
    /// Channel widths of the four stages; strictly increasing.
    pub stage_widths: [usize; 4],
    /// Blocks per stage (encoder; the decoder mirrors stages 1-3).
    pub stage_depths: [usize; 4],
    /// Attention heads for stage 3 and stage 4 (and their transitions).
    pub heads: [usize; 2],
    pub head_dim: usize,
    /// FFN expansion ratio.
    pub expansion: usize,
    pub num_classes: usize,
    /// Input extent; must be divisible by 32 (stem /4 plus three /2 steps).
    pub input_hw: (usize, usize),
    /// Multiply attention logits by 1/√d (off = the bias-only literal form).
    pub attn_scale: bool,
    /// Apply softmax(+bias) in the attention resamplers (off = raw (Q·Kᵀ)·V).
    pub resample_softmax: bool,
    pub seed: u64,
}

impl Default for EvitUnetConfig {
    fn default() -> Self {
        EvitUnetConfig {
            stage_widths: [40, 80, 192, 384],
            stage_depths: [5, 5, 15, 10],
            heads: [4, 8],
            head_dim: 32,
            expansion: 4,
            num_classes: 9,
            input_hw: (224, 224),
            attn_scale: true,
            resample_softmax: true,
            seed: 42,
        }
    }
}

impl EvitUnetConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.stage_widths;
        if !(w[0] < w[1] && w[1] < w[2] && w[2] < w[3]) {
            return Err(Error::ConfigError(format!(
                "stage_widths must be strictly increasing, got {w:?}"
            )));
        }
        if w[0] % 2 != 0 {
            return Err(Error::ConfigError(format!(
                "stage_widths[0] must be even (the stem uses half of it), got {}",
                w[0]
            )));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::ConfigError(format!(
                "stage_depths must all be >= 1, got {:?}",
                self.stage_depths
            )));
        }
        if self.heads.iter().any(|&h| h == 0) || self.head_dim == 0 {
            return Err(Error::ConfigError(
                "heads and head_dim must be >= 1".into(),
            ));
        }
        if self.expansion == 0 {
            return Err(Error::ConfigError("expansion must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::ConfigError(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let (h, w_) = self.input_hw;
        if h % 32 != 0 || w_ % 32 != 0 {
            return Err(Error::ConfigError(format!(
                "input_hw must be divisible by 32, got {h}x{w_}"
            )));
        }
        Ok(())
    }

    /// Spatial extent at stage s (1-based): input / 2^(s+1).
    pub fn stage_hw(&self, stage: usize) -> (usize, usize) {
        let div = 1usize << (stage + 1);
        (self.input_hw.0 / div, self.input_hw.1 / div)
    }

    /// Attention heads used at a stage (3 or 4) and its transitions.
    pub fn heads_for_stage(&self, stage: usize) -> usize {
        match stage {
            3 => self.heads[0],
            4 => self.heads[1],
            _ => 0,
        }
    }

    /// Canonical key=value rendering; the digest of this text identifies
    /// the architecture inside checkpoint files.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "attn_scale={}\nexpansion={}\nhead_dim={}\nheads={}\ninput_hw={}x{}\nnum_classes={}\nresample_softmax={}\nseed={}\nstage_depths={}\nstage_widths={}\n",
            self.attn_scale,
            self.expansion,
            self.head_dim,
            list(&self.heads),
            self.input_hw.0,
            self.input_hw.1,
            self.num_classes,
            self.resample_softmax,
            self.seed,
            list(&self.stage_depths),
            list(&self.stage_widths),
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_text().as_bytes());
        h.finalize().into()
    }

    /// Parse the canonical key=value text back into a config.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = EvitUnetConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigError(format!("line {}: expected key=value, got '{raw}'", lineno + 1))
            })?;
            cfg.apply_kv(key.trim(), value.trim(), lineno + 1)?;
        }
        Ok(cfg)
    }

    /// Set one field from its key=value form. Unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        let bad = |what: &str| {
            Error::ConfigError(format!("line {lineno}: invalid {what} value '{value}'"))
        };
        match key {
            "stage_widths" => self.stage_widths = parse_list4(value).ok_or_else(|| bad(key))?,
            "stage_depths" => self.stage_depths = parse_list4(value).ok_or_else(|| bad(key))?,
            "heads" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|s| s.trim().parse().ok())
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad(key))?;
                if v.len() != 2 {
                    return Err(bad(key));
                }
                self.heads = [v[0], v[1]];
            }
            "head_dim" => self.head_dim = value.parse().map_err(|_| bad(key))?,
            "expansion" => self.expansion = value.parse().map_err(|_| bad(key))?,
            "num_classes" => self.num_classes = value.parse().map_err(|_| bad(key))?,
            "input_hw" => {
                let (h, w) = value.split_once('x').ok_or_else(|| bad(key))?;
                self.input_hw = (
                    h.trim().parse().map_err(|_| bad(key))?,
                    w.trim().parse().map_err(|_| bad(key))?,
                );
            }
            "attn_scale" => self.attn_scale = value.parse().map_err(|_| bad(key))?,
            "resample_softmax" => self.resample_softmax = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            _ => {
                return Err(Error::ConfigError(format!(
                    "line {lineno}: unknown key '{key}'"
                )))
            }
        }
        Ok(())
    }

    /// True when `key` names one of this struct's fields.
    pub fn is_model_key(key: &str) -> bool {
        matches!(
            key,
            "stage_widths"
                | "stage_depths"
                | "heads"
                | "head_dim"
                | "expansion"
                | "num_classes"
                | "input_hw"
                | "attn_scale"
                | "resample_softmax"
                | "seed"
        )
    }
}

fn parse_list4(value: &str) -> Option<[usize; 4]> {
    let v: Vec<usize> = value
        .split(',')
        .map(|s| s.trim().parse().ok())
        .collect::<Option<_>>()?;
    if v.len() != 4 {
        return None;
    }
    Some([v[0], v[1], v[2], v[3]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        EvitUnetConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = EvitUnetConfig {
            input_hw: (100, 100),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::ConfigError(_))));
    }

    #[test]
    fn rejects_non_increasing_widths() {
        let cfg = EvitUnetConfig {
            stage_widths: [40, 40, 192, 384],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = EvitUnetConfig {
            stage_widths: [16, 32, 48, 64],
            num_classes: 3,
            input_hw: (64, 64),
            ..Default::default()
        };
        let parsed = EvitUnetConfig::from_text(&cfg.canonical_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.digest(), cfg.digest());
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(EvitUnetConfig::from_text("stage_widhts=1,2,3,4\n").is_err());
    }
}
