//! Run configuration files: `key = value` TOML with `[model]`, `[selector]`,
//! `[train]` and `[data]` sections plus a top-level `variant`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Variant;
use crate::selector::SelectorConfig;
use crate::trainer::TrainConfig;
use crate::transformer::TransformerConfig;
use crate::video_io::FramePattern;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Frame path pattern such as `frames/%04d.png`.
    pub clip: String,
    /// Inclusive frame-index range used for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_range: Option<(usize, usize)>,
    /// Inclusive frame-index range held out for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_range: Option<(usize, usize)>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_variant() -> Variant {
    Variant::M2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub model: TransformerConfig,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment inside `[section]`.
fn key_line(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section && t.split('=').next().map(str::trim) == Some(key) {
            return i + 1;
        }
    }
    1
}

impl RunConfig {
    /// Parses and validates a config. Every failure carries a line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        let table: toml::Table = toml::from_str(text).expect("already parsed");
        let explicit_mu = table
            .get("train")
            .and_then(|t| t.get("mu_motion"))
            .and_then(toml::Value::as_float);
        let explicit_enabled = table
            .get("selector")
            .and_then(|t| t.get("enabled"))
            .and_then(toml::Value::as_bool);
        cfg.apply_variant(explicit_mu, explicit_enabled).map_err(|msg| Error::Config {
            line: key_line(text, "", "variant"),
            msg,
        })?;
        cfg.validate().map_err(|e| Error::Config {
            line: 1,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets the selector switch and motion weight implied by the variant.
    fn apply_variant(&mut self, explicit_mu: Option<f64>, explicit_enabled: Option<bool>) -> std::result::Result<(), String> {
        let (enabled, forced_mu) = match self.variant {
            Variant::B0 => return Err("variant B0 needs no training; use B1, M1 or M2".into()),
            Variant::B1 => (false, Some(0.0)),
            Variant::M1 => (true, Some(0.0)),
            Variant::M2 => (true, None),
        };
        if explicit_enabled.is_some_and(|e| e != enabled) {
            return Err(format!("selector.enabled contradicts variant {}", self.variant));
        }
        if let (Some(f), Some(m)) = (forced_mu, explicit_mu) {
            if f != m {
                return Err(format!("train.mu_motion = {m} contradicts variant {} (needs {f})", self.variant));
            }
        }
        self.selector.enabled = enabled;
        if let Some(f) = forced_mu {
            self.train.mu_motion = f;
        }
        Ok(())
    }

    /// Checks everything that does not touch the file system.
    pub fn validate(&self) -> Result<()> {
        for w in self.model.validate()? {
            log::warn!("{w}");
        }
        self.selector.validate(&self.model)?;
        self.train.validate()?;
        FramePattern::parse(&self.data.clip)?;
        for (name, r) in [("train_range", self.data.train_range), ("eval_range", self.data.eval_range)] {
            if let Some((a, b)) = r {
                if a > b {
                    return Err(Error::arg(format!("data.{name} = [{a}, {b}] is empty")));
                }
            }
        }
        Ok(())
    }

    /// Errors unless the clip pattern matches at least one file.
    pub fn check_paths(&self) -> Result<()> {
        let found = FramePattern::parse(&self.data.clip)?.scan()?;
        if found.is_empty() {
            return Err(Error::NotFound(format!("no frames match `{}`", self.data.clip)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Configurations for five reference clips.
    /// Only the architecture and split are meaningful; the clip paths are
    /// placeholders.
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let (n, l, h, w, delta, t_train, mu, eval) = match key.as_str() {
            "bird" => (50, 12, 256, 256, 4, 50, 10.0, (50, 79)),
            "garden" => (80, 10, 100, 320, 3, 30, 10.0, (30, 56)),
            "ocean" => (50, 12, 200, 200, 3, 20, 1.0, (20, 49)),
            "juggler" => (50, 14, 340, 300, 3, 30, 10.0, (30, 59)),
            "cat" => (30, 10, 105, 320, 3, 24, 10.0, (24, 31)),
            _ => {
                return Err(Error::arg(format!(
                    "unknown preset `{name}` (bird, garden, ocean, juggler, cat)"
                )))
            }
        };
        Ok(RunConfig {
            variant: Variant::M2,
            model: TransformerConfig::new(n, l, delta, 3, h, w),
            selector: SelectorConfig::default(),
            train: TrainConfig {
                mu_motion: mu,
                ..TrainConfig::default()
            },
            data: DataConfig {
                clip: format!("data/{key}/%04d.png"),
                train_range: Some((0, t_train - 1)),
                eval_range: Some(eval),
                output_dir: PathBuf::from(format!("runs/{key}")),
            },
        })
    }
}
