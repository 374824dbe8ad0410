//! Run configuration: a TOML document layered over the preset of its
//! `scale`, with dotted `key=value` overrides on top. Unknown keys are
//! rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{FrequencyConfig, Scale, TimeConfig};
use crate::data::{AugmentConfig, ClipConfig};
use crate::dct::channels_for_lambda;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::head::HeadConfig;
use crate::nn::BatchNormConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Filled from the dataset's class list when training.
    pub num_classes: Option<usize>,
    /// Without the frequency branch the model is the time-only ablation.
    pub use_frequency: bool,
    /// Fraction of the 64 DCT coefficients kept per color component.
    pub dct_lambda: f64,
    /// Explicit per-component channel count; overrides `dct_lambda`.
    pub dct_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: None,
            use_frequency: true,
            dct_lambda: 0.25,
            dct_channels: None,
        }
    }
}

impl ModelConfig {
    pub fn dct_per_component(&self) -> Result<usize> {
        match self.dct_channels {
            Some(c) if (1..=64).contains(&c) => Ok(c),
            Some(c) => Err(Error::config(format!("model.dct_channels {c} outside 1..=64"))),
            None => channels_for_lambda(self.dct_lambda).map_err(|e| Error::config(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub initial_lr: f64,
    /// Iterations between learning-rate halvings.
    pub halving_interval: usize,
    pub epochs: usize,
    /// Stops early once this many iterations have run.
    pub max_iterations: Option<usize>,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            momentum: 0.9,
            initial_lr: 1e-4,
            halving_interval: 10_000,
            epochs: 25,
            max_iterations: None,
            clip_grad_norm: Some(10.0),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.halving_interval == 0 {
            return Err(Error::config("train batch_size, epochs and halving_interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum must be in [0, 1)"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("train.initial_lr must be positive"));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.clip_grad_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_split: String,
    pub eval_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_split: "train".into(),
            eval_split: "train".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub model: ModelConfig,
    pub clip: ClipConfig,
    pub frequency: FrequencyConfig,
    pub time: TimeConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub batchnorm: BatchNormConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Scale::Micro)
    }
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let (clip, frequency, time) = match scale {
            Scale::Full => (ClipConfig::default(), FrequencyConfig::full(), TimeConfig::full()),
            Scale::Micro => (
                ClipConfig {
                    clip_depth: 4,
                    frame_size: 64,
                    keyframe_size: 128,
                    ..ClipConfig::default()
                },
                FrequencyConfig::micro(),
                TimeConfig::micro(),
            ),
        };
        RunConfig {
            scale,
            seed: 0,
            model: ModelConfig::default(),
            clip,
            frequency,
            time,
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            batchnorm: BatchNormConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Parses `text` over the preset named by its `scale` key (micro when
    /// absent), then applies `overrides` (`a.b=value`, value in TOML syntax
    /// or a bare string).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let scale = match user.get("scale") {
            None => Scale::Micro,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::config(format!("scale: {e}")))?,
        };
        let mut base = toml::Table::try_from(RunConfig::preset(scale)).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        self.frequency.validate()?;
        self.time.validate(self.clip.clip_depth)?;
        self.head.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.model.dct_per_component()?;
        if self.model.num_classes == Some(0) {
            return Err(Error::config("model.num_classes must be positive"));
        }
        if self.clip.keyframe_size != 2 * self.clip.frame_size {
            return Err(Error::config(format!(
                "keyframe_size {} must be twice frame_size {} so both branches share a grid",
                self.clip.keyframe_size, self.clip.frame_size
            )));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    doc.parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
