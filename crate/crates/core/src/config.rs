//! Run configuration: one TOML document with a section per subsystem.
//! Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small widths and a short schedule that train in minutes on one core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.generator.encoder_channels = vec![16, 32, 64, 64, 64];
        cfg.discriminator.stem_channels = 16;
        cfg.discriminator.block_channels = vec![16, 32, 64, 64];
        cfg.train.iterations = 2000;
        cfg.train.checkpoint_interval = 500;
        cfg.train.lr = 2e-4;
        cfg.eval.n_per_class = 128;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.generator.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.discriminator.leaky_slope != self.generator.leaky_slope {
            log::debug!("generator and discriminator use different leaky slopes");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)?;
        apply_overrides(&mut value, overrides)?;
        let cfg: RunConfig = value.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `path = None` starts from [`RunConfig::default`].
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => Self::default().to_toml()?,
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&self.to_toml()?, overrides)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `dotted.key=value` overrides. Values are parsed as TOML literals,
/// falling back to a bare string.
pub fn apply_overrides(root: &mut toml::Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let mut node = &mut *root;
        for part in &path[..path.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?;
        table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Variant;
    use crate::wavelet::{Band, BandMask};

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.iterations, 100_000);
        assert_eq!(cfg.train.batch_episodes, 8);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.loss, LossWeights::default());
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "generator.variant=mean".into(),
                "train.iterations=10".into(),
                "train.decay_start_iteration=5".into(),
                r#"generator.hf_band_mask=["hh"]"#.into(),
                "loss.lambda_fre=0".into(),
            ])
            .unwrap();
        assert_eq!(cfg.generator.variant, Variant::Mean);
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.train.decay_start_iteration, Some(5));
        assert_eq!(cfg.generator.hf_band_mask, BandMask::from_bands(&[Band::HH]));
        assert_eq!(cfg.loss.lambda_fre, 0.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::default().with_overrides(&["train.bogus=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["nosuch.section=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.iterations".into()]).is_err());
        assert!(RunConfig::from_toml_str("version = 1\nextra = 2\n", &[]).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\niterations = 42\n", &[]).unwrap();
        assert_eq!(cfg.train.iterations, 42);
        assert_eq!(cfg.generator, GeneratorConfig::default());
    }
}
