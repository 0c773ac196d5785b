use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::metrics::{FeatureConfig, MetricConfig};
use crate::motion::SynthConfig;
use crate::prior::{PriorConfig, SamplerConfig, Stage2Config};
use crate::rqvae::{Stage1Config, VaeConfig};
use crate::tensor::AdamWConfig;

/// Every tunable of a run. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream: corpus, initialization, shuffling.
    pub seed: u64,
    pub corpus: SynthConfig,
    pub vae: VaeConfig,
    pub stage1: Stage1Config,
    pub prior: PriorConfig,
    pub stage2: Stage2Config,
    pub sampler: SamplerConfig,
    pub features: FeatureConfig,
    pub metrics: MetricConfig,
    pub paths: Paths,
}

/// Default locations used when a command is not given one explicitly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vae: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: SynthConfig::default(),
            vae: VaeConfig::default(),
            stage1: Stage1Config::default(),
            prior: PriorConfig::default(),
            stage2: Stage2Config::default(),
            sampler: SamplerConfig::default(),
            features: FeatureConfig::default(),
            metrics: MetricConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: cannot serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("override `{0}`: expected key=value")]
    Override(String),
    #[error("override `{key}`: `{part}` is not a table")]
    NotTable { key: String, part: String },
}

impl RunConfig {
    /// Sizes that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            corpus: SynthConfig {
                sequences: 12,
                ..SynthConfig::default()
            },
            vae: VaeConfig::desk(),
            stage1: Stage1Config {
                epochs: 30,
                batch_size: 16,
                optim: AdamWConfig {
                    lr: 2e-3,
                    ..AdamWConfig::default()
                },
            },
            prior: PriorConfig::desk(),
            stage2: Stage2Config {
                epochs: 20,
                batch_size: 16,
                optim: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
            },
            features: FeatureConfig::default(),
            ..Self::default()
        }
    }

    /// Layers `text` and then each `key=value` override onto `base`.
    pub fn resolve(base: &RunConfig, text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = toml::from_str(&toml::to_string(base)?)?;
        if let Some(t) = text {
            let file: Table = toml::from_str(t)?;
            merge(&mut table, file);
        }
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Ok(Table::try_into(table)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => {
                return Err(ConfigError::NotTable {
                    key: key.into(),
                    part: part.to_string(),
                })
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = RunConfig::default();
        assert_eq!(c.vae.quantizer.codebook_size, 256);
        assert_eq!(c.vae.autoencoder.reduction, 4);
        assert_eq!(c.stage1.epochs, 500);
        assert_eq!(c.stage1.batch_size, 128);
        assert_eq!(c.stage1.optim.lr, 5e-4);
        assert_eq!(c.stage2.epochs, 1000);
        assert_eq!(c.sampler.top_k, 10);
    }

    #[test]
    fn file_then_overrides() {
        let text = "seed = 7\n[stage1]\nepochs = 3\n[vae.quantizer]\ndepth = 2\n";
        let c = RunConfig::resolve(
            &RunConfig::desk(),
            Some(text),
            &["stage1.optim.lr=0.01".into(), "sampler.top_k = 1".into(), "paths.vae=out/v.gtkc".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.stage1.epochs, 3);
        assert_eq!(c.stage1.batch_size, 16);
        assert_eq!(c.stage1.optim.lr, 0.01);
        assert_eq!(c.vae.quantizer.depth, 2);
        assert_eq!(c.sampler.top_k, 1);
        assert_eq!(c.paths.vae, Some(PathBuf::from("out/v.gtkc")));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(&RunConfig::default(), Some("colour = 1\n"), &[]).is_err());
        assert!(RunConfig::resolve(&RunConfig::default(), Some("[stage1]\nepoch = 1\n"), &[]).is_err());
        assert!(RunConfig::resolve(&RunConfig::default(), None, &["vae.quantizer.levels=2".into()]).is_err());
        assert!(RunConfig::resolve(&RunConfig::default(), None, &["seed".into()]).is_err());
        assert!(RunConfig::resolve(&RunConfig::default(), None, &["seed.x=1".into()]).is_err());
    }
}
