//! Layered run configuration: defaults, then the config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use caibc::branches::{Branch, FusionWeights};
use caibc::data::{SplitMode, SynthSpec};
use caibc::losses::Supervision;
use caibc::trainer::TrainConfig;
use caibc::{Error, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

/// Where training and test records come from. Paths are relative to the
/// config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading manifests.
    pub synth: Option<SynthSpec>,
    pub split: Option<SplitMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SupervisionArg {
    Full,
    Weak,
}

/// Flags that override config file values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Layered TOML config (training fields at top level, optional [data] table).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of rgb,grs,clr.
    #[arg(long, value_delimiter = ',')]
    pub branches: Option<Vec<Branch>>,
    #[arg(long, value_enum)]
    pub ml_loss: Option<Toggle>,
    #[arg(long, value_enum)]
    pub color_prior: Option<Toggle>,
    #[arg(long, value_enum)]
    pub supervision: Option<SupervisionArg>,
    /// Five weights: global rgb, local rgb, global grs, local grs, clr.
    #[arg(long)]
    pub fusion_weights: Option<String>,
    #[arg(long, value_enum)]
    pub detach_grs: Option<Toggle>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn resolve(base: Option<&Path>, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    })
}

impl RunConfig {
    pub fn from_toml(text: &str, dir: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let data: DataSection = match table.remove("data") {
            Some(v) => v.try_into().map_err(|e| Error::Config(format!("[data]: {e}")))?,
            None => DataSection::default(),
        };
        let train: TrainConfig = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        let data = DataSection {
            train: resolve(dir, data.train),
            test: resolve(dir, data.test),
            ..data
        };
        Ok(Self { train, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    /// Defaults, then `--config`, then the remaining flags.
    pub fn layered(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        o.apply(&mut cfg.train)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.train).map_err(|e| Error::Config(e.to_string()))?;
        let data = toml::Table::try_from(&self.data).map_err(|e| Error::Config(e.to_string()))?;
        if !data.is_empty() {
            table.insert("data".into(), toml::Value::Table(data));
        }
        toml::to_string_pretty(&table).map_err(|e| Error::Config(e.to_string()))
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        let br = &mut cfg.model.branches;
        if let Some(list) = &self.branches {
            br.rgb = list.contains(&Branch::Rgb);
            br.grs = list.contains(&Branch::Grs);
            br.clr = list.contains(&Branch::Clr);
            br.color_prior &= br.clr;
        }
        if let Some(t) = self.color_prior {
            br.color_prior = t.on();
        }
        if let Some(t) = self.detach_grs {
            br.detach_grs = t.on();
        }
        if let Some(w) = &self.fusion_weights {
            br.fusion = FusionWeights::parse(w)?;
        }
        if let Some(t) = self.ml_loss {
            if !t.on() {
                cfg.loss.mutual_learning = 0.0;
            } else if cfg.loss.mutual_learning == 0.0 {
                cfg.loss.mutual_learning = 1.0;
            }
        }
        if let Some(s) = self.supervision {
            cfg.supervision = match s {
                SupervisionArg::Full => Supervision::Full,
                SupervisionArg::Weak => Supervision::Weak,
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let text = "seed = 3\nepochs = 2\n[loss]\nmutual_learning = 0.5\n[data]\ntrain = \"d/train.jsonl\"\n";
        let mut cfg = RunConfig::from_toml(text, Some(Path::new("/cfg"))).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.data.train, Some(PathBuf::from("/cfg/d/train.jsonl")));
        let o = Overrides {
            seed: Some(9),
            branches: Some(vec![Branch::Rgb, Branch::Grs]),
            ml_loss: Some(Toggle::Off),
            supervision: Some(SupervisionArg::Weak),
            fusion_weights: Some("1,1,0.5,0.5,0".into()),
            ..Overrides::default()
        };
        o.apply(&mut cfg.train).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 2);
        assert!(!cfg.train.model.branches.clr && !cfg.train.model.branches.color_prior);
        assert_eq!(cfg.train.loss.mutual_learning, 0.0);
        assert_eq!(cfg.train.supervision, Supervision::Weak);
        assert_eq!(cfg.train.model.branches.fusion.global_grs, 0.5);

        let echoed = RunConfig::from_toml(&cfg.to_toml().unwrap(), None).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_toml("epochz = 3", None).is_err());
        assert!(RunConfig::from_toml("[data]\nmanifest = \"x\"", None).is_err());
    }
}
