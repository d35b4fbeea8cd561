use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anatomy::Structure;
use crate::data::{default_synthetic_specs, SyntheticCenterSpec, DEFAULT_SPLIT_FRACTION};
use crate::error::{Error, Result};
use crate::models::{ArchConfig, ModelKind, Setting, TrainConfig};

/// Artificial label removal experiments. Exp1/Exp2 drop lungs/heart from the
/// center annotated with every structure, Exp3/Exp4 drop them from the
/// lungs+heart center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Removal {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
}

/// Which kind of center a removal experiment edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalTarget {
    AllStructures,
    LungsHeart,
}

impl Removal {
    pub const ALL: [Removal; 4] = [Removal::Exp1, Removal::Exp2, Removal::Exp3, Removal::Exp4];

    pub fn name(self) -> &'static str {
        match self {
            Removal::Exp1 => "Exp1",
            Removal::Exp2 => "Exp2",
            Removal::Exp3 => "Exp3",
            Removal::Exp4 => "Exp4",
        }
    }

    pub fn structure(self) -> Structure {
        match self {
            Removal::Exp1 | Removal::Exp3 => Structure::Lungs,
            Removal::Exp2 | Removal::Exp4 => Structure::Heart,
        }
    }

    pub fn target(self) -> RemovalTarget {
        match self {
            Removal::Exp1 | Removal::Exp2 => RemovalTarget::AllStructures,
            Removal::Exp3 | Removal::Exp4 => RemovalTarget::LungsHeart,
        }
    }
}

impl fmt::Display for Removal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Removal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace([' ', '_'], "");
        Removal::ALL
            .into_iter()
            .find(|r| r.name().to_ascii_lowercase() == t)
            .ok_or_else(|| Error::Config(format!("unknown removal experiment {s:?} (Exp1..Exp4)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Manifest {
        path: PathBuf,
    },
    /// Empty `centers` means the default three-center corpus.
    Synthetic {
        #[serde(default)]
        centers: Vec<SyntheticCenterSpec>,
    },
}

fn default_split_fraction() -> f64 {
    DEFAULT_SPLIT_FRACTION
}

fn default_true() -> bool {
    true
}

/// One training + evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub setting: Setting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removal: Option<Removal>,
    /// Seeds weight init, the data split, sampling and synthetic data.
    /// Overrides `train.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dtype: Dtype,
    /// Train/val share of each center; the rest is the test split.
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default = "default_true")]
    pub overlays: bool,
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub arch: ArchConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.removal {
            if !self.setting.is_full() {
                return Err(Error::Config(format!("{r} requires a Full setting, got {}", self.setting)));
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} outside (0, 1)", self.split_fraction)));
        }
        self.train.validate()
    }

    /// Every default written out, so the snapshot alone reproduces the run.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut out = self.clone();
        let seed = self.seed();
        out.seed = Some(seed);
        out.train.seed = seed;
        if let DataSource::Synthetic { centers } = &mut out.data {
            if centers.is_empty() {
                *centers = default_synthetic_specs(seed);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
model = "unet_ht"
setting = "LHC_full"
output_dir = "out"
[data]
source = "synthetic"
"#;

    #[test]
    fn defaults_are_materialized() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let r = c.resolved().unwrap();
        let text = r.to_toml().unwrap();
        for key in ["epochs", "lr", "selection", "unet_channels", "split_fraction", "noise_sigma", "seed"] {
            assert!(text.contains(key), "{key} missing from snapshot");
        }
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolved().unwrap(), r);
    }

    #[test]
    fn removal_needs_full_setting() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.removal = Some(Removal::Exp2);
        assert!(c.validate().is_ok());
        c.setting = Setting::LhcStrict;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn bad_config_is_a_config_error() {
        assert_eq!(ExperimentConfig::from_toml_str("model = 3").unwrap_err().exit_code(), 2);
        let e = ExperimentConfig::from_toml_str(&MINIMAL.replace("unet_ht", "vnet")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert_eq!("exp3".parse::<Removal>().unwrap(), Removal::Exp3);
        assert!("Exp5".parse::<Removal>().is_err());
    }
}
