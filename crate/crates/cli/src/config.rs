use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsenas::bilevel::SearchConfig;
use sparsenas::supernet::CellSpec;
use sparsenas::tasks::{gen_synthetic, load_csv, Dataset, NasConfig, PruningConfig, RetrainConfig, SyntheticConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// CSV file for `source = "csv"`.
    pub path: Option<PathBuf>,
    /// Class count for CSV data; inferred from the labels when unset.
    pub classes: Option<usize>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            path: None,
            classes: None,
            train_fraction: 0.6,
            val_fraction: 0.2,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeriveSection {
    /// Prune weights with magnitude at or below this value. Unset prunes
    /// bitwise zeros only.
    pub threshold: Option<f64>,
}

/// Everything one invocation needs. Every key is optional; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub cell: CellSpec,
    pub search: SearchConfig,
    pub derive: DeriveSection,
    pub retrain: RetrainConfig,
    pub prune: PruningConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            cell: CellSpec::default(),
            search: SearchConfig::default(),
            derive: DeriveSection::default(),
            retrain: RetrainConfig::default(),
            prune: PruningConfig::default(),
        }
    }
}

impl RunConfig {
    #[cfg(test)]
    fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The snapshot written next to every run's outputs. Loading it back
    /// gives the same configuration.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Internal(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        if d.source == DataSource::Csv && d.path.is_none() {
            return Err(CliError::Config("data.path is required when data.source = \"csv\"".into()));
        }
        if !(d.train_fraction > 0.0 && d.val_fraction >= 0.0 && d.train_fraction + d.val_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "data.train_fraction ({}) and data.val_fraction ({}) must leave a non-empty test split",
                d.train_fraction, d.val_fraction
            )));
        }
        self.nas().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pruning().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn nas(&self) -> NasConfig {
        NasConfig {
            cell: self.cell.clone(),
            search: self.search.clone(),
            retrain: self.retrain.clone(),
            threshold: self.derive.threshold,
            train_fraction: self.data.train_fraction,
            val_fraction: self.data.val_fraction,
            seed: self.seed,
        }
    }

    pub fn pruning(&self) -> PruningConfig {
        PruningConfig {
            train_fraction: self.data.train_fraction,
            val_fraction: self.data.val_fraction,
            seed: self.seed,
            ..self.prune.clone()
        }
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let data = match self.data.source {
            DataSource::Synthetic => gen_synthetic(&self.data.synthetic),
            DataSource::Csv => load_csv(self.data.path.as_deref().expect("validated"), self.data.classes),
        };
        data.map_err(|e| CliError::Config(format!("[data] {e}")))
    }
}
