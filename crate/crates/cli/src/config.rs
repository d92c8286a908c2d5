use std::path::{Path, PathBuf};

use multits_core::data::synthetic::SyntheticConfig;
use multits_core::data::MissingScheme;
use multits_core::model::MultiTsConfig;
use multits_core::text::LmConfig;
use multits_core::train::{TrainConfig, DEFAULT_HORIZONS};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyKind {
    EdgeList,
    Distance,
}

/// Input data. Without `series`, a synthetic ring dataset is generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub series: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub adjacency_kind: AdjacencyKind,
    pub threshold_kappa: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            series: None,
            adjacency: None,
            adjacency_kind: AdjacencyKind::EdgeList,
            threshold_kappa: 0.1,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingConfig {
    pub schemes: Vec<MissingScheme>,
    pub rates: Vec<f64>,
    pub block_len: (usize, usize),
    pub mask_seed: u64,
}

impl Default for MissingConfig {
    fn default() -> Self {
        Self {
            schemes: vec![MissingScheme::Mcar, MissingScheme::Block],
            rates: vec![0.1, 0.3, 0.5],
            block_len: (12, 36),
            mask_seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split_ratios: (f64, f64, f64),
    pub model: MultiTsConfig,
    pub optimizer: TrainConfig,
    pub lm: LmConfig,
    /// Instruction pairs used to tune the trend LM.
    pub lm_pairs: usize,
    pub missing: MissingConfig,
    pub horizons: Vec<usize>,
    pub seed: u64,
    pub runs: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            split_ratios: (0.7, 0.1, 0.2),
            model: MultiTsConfig::default(),
            optimizer: TrainConfig::default(),
            lm: LmConfig::default(),
            lm_pairs: 200,
            missing: MissingConfig::default(),
            horizons: DEFAULT_HORIZONS.to_vec(),
            seed: 0,
            runs: 1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Parses JSON text; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config {
                key: if path == "." { "(root)".into() } else { path },
                msg: e.into_inner().to_string(),
            }
        })
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.series.as_mut().map(resolve);
        cfg.data.adjacency.as_mut().map(resolve);
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: String| Err(CliError::Config { key: key.into(), msg });
        self.model
            .validate()
            .or_else(|e| bad("model", e.to_string()))?;
        let (a, b, c) = self.split_ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad("split_ratios", "expected three positive ratios summing to 1".into());
        }
        if self.runs == 0 {
            return bad("runs", "expected an integer >= 1".into());
        }
        if self.optimizer.batch == 0 || self.optimizer.shards == 0 {
            return bad("optimizer", "batch and shards must be >= 1".into());
        }
        if let Some(r) = self.missing.rates.iter().find(|r| !(0.0..=0.95).contains(*r)) {
            return bad("missing.rates", format!("rate {r} outside [0, 0.95]"));
        }
        if self.horizons.iter().any(|&h| h == 0 || h > self.model.nu) {
            return bad("horizons", format!("each horizon must lie in 1..={}", self.model.nu));
        }
        if self.data.series.is_some() && self.data.adjacency.is_none() && self.model.use_graph && self.model.use_inter {
            return bad("data.adjacency", "a series file needs an adjacency file when model.use_graph is set".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
