//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{Ablation, ClientConfig, Method, ZetaMode};
use crate::data::{PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::linalg::SvdMode;
use crate::model::{ModelSpec, TrainConfig};

/// Where the samples come from. CSV data is standardized after loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        samples: usize,
        #[serde(default = "default_separation")]
        class_separation: f64,
    },
    Csv {
        path: PathBuf,
    },
}

fn default_separation() -> f64 {
    3.0
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            samples: 1000,
            class_separation: default_separation(),
        }
    }
}

/// A complete experiment description. Every field except `num_clients`,
/// `rounds` and `model` has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    pub num_clients: usize,
    pub rounds: usize,
    #[serde(default = "default_fraction")]
    pub participation_fraction: f64,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Constant for IID partitions and decay otherwise when left out.
    #[serde(default)]
    pub zeta_mode: Option<ZetaMode>,
    #[serde(default = "default_calib")]
    pub calib_batch_size: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "PartitionSpec::iid")]
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSource,
    /// Size of the global test set: a held-out share of CSV data, or extra
    /// samples relative to `samples` for synthetic data.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub svd_mode: SvdMode,
    /// Record full intermediate matrices and check the discrepancy identity.
    #[serde(default)]
    pub verification: bool,
}

fn default_method() -> Method {
    Method::FedSmooth
}
fn default_fraction() -> f64 {
    1.0
}
fn default_rank() -> usize {
    2
}
fn default_alpha() -> f64 {
    4.0
}
fn default_gamma() -> f64 {
    256.0
}
fn default_calib() -> usize {
    8
}
fn default_test_fraction() -> f64 {
    0.2
}

impl RunConfig {
    /// Defaults everywhere, for programmatic use.
    pub fn new(model: ModelSpec, num_clients: usize, rounds: usize) -> Self {
        RunConfig {
            method: default_method(),
            num_clients,
            rounds,
            participation_fraction: default_fraction(),
            rank: default_rank(),
            alpha: default_alpha(),
            gamma: default_gamma(),
            zeta_mode: None,
            calib_batch_size: default_calib(),
            train: TrainConfig::default(),
            partition: PartitionSpec::iid(),
            model,
            data: DataSource::default(),
            test_fraction: default_test_fraction(),
            seed: 0,
            svd_mode: SvdMode::Exact,
            verification: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative CSV paths resolve against
    /// the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let DataSource::Csv { path: csv } = &mut cfg.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        self.train.validate()?;
        self.partition.validate()?;
        if self.num_clients == 0 {
            return bad("num_clients must be >= 1".into());
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return bad(format!(
                "participation_fraction must lie in (0, 1], got {}",
                self.participation_fraction
            ));
        }
        let max_rank = self
            .model
            .layer_shapes()
            .iter()
            .map(|&(m, n)| m.min(n))
            .min()
            .unwrap_or(0);
        if self.rank == 0 || self.rank > max_rank {
            return bad(format!(
                "rank must lie in [1, {max_rank}] for this model, got {}",
                self.rank
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if self.calib_batch_size == 0 {
            return bad("calib_batch_size must be >= 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        match &self.data {
            DataSource::Synthetic {
                samples,
                class_separation,
            } => {
                if !class_separation.is_finite() {
                    return bad("class_separation must be finite".into());
                }
                if *samples < self.num_clients {
                    return bad(format!("{samples} samples cannot cover {} clients", self.num_clients));
                }
                if (*samples as f64 * self.test_fraction).round() < 1.0 {
                    return bad(format!("test_fraction {} leaves an empty test set", self.test_fraction));
                }
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }

    /// `zeta_mode`, or its partition-dependent default.
    pub fn effective_zeta_mode(&self) -> ZetaMode {
        self.zeta_mode.unwrap_or(match self.partition.kind {
            PartitionKind::Iid => ZetaMode::Constant,
            PartitionKind::Dirichlet => ZetaMode::Decay,
        })
    }

    /// Copy with every default written out.
    pub fn resolved(&self) -> RunConfig {
        RunConfig {
            zeta_mode: Some(self.effective_zeta_mode()),
            ..self.clone()
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `ceil(fraction * K)`, at least one.
    pub fn participants_per_round(&self) -> usize {
        ((self.participation_fraction * self.num_clients as f64).ceil() as usize).clamp(1, self.num_clients)
    }

    pub fn with_method(&self, method: Method) -> RunConfig {
        RunConfig { method, ..self.clone() }
    }

    pub fn client_config(&self) -> ClientConfig {
        let ablation: Ablation = self.method.ablation();
        ClientConfig {
            spec: self.model,
            rank: self.rank,
            alpha: self.alpha,
            gamma: self.gamma,
            zeta_mode: self.effective_zeta_mode(),
            total_rounds: self.rounds,
            calib_batch_size: self.calib_batch_size,
            train: self.train,
            svd_mode: self.svd_mode,
            seed: self.seed,
            ablation,
        }
    }
}
