//! Run configuration loaded from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FilterConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::optim::AdamWConfig;
use crate::par::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Weights of the static, dynamic and recommendation losses.
    pub betas: [f64; 3],
    pub transe_batch_size: usize,
    pub transe_optimizer: AdamWConfig,
    /// Write a checkpoint every this many epochs (0 writes only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            epochs: 1000,
            patience: 8,
            betas: [1.0, 1.0, 1.0],
            transe_batch_size: 256,
            transe_optimizer: AdamWConfig::default(),
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_p: f64,
    /// Sampling seeds; reports carry each seed's metrics and their mean.
    pub seeds: Vec<u64>,
    /// Forbid repeated intermediate POIs.
    pub dedup: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            seeds: vec![0, 1, 2],
            dedup: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Processed dataset directory.
    pub dataset: Option<PathBuf>,
    pub checkins: Option<PathBuf>,
    pub kg: Option<PathBuf>,
    pub filter: FilterConfig,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub execution: Execution,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            execution: Execution::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.transe_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if t.betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config("betas must be non-negative".into()));
        }
        for o in [&t.optimizer, &t.transe_optimizer] {
            if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0)
                || !(0.0..1.0).contains(&o.beta1)
                || !(0.0..1.0).contains(&o.beta2)
            {
                return Err(Error::Config("invalid optimizer settings".into()));
            }
        }
        if !(self.eval.top_p > 0.0 && self.eval.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p must lie in (0, 1], got {}",
                self.eval.top_p
            )));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("at least one evaluation seed is required".into()));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }

    /// SHA-256 over everything that shapes training results. Data paths and
    /// the execution mode are excluded.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seed: u64,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            eval: &'a EvalConfig,
            filter: &'a FilterConfig,
            split_seed: u64,
        }
        let h = Hashed {
            seed: self.seed,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
            filter: &self.data.filter,
            split_seed: self.data.split_seed,
        };
        let json = serde_json::to_vec(&h).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.train.optimizer.lr, 1e-3);
        assert_eq!(c.train.optimizer.weight_decay, 1e-5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.epochs, 1000);
        assert_eq!(c.train.patience, 8);
        assert_eq!(c.train.betas, [1.0, 1.0, 1.0]);
        assert_eq!(c.model.dynamic.sigma, 0.6);
        assert_eq!(c.model.dynamic.solver.rtol, 1e-5);
        assert_eq!(c.model.dynamic.solver.atol, 1e-5);
        assert_eq!(c.eval.top_p, 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let partial = RunConfig::from_toml_str("seed = 5\n[model]\ndim = 16\nvariant = \"wo_OD\"\n").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.model.dim, 16);
        assert_eq!(partial.model.variant, Variant::WoOd);
        assert_eq!(partial.train.batch_size, 32);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[model.dynamic]\nsigma = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("[model.dynamic]\nsigma = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[eval]\ntop_p = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nvariant = \"wo_XX\"\n").is_err());
        assert!(RunConfig::from_toml_str("unknown_key = 1\n").is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_hyperparameters() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.data.dataset = Some("/elsewhere".into());
        b.execution = Execution::Sequential;
        assert_eq!(a.hash(), b.hash());
        b.train.optimizer.lr = 2e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
