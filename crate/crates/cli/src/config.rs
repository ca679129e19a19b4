use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use unlearn_core::eval::AttackSpec;
use unlearn_core::lm::{LmConfig, Vocab};
use unlearn_core::{CoreError, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "UNLEARN_LAB_CONFIG";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            context_len: 16,
            embed_dim: 32,
            hidden_dim: 64,
            seed: 7,
        }
    }
}

impl ModelSection {
    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            vocab_size: Vocab::standard().size(),
            context_len: self.context_len,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop once held-out utility reaches this level.
    pub target_utility: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 2e-3,
            batch_size: 32,
            target_utility: 0.9,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemorizeSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gate: f64,
    pub seed: u64,
}

impl Default for MemorizeSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            gate: 0.9,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub top_p: f64,
    pub alpha: f64,
    pub loss: String,
    pub flat_sign: String,
    /// Per-method learning rates; a value outside the selection grid is an
    /// explicit override and is recorded as such in the run manifest.
    pub lr_ga: f64,
    pub lr_dpo: f64,
    pub lr_npo: f64,
    pub lr_flat: f64,
    pub lr_prod: f64,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            beta: 0.1,
            top_p: 0.8,
            alpha: 0.0,
            loss: "ce".into(),
            flat_sign: "variational-standard".into(),
            lr_ga: 1e-3,
            lr_dpo: 3e-3,
            lr_npo: 3e-3,
            lr_flat: 3e-3,
            lr_prod: 3e-3,
        }
    }
}

impl UnlearnSection {
    pub fn lr_for(&self, method: unlearn_core::trainers::Method) -> f64 {
        use unlearn_core::trainers::Method;
        match method {
            Method::Ga => self.lr_ga,
            Method::Dpo => self.lr_dpo,
            Method::Npo => self.lr_npo,
            Method::Flat => self.lr_flat,
            Method::Prod => self.lr_prod,
        }
    }
}

/// Whole-experiment configuration: one JSON document; each CLI flag
/// overrides the matching field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub report_dir: PathBuf,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub memorize: MemorizeSection,
    pub unlearn: UnlearnSection,
    pub attack: AttackSpec,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            ckpt_dir: PathBuf::from("ckpt"),
            report_dir: PathBuf::from("reports"),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            memorize: MemorizeSection::default(),
            unlearn: UnlearnSection::default(),
            attack: AttackSpec::default(),
            seeds: vec![11, 12, 13, 14, 15],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CoreError::Config("seeds must be distinct".into()));
        }
        self.attack.validate()?;
        self.model.lm_config().validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Explicit path, else the environment default, else built-in defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(path) = explicit {
            return Self::load(path);
        }
        if let Ok(env_path) = std::env::var(CONFIG_ENV) {
            return Self::load(Path::new(&env_path));
        }
        Ok(Self::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let cfg = ExperimentConfig {
            seeds: vec![1, 1],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
