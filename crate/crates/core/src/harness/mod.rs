//! Run configuration and the generate / train / eval / ablate commands.

mod ablate;
mod checkpoint;
mod eval;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LmrlError, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::mpr::MprConfig;
use crate::rfl::RflConfig;
use crate::seed::derive_seed;
use crate::supervision::LossConfig;
use crate::synthgen::{generate_dataset, GenConfig, Manifest};

pub use ablate::{cmd_ablate, run_suite, AblationRow, Suite};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{cmd_eval, evaluate, write_density_csv, write_foreground_csv, Evaluation};
pub use train::{cmd_train, train, EpochLog, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 30,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// `gen.seed` is ignored; the dataset seed comes from `seed`.
    pub gen: GenConfig,
    pub mpr: MprConfig,
    pub rfl: RflConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            n_train: 200,
            n_val: 50,
            n_test: 50,
            gen: GenConfig::default(),
            mpr: MprConfig::default(),
            rfl: RflConfig::default(),
            fusion: FusionConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LmrlError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LmrlError::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            mpr: self.mpr.clone(),
            rfl: self.rfl.clone(),
            fusion: self.fusion.clone(),
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: derive_seed(self.seed, "data", 0),
            ..self.gen.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init", 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model().mpr.validate(self.gen.seq_len)?;
        self.rfl.validate()?;
        self.fusion.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || o.batch_size == 0 {
            return Err(LmrlError::Config(
                "lr and batch_size must be positive".into(),
            ));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(LmrlError::Config(
                "train and val splits must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// The same configuration with `data_dir` and `out_dir` emptied.
    pub fn without_paths(&self) -> RunConfig {
        RunConfig {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the configuration with paths blanked, so moving a run
    /// does not change its identity.
    pub fn hash(&self) -> String {
        let blank = self.without_paths();
        let digest = Sha256::digest(serde_json::to_vec(&blank).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    cfg.gen.validate()?;
    generate_dataset(
        &cfg.gen_config(),
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        &cfg.data_dir,
    )
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LmrlError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| LmrlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "optim": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.optim.epochs, 2);
        assert_eq!(cfg.optim.batch_size, 4);
        assert_eq!(cfg.n_train, 200);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
