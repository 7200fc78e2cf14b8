//! Run configuration: the TOML file consumed by the training CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Mode};
use crate::model::{DecoderKind, ModelConfig};
use crate::optim::OptimConfig;

/// What the decoder reconstructs and what the loss compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Reconstruct RGB pixels through the spatial broadcast decoder.
    ImageRecon,
    /// Reconstruct precomputed frozen features through the MLP decoder.
    FeatureRecon,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::ImageRecon => "image_recon",
            Objective::FeatureRecon => "feature_recon",
        }
    }

    pub fn parse(s: &str) -> Result<Objective> {
        match s {
            "image_recon" => Ok(Objective::ImageRecon),
            "feature_recon" => Ok(Objective::FeatureRecon),
            other => Err(Error::config(format!(
                "unknown objective '{other}' (expected image_recon or feature_recon)"
            ))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub objective: Objective,
    /// Dataset directory or manifest path.
    pub dataset: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimConfig,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Eval cadence in steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Steps between log lines; the last step always logs.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Baseline,
            objective: Objective::ImageRecon,
            dataset: String::new(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimConfig::default(),
            batch_size: 16,
            total_steps: 5000,
            checkpoint_every: 1000,
            eval_every: 0,
            log_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.dataset.is_empty() {
            return Err(Error::config("dataset path must be set"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        // The cosine term repels raw slots; routing it through the projection
        // head is not expressible here and stays rejected if the model and
        // loss widths would ever make the two tensors interchangeable.
        if self.mode == Mode::CosineLoss && self.loss.use_variance_term {
            return Err(Error::config(
                "cosineLoss has no variance term; unset use_variance_term",
            ));
        }
        match self.objective {
            Objective::ImageRecon => {
                if self.model.decoder != DecoderKind::SpatialBroadcast {
                    return Err(Error::config(
                        "image_recon requires the spatial_broadcast decoder",
                    ));
                }
            }
            Objective::FeatureRecon => {
                if self.model.decoder != DecoderKind::MlpFeature {
                    return Err(Error::config(
                        "feature_recon requires the mlp_feature decoder",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Accepts either the dataset directory or the manifest file itself.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(crate::data::MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: TrainConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_train_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("serializing config: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tmp_path;

    fn desk_config() -> TrainConfig {
        TrainConfig {
            dataset: "data/sprites".into(),
            model: ModelConfig {
                image_size: 32,
                d_enc: 16,
                d_slots: 32,
                n_slots: 4,
                d_proj: 128,
                d_dec: 16,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toml_round_trip_preserves_fields() {
        let cfg = TrainConfig {
            mode: Mode::CovLoss,
            total_steps: 123,
            seed: 7,
            ..desk_config()
        };
        let path = tmp_path("config.toml");
        save_train_config(&path, &cfg).unwrap();
        let back = load_train_config(&path).unwrap();
        assert_eq!(back.mode, Mode::CovLoss);
        assert_eq!(back.total_steps, 123);
        assert_eq!(back.seed, 7);
        assert_eq!(back.model.d_slots, cfg.model.d_slots);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let path = tmp_path("partial.toml");
        std::fs::write(
            &path,
            "mode = \"covLoss\"\ndataset = \"d\"\n\n[loss]\nbeta = 0.5\n",
        )
        .unwrap();
        let cfg = load_train_config(&path).unwrap();
        assert_eq!(cfg.mode, Mode::CovLoss);
        assert_eq!(cfg.loss.beta, 0.5);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.optimizer.lr, 4e-4);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let path = tmp_path("typo.toml");
        std::fs::write(&path, "dataset = \"d\"\nbatchsize = 4\n").unwrap();
        let err = load_train_config(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn objective_decoder_pairing_is_enforced() {
        let mut cfg = desk_config();
        cfg.objective = Objective::FeatureRecon;
        assert!(cfg.validate().is_err(), "feature_recon needs mlp_feature");
        cfg.model.decoder = DecoderKind::MlpFeature;
        cfg.model.feature_dim = 8;
        cfg.model.feature_locations = 16;
        assert!(cfg.validate().is_ok());
        cfg.objective = Objective::ImageRecon;
        assert!(cfg.validate().is_err(), "image_recon needs spatial_broadcast");
    }

    #[test]
    fn empty_dataset_path_is_rejected() {
        let mut cfg = desk_config();
        cfg.dataset = String::new();
        assert!(cfg.validate().is_err());
    }
}
