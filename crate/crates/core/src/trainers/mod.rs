//! Training settings, model assembly, objectives, the optimizer loop and
//! checkpoints.

mod checkpoint;
mod model;
mod objective;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ArchitectureConfig;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{Model, Predictions, Twin};
pub use objective::{objective, Batch, Breakdown, Objective};
pub use train::{
    pretrain_autoencoder, train, LogRecord, LossLog, PretrainOutcome, TrainData, TrainState,
};

/// Which composite objective is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Kernels only, on fixed pre-trained features.
    Unsup,
    /// Heart-presence classifier on the activations.
    Weak,
    /// Segmentation plus reconstruction from recomposed features.
    Vmfnet,
    /// Two segmentation models supervising each other.
    Vmfpseudo,
    /// Segmentation plus LV/MYO/RV presence classifier on its output.
    Vmfweak,
    /// Encoder and segmentation head on raw features, labeled data only.
    Supervised,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::Unsup,
        Setting::Weak,
        Setting::Vmfnet,
        Setting::Vmfpseudo,
        Setting::Vmfweak,
        Setting::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Unsup => "unsup",
            Setting::Weak => "weak",
            Setting::Vmfnet => "vmfnet",
            Setting::Vmfpseudo => "vmfpseudo",
            Setting::Vmfweak => "vmfweak",
            Setting::Supervised => "supervised",
        }
    }

    pub fn has_kernels(self) -> bool {
        self != Setting::Supervised
    }

    pub fn has_segmentation(self) -> bool {
        matches!(
            self,
            Setting::Vmfnet | Setting::Vmfpseudo | Setting::Vmfweak | Setting::Supervised
        )
    }

    pub fn has_reconstruction(self) -> bool {
        self == Setting::Vmfnet
    }

    /// Length of the weak label vector the classifier predicts, if any.
    pub fn weak_dim(self) -> Option<usize> {
        match self {
            Setting::Weak => Some(1),
            Setting::Vmfweak => Some(3),
            _ => None,
        }
    }

    pub fn num_twins(self) -> usize {
        if self == Setting::Vmfpseudo {
            2
        } else {
            1
        }
    }

    /// Whether the encoder starts from autoencoder pre-training.
    pub fn uses_pretraining(self) -> bool {
        self != Setting::Supervised
    }

    /// Whether training batches draw from the unlabeled pool.
    pub fn uses_unlabeled(self) -> bool {
        self != Setting::Supervised
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "setting",
                    format!("unknown setting `{s}` (expected unsup, weak, vmfnet, vmfpseudo, vmfweak or supervised)"),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub setting: Setting,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// vMF concentration.
    pub sigma: f64,
    /// Weight of the Dice term on samples that carry a mask.
    pub lambda_dice: f64,
    pub lambda_cps: f64,
    pub lambda_weak: f64,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub arch: ArchitectureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Vmfnet,
            lr: 1e-4,
            iterations: 2000,
            batch_size: 4,
            sigma: 30.0,
            lambda_dice: 1.0,
            lambda_cps: 0.1,
            lambda_weak: 0.5,
            pretrain_epochs: 50,
            seed: 0,
            arch: ArchitectureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be positive"));
        }
        for (field, v) in [
            ("lambda_dice", self.lambda_dice),
            ("lambda_cps", self.lambda_cps),
            ("lambda_weak", self.lambda_weak),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_names_round_trip() {
        for s in Setting::ALL {
            assert_eq!(s.name().parse::<Setting>().unwrap(), s);
        }
        assert!(matches!("cps".parse::<Setting>(), Err(Error::Config { .. })));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            lambda_cps: -0.1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "lambda_cps"));
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_parses_from_json_with_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"setting":"vmfweak","iterations":5}"#).unwrap();
        assert_eq!(cfg.setting, Setting::Vmfweak);
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.lambda_weak, 0.5);
        assert_eq!(cfg.arch.num_kernels, 12);
    }
}
