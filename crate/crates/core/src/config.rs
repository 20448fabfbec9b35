//! Run configuration: one TOML file holding every sub-configuration, with
//! command-line overrides layered on top.
//!
//! Precedence, highest first: explicit command-line flag, the
//! `VOX2SEG_DEVICE` environment variable (device only), the configuration
//! file, built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::ensemble::EnsemblerConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{DiscriminatorConfig, GeneratorConfig};
use crate::postprocess::{Connectivity, PostprocessConfig};
use crate::train::{Experiment, TrainConfig};

pub const DEVICE_ENV: &str = "VOX2SEG_DEVICE";

/// The only compute device this build provides.
pub const CPU: &str = "cpu";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory with one subdirectory per labelled subject.
    pub train: PathBuf,
    /// Optional held-out dataset used by `predict` and `evaluate`.
    pub test: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: PathBuf::from("data/train"),
            test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub device: String,
    pub output: PathBuf,
    pub data: DataConfig,
    pub augment: AugmentationConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub ensemble: EnsemblerConfig,
    pub postprocess: PostprocessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            device: CPU.into(),
            output: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            augment: AugmentationConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            ensemble: EnsemblerConfig::default(),
            postprocess: PostprocessConfig::default(),
        }
    }
}

/// Command-line values that replace file settings when present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub device: Option<String>,
    pub output: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub et_threshold: Option<usize>,
    pub min_cluster: Option<usize>,
    pub connectivity: Option<Connectivity>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// `--seed` drives every random stream: initialisation, folds, patch
    /// sampling and augmentation, and the ensembler.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.augment.seed = seed;
            self.ensemble.seed = seed;
        }
        if let Some(d) = &o.device {
            self.device = d.clone();
        }
        if let Some(out) = &o.output {
            self.output = out.clone();
        }
        if let Some(a) = o.alpha {
            self.loss.alpha = a;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(t) = o.et_threshold {
            self.postprocess.et_threshold = t;
        }
        if let Some(m) = o.min_cluster {
            self.postprocess.min_cluster = m;
        }
        if let Some(c) = o.connectivity {
            self.postprocess.connectivity = c;
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.device.eq_ignore_ascii_case(CPU) {
            return Err(Error::config(format!(
                "device {:?} is not available; this build runs on {CPU:?} only",
                self.device
            )));
        }
        self.experiment().validate()?;
        self.ensemble.validate()?;
        if self.ensemble.models != self.train.folds {
            return Err(Error::config(format!(
                "ensemble.models = {} but train.folds = {}; the ensembler fuses one model per fold",
                self.ensemble.models, self.train.folds
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let mut with_test = cfg.clone();
        with_test.data.test = Some("data/test".into());
        assert_eq!(RunConfig::from_toml(&with_test.to_toml()).unwrap(), with_test);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml(
            "output = \"runs/x\"\n[loss]\nalpha = 0.0\n[train]\nepochs = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.loss.alpha, 0.0);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.output, PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml("outptu = \"x\"").is_err());
        assert!(RunConfig::from_toml("[train]\nepochs = \"many\"").is_err());
        let mut cfg = RunConfig::default();
        cfg.train.folds = 1;
        cfg.ensemble.models = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.ensemble.models = 4;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            device: "cuda:0".into(),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::from_toml("[loss]\nalpha = 2.0\n[train]\nseed = 3").unwrap();
        cfg.apply(&Overrides {
            seed: Some(11),
            alpha: Some(0.0),
            epochs: Some(2),
            et_threshold: Some(5),
            connectivity: Some(Connectivity::Faces),
            output: Some("o".into()),
            ..Default::default()
        });
        assert_eq!(cfg.loss.alpha, 0.0);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!((cfg.train.seed, cfg.augment.seed, cfg.ensemble.seed), (11, 11, 11));
        assert_eq!(cfg.postprocess.et_threshold, 5);
        assert_eq!(cfg.postprocess.connectivity, Connectivity::Faces);
        assert_eq!(cfg.output, PathBuf::from("o"));
        let before = cfg.clone();
        cfg.apply(&Overrides::default());
        assert_eq!(cfg, before);
    }

    #[test]
    fn missing_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            RunConfig::load(&dir.path().join("none.toml")),
            Err(Error::MissingFile(_))
        ));
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[train\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
    }
}
