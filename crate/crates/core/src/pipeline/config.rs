use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advgen::GeneratorConfig;
use crate::dag::DagConfig;
use crate::detector::{DetectorConfig, DetectorTrainConfig};
use crate::error::{ensure, Error, Result};
use crate::eval::EvalSettings;
use crate::exec::Execution;
use crate::losses::LossWeights;
use crate::nn;

use super::synthetic::SyntheticConfig;

/// Where datasets live. Without a `root`, the synthetic generator is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    /// VOC-style root with `Annotations/`, `JPEGImages/`, `ImageSets/Main/`.
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    /// Class names in label order; inferred from the data when absent.
    pub classes: Option<Vec<String>>,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            root: None,
            train_split: "train".into(),
            test_split: "test".into(),
            classes: None,
        }
    }
}

/// Everything a run needs. Every section is optional in the YAML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; [`RunConfig::apply_seed`] derives every component seed from it.
    pub seed: u64,
    pub execution: Execution,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    /// Training-set generator; the test set reuses it with `test_images`.
    pub synthetic: SyntheticConfig,
    pub test_images: usize,
    pub detector: DetectorConfig,
    pub detector_training: DetectorTrainConfig,
    pub generator: GeneratorConfig,
    pub weights: LossWeights,
    pub dag: DagConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            execution: Execution::default(),
            output_dir: PathBuf::from("runs"),
            data: DataPaths::default(),
            synthetic: SyntheticConfig {
                num_images: 500,
                ..Default::default()
            },
            test_images: 100,
            detector: DetectorConfig::default(),
            detector_training: DetectorTrainConfig::default(),
            generator: GeneratorConfig::default(),
            weights: LossWeights::default(),
            dag: DagConfig::default(),
            eval: EvalSettings::default(),
        };
        cfg.apply_seed(0);
        cfg
    }
}

impl RunConfig {
    /// Reads a YAML file and derives component seeds from its `seed`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_yaml::from_str(&text)?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, serde_yaml::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    /// Sets the master seed and overwrites every component seed with an
    /// independent stream derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.detector_training.seed = nn::mix_seed(seed, &[10]);
        self.generator.seed = nn::mix_seed(seed, &[11]);
        self.dag.seed = nn::mix_seed(seed, &[12]);
        self.synthetic.seed = nn::mix_seed(seed, &[13]);
    }

    /// Generator config for the held-out synthetic split.
    pub fn synthetic_test(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_images: self.test_images,
            seed: nn::mix_seed(self.seed, &[14]),
            id_prefix: format!("{}test", self.synthetic.id_prefix),
            ..self.synthetic.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.generator.validate()?;
        self.weights.validate()?;
        self.dag.validate()?;
        if self.data.root.is_none() {
            self.synthetic.validate()?;
            ensure!(
                self.synthetic.num_classes == self.detector.num_classes,
                Argument,
                "synthetic data has {} classes but the detector expects {}",
                self.synthetic.num_classes,
                self.detector.num_classes
            );
        }
        ensure!(
            self.weights.epsilon.len() == self.detector.backbone.attack_layers.len(),
            Argument,
            "{} feature-loss weights for {} attack layers",
            self.weights.epsilon.len(),
            self.detector.backbone.attack_layers.len()
        );
        Ok(())
    }
}
