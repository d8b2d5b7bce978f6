//! The adversarial generator: networks, one-pass attack, video attack,
//! training against a proposal-based victim, and checkpoint bundles.

mod network;
mod train;

use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::Device;
use serde::{Deserialize, Serialize};

pub use network::{Discriminator, Generator, GeneratorScale};
pub use train::{train_ablation, train_generator, LossRecord, TrainOptions, TrainedGenerator};

use crate::attention::AttentionNorm;
use crate::datamodel::{FrameSequence, Image};
use crate::error::{ensure, Error, Result};
use crate::eval::{perceptibility, Perceptibility};
use crate::exec::Execution;
use crate::losses::{LossWeights, RandomTargetFeatures};
use crate::nn::{self, NamedTensors, ParamBuilder};
use network::DTYPE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub scale: GeneratorScale,
    /// Bound on `|perturbation|` through `cap·tanh`; `None` adds the raw
    /// output unbounded (the final clamp to `[0, 1]` still applies).
    pub linf_cap: Option<f64>,
    /// Start from an all-zero output layer, i.e. the identity attack.
    pub zero_init: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Proposals at or above this score are attacked by the class loss.
    pub score_threshold: f64,
    /// Proposals feeding the attention map.
    pub attention_top_k: usize,
    pub attention_norm: AttentionNorm,
    /// Use squared norms in the L2 and feature terms.
    pub squared_norms: bool,
    /// Whether background may be drawn as an adversarial label.
    pub background_target: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scale: GeneratorScale::Toy,
            linf_cap: Some(0.1),
            zero_init: false,
            epochs: 6,
            batch_size: 8,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            score_threshold: 0.7,
            attention_top_k: 300,
            attention_norm: AttentionNorm::TotalCount,
            squared_norms: false,
            background_target: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, Argument, "batch_size must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Argument,
            "learning rate must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Argument,
            "Adam betas must lie in [0, 1)"
        );
        if let Some(cap) = self.linf_cap {
            ensure!(cap > 0.0 && cap.is_finite(), Argument, "linf_cap must be positive");
        }
        ensure!(self.attention_top_k > 0, Argument, "attention_top_k must be positive");
        Ok(())
    }
}

/// A generator ready for inference. Weights are frozen.
#[derive(Clone, Debug)]
pub struct UeaGenerator {
    network: Generator,
    config: GeneratorConfig,
    params: NamedTensors,
}

impl UeaGenerator {
    /// Freshly initialized (untrained) generator.
    pub fn initialized(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::fresh(nn::mix_seed(config.seed, &[1]), false, DTYPE);
        Self::build(&mut pb, config)
    }

    pub fn from_params(config: &GeneratorConfig, params: &NamedTensors) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::frozen(params, DTYPE);
        Self::build(&mut pb, config)
    }

    fn build(pb: &mut ParamBuilder, config: &GeneratorConfig) -> Result<Self> {
        let network = Generator::build(pb, config.scale, config.linf_cap, config.zero_init)?;
        Ok(Self {
            network,
            config: config.clone(),
            params: pb.registered().clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn network(&self) -> &Generator {
        &self.network
    }

    /// Adversarial image for one clean image, in one forward pass.
    pub fn generate(&self, image: &Image) -> Result<AttackArtifacts> {
        let start = Instant::now();
        let x = image.to_tensor(DTYPE, &Device::Cpu)?;
        let adv = self.network.forward(&x)?;
        let adversarial = Image::from_tensor(image.id(), &adv)?;
        let seconds = start.elapsed().as_secs_f64();
        AttackArtifacts::new(image, adversarial, seconds)
    }

    /// Attacks many images independently.
    pub fn generate_all(&self, images: &[Image], exec: Execution) -> Result<Vec<AttackArtifacts>> {
        exec.try_map(images, |img| self.generate(img))
    }

    /// Applies [`UeaGenerator::generate`] to every frame, in order.
    pub fn generate_video(&self, frames: &FrameSequence) -> Result<VideoArtifacts> {
        ensure!(!frames.is_empty(), Argument, "frame sequence is empty");
        let start = Instant::now();
        let per_frame = frames
            .frames()
            .iter()
            .map(|f| self.generate(f))
            .collect::<Result<Vec<_>>>()?;
        let total_seconds = start.elapsed().as_secs_f64();
        let adv = FrameSequence::new(per_frame.iter().map(|a| a.adversarial.clone()).collect(), frames.fps())?;
        Ok(VideoArtifacts {
            frames: adv,
            per_frame,
            total_seconds,
        })
    }
}

/// Outcome of attacking one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackArtifacts {
    pub adversarial: Image,
    /// `adversarial - clean`, laid out like [`Image::pixels`].
    pub perturbation: Vec<f32>,
    pub seconds: f64,
    pub perceptibility: Perceptibility,
}

impl AttackArtifacts {
    pub fn new(clean: &Image, adversarial: Image, seconds: f64) -> Result<Self> {
        let perceptibility = perceptibility(clean, &adversarial)?;
        let perturbation = adversarial
            .pixels()
            .iter()
            .zip(clean.pixels())
            .map(|(a, c)| a - c)
            .collect();
        Ok(Self {
            adversarial,
            perturbation,
            seconds,
            perceptibility,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoArtifacts {
    pub frames: FrameSequence,
    pub per_frame: Vec<AttackArtifacts>,
    pub total_seconds: f64,
}

/// Metadata stored next to the weight files of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub config: GeneratorConfig,
    pub weights: LossWeights,
    pub target_seed: u64,
}

const MANIFEST: &str = "checkpoint.yaml";
const GENERATOR_FILE: &str = "generator.safetensors";
const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
const TARGETS_FILE: &str = "targets.safetensors";

/// Writes generator, discriminator, random targets and metadata into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    manifest: &CheckpointManifest,
    generator: &NamedTensors,
    discriminator: &NamedTensors,
    targets: &RandomTargetFeatures,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    nn::save_tensors(generator, &dir.join(GENERATOR_FILE))?;
    nn::save_tensors(discriminator, &dir.join(DISCRIMINATOR_FILE))?;
    nn::save_tensors(&targets.to_named(), &dir.join(TARGETS_FILE))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_yaml::to_string(manifest)?).map_err(|e| Error::io(&path, e))
}

/// A loaded checkpoint bundle.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub generator: UeaGenerator,
    pub discriminator: NamedTensors,
    pub targets: RandomTargetFeatures,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_yaml::from_str(&text)?;
    let generator = UeaGenerator::from_params(&manifest.config, &nn::load_tensors(&dir.join(GENERATOR_FILE))?)?;
    let discriminator = nn::load_tensors(&dir.join(DISCRIMINATOR_FILE))?;
    let targets = RandomTargetFeatures::from_named(
        manifest.target_seed,
        &nn::load_tensors(&dir.join(TARGETS_FILE))?,
        DTYPE,
    )?;
    Ok(Checkpoint {
        manifest,
        generator,
        discriminator,
        targets,
    })
}
