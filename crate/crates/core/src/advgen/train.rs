use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{Discriminator, Generator, DTYPE};
use super::{save_checkpoint, CheckpointManifest, GeneratorConfig, UeaGenerator};
use crate::attention::AttentionMap;
use crate::datamodel::{BoundingBox, Image, LabeledImage, ProposalSet};
use crate::detector::{Detector, ProposalDetector};
use crate::error::{ensure, Error, Result};
use crate::losses::{
    self, assign_adversarial_labels, label_pairs, match_proposals_to_ground_truth, select_attack_proposals,
    LossComponents, LossReport, LossWeights, RandomTargetFeatures,
};
use crate::nn::{self, NamedTensors, ParamBuilder};

/// Where training writes its by-products. Both are optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// One sub-directory `epoch-N` per finished epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON: a header, then one record per optimizer step.
    pub log_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct TrainedGenerator {
    pub generator: UeaGenerator,
    pub discriminator: NamedTensors,
    pub targets: RandomTargetFeatures,
    pub weights: LossWeights,
    pub log: Vec<LossRecord>,
}

/// What the class and feature losses need from the clean image; computed
/// once, since the victim is frozen.
struct Prepared {
    /// Attacked proposals with their true labels.
    attacked: ProposalSet,
    /// `(1, 1, h, w)` attention per attacked layer.
    attention: Vec<Tensor>,
}

fn prepare(
    victim: &ProposalDetector,
    data: &[LabeledImage],
    config: &GeneratorConfig,
    strides: &[usize],
) -> Result<Vec<Prepared>> {
    let background = victim.background_label();
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(config.batch_size.max(1) * 4) {
        let images: Vec<Image> = chunk.iter().map(|s| s.image.clone()).collect();
        let x = Image::batch_to_tensor(&images, DTYPE, &Device::Cpu)?;
        let features = victim.backbone().forward(&x)?;
        let proposals = victim.propose(&features)?;
        for (sample, props) in chunk.iter().zip(proposals) {
            let (h, w) = (sample.image.height(), sample.image.width());
            let top = props.top_k(config.attention_top_k);
            let map = AttentionMap::build(&top, h, w, strides, config.attention_norm)?;
            let attention = map
                .layers
                .iter()
                .map(|g| g.to_tensor(DTYPE, &Device::Cpu))
                .collect::<Result<_>>()?;
            let attacked = select_attack_proposals(&props, config.score_threshold);
            out.push(Prepared {
                attacked: match_proposals_to_ground_truth(&attacked, &sample.objects, background),
                attention,
            });
        }
    }
    Ok(out)
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn open(path: Option<&PathBuf>) -> Result<Self> {
        match path {
            None => Ok(Self(None)),
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(Some(BufWriter::new(f))))
            }
        }
    }

    fn write(&mut self, value: &impl Serialize) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct LogHeader<'a> {
    kind: &'static str,
    config: &'a GeneratorConfig,
    weights: &'a LossWeights,
    images: usize,
    victim_backbone: String,
}

/// Trains the generator against a frozen proposal-based victim by
/// alternating one discriminator step and one generator step per batch.
///
/// Proposals, attention maps and true labels come from the clean images;
/// adversarial labels are redrawn for every image at the start of each
/// epoch. A non-finite loss aborts with that step's [`LossReport`].
pub fn train_generator(
    victim: &Detector,
    data: &[LabeledImage],
    weights: &LossWeights,
    config: &GeneratorConfig,
    options: &TrainOptions,
) -> Result<TrainedGenerator> {
    let victim_pd = victim.as_proposal()?;
    config.validate()?;
    weights.validate()?;
    let attack_layers = victim.config().backbone.attack_layers.clone();
    ensure!(
        weights.epsilon.len() == attack_layers.len(),
        Argument,
        "{} feature-loss weights for {} attacked layers",
        weights.epsilon.len(),
        attack_layers.len()
    );
    let first = data
        .first()
        .ok_or_else(|| Error::Argument("generator training set is empty".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    if let Some(bad) = data.iter().find(|s| (s.image.height(), s.image.width()) != (h, w)) {
        return Err(Error::Dimension(format!(
            "image {} is {}x{}, training expects {h}x{w}",
            bad.image.id(),
            bad.image.height(),
            bad.image.width()
        )));
    }

    let backbone_cfg = &victim.config().backbone;
    let strides: Vec<usize> = attack_layers.iter().map(|&l| backbone_cfg.cumulative_strides()[l]).collect();
    let shapes = backbone_cfg.layer_shapes(h, w);
    let target_shapes: Vec<_> = attack_layers.iter().map(|&l| shapes[l]).collect();
    let target_seed = nn::mix_seed(config.seed, &[3]);
    let targets = RandomTargetFeatures::generate(target_seed, &target_shapes, DTYPE)?;

    let mut gpb = ParamBuilder::fresh(nn::mix_seed(config.seed, &[1]), true, DTYPE);
    let generator = Generator::build(&mut gpb, config.scale, config.linf_cap, config.zero_init)?;
    let gparams = gpb.finish();
    let mut dpb = ParamBuilder::fresh(nn::mix_seed(config.seed, &[2]), true, DTYPE);
    let discriminator = Discriminator::build(&mut dpb)?;
    let dparams = dpb.finish();
    let mut opt_g = nn::adam(gparams.vars.clone(), config.learning_rate, config.beta1, config.beta2)?;
    let mut opt_d = nn::adam(dparams.vars.clone(), config.learning_rate, config.beta1, config.beta2)?;

    let mut sink = LogSink::open(options.log_path.as_ref())?;
    sink.write(&LogHeader {
        kind: "header",
        config,
        weights,
        images: data.len(),
        victim_backbone: victim.backbone().token().to_string(),
    })?;

    let prepared = if config.epochs > 0 {
        prepare(victim_pd, data, config, &strides)?
    } else {
        Vec::new()
    };
    let class_count = victim_pd.class_count();
    let excluded = (!config.background_target).then(|| victim_pd.background_label());
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let labelled = prepared
            .iter()
            .enumerate()
            .map(|(i, p)| {
                assign_adversarial_labels(
                    &p.attacked,
                    class_count,
                    excluded,
                    nn::mix_seed(config.seed, &[epoch as u64, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut nn::seeded_rng(nn::mix_seed(config.seed, &[epoch as u64, u64::MAX])));
        for batch in order.chunks(config.batch_size) {
            let images: Vec<Image> = batch.iter().map(|&i| data[i].image.clone()).collect();
            let x = Image::batch_to_tensor(&images, DTYPE, &Device::Cpu)?;
            let adv = generator.forward(&x)?;

            let d_real = discriminator.forward(&x)?;
            let d_fake = discriminator.forward(&adv.detach())?;
            let gan_d = losses::gan_discriminator_loss(&d_real, &d_fake)?;
            opt_d.backward_step(&gan_d)?;

            let gan_g = losses::gan_generator_loss(&discriminator.forward(&adv)?)?;
            let l2 = losses::l2_similarity(&x, &adv, config.squared_norms)?;
            let features = victim.backbone().forward(&adv)?;
            let regions: Vec<Vec<BoundingBox>> = batch.iter().map(|&i| labelled[i].regions()).collect();
            let pairs: Vec<(usize, usize)> = batch
                .iter()
                .map(|&i| label_pairs(&labelled[i]))
                .collect::<Result<Vec<_>>>()?
                .concat();
            let class = if pairs.is_empty() {
                losses::dag_class_loss(&gan_g, &[])?
            } else {
                let logits = victim_pd.classify_regions(&features, &regions)?;
                losses::dag_class_loss(&logits, &pairs)?
            };
            let dag_class = (class.value / batch.len() as f64)?;
            let xs: Vec<Tensor> = attack_layers.iter().map(|&l| features.layer(l).clone()).collect();
            let attention: Vec<Tensor> = (0..attack_layers.len())
                .map(|m| Tensor::cat(&batch.iter().map(|&i| &prepared[i].attention[m]).collect::<Vec<_>>(), 0))
                .collect::<candle_core::Result<_>>()?;
            let feature = losses::attention_feature_loss(&xs, targets.layers(), &attention, config.squared_norms)?;
            let total = losses::weighted_total(&gan_g, &l2, &dag_class, &feature, weights)?;

            let components = LossComponents {
                gan_g: nn::scalar(&gan_g)?,
                gan_d: nn::scalar(&gan_d)?,
                l2: nn::scalar(&l2)?,
                dag_class: nn::scalar(&dag_class)?,
                feature: feature.iter().map(nn::scalar).collect::<Result<_>>()?,
            };
            let report = losses::total_loss(&components, weights)?;
            if !report.is_finite() {
                sink.flush()?;
                return Err(Error::NonFiniteLoss {
                    step,
                    report: Box::new(report),
                });
            }
            opt_g.backward_step(&total)?;
            let record = LossRecord { step, epoch, report };
            sink.write(&record)?;
            log.push(record);
            step += 1;
        }
        sink.flush()?;
        if let Some(dir) = &options.checkpoint_dir {
            let manifest = CheckpointManifest {
                epoch: epoch + 1,
                config: config.clone(),
                weights: weights.clone(),
                target_seed,
            };
            save_checkpoint(
                &dir.join(format!("epoch-{}", epoch + 1)),
                &manifest,
                &gparams.snapshot()?,
                &dparams.snapshot()?,
                &targets,
            )?;
        }
        log::info!(
            "epoch {}: mean total loss {:.4}",
            epoch + 1,
            log.iter().filter(|r| r.epoch == epoch).map(|r| r.report.total).sum::<f64>()
                / log.iter().filter(|r| r.epoch == epoch).count().max(1) as f64
        );
    }
    sink.flush()?;
    if config.epochs == 0 {
        if let Some(dir) = &options.checkpoint_dir {
            let manifest = CheckpointManifest {
                epoch: 0,
                config: config.clone(),
                weights: weights.clone(),
                target_seed,
            };
            save_checkpoint(&dir.join("epoch-0"), &manifest, &gparams.snapshot()?, &dparams.snapshot()?, &targets)?;
        }
    }

    Ok(TrainedGenerator {
        generator: UeaGenerator::from_params(config, &gparams.snapshot()?)?,
        discriminator: dparams.snapshot()?,
        targets,
        weights: weights.clone(),
        log,
    })
}

/// [`train_generator`] with the feature loss switched off.
pub fn train_ablation(
    victim: &Detector,
    data: &[LabeledImage],
    weights: &LossWeights,
    config: &GeneratorConfig,
    options: &TrainOptions,
) -> Result<TrainedGenerator> {
    train_generator(victim, data, &weights.without_feature_loss(), config, options)
}
