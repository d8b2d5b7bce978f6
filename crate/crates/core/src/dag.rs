//! Dense adversary generation: the iterative per-image baseline attack.
//!
//! Each iteration recomputes the proposals on the current image, keeps the
//! confident ones that the victim still classifies as their true label, and
//! takes a fixed-size step along the L∞-normalized gradient of the class
//! loss with respect to the pixels.

use std::time::Instant;

use candle_core::{Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::advgen::AttackArtifacts;
use crate::datamodel::{matched_label, BoundingBox, GroundTruthObject, Image, ProposalSet};
use crate::detector::{Detector, ProposalDetector};
use crate::error::{ensure, Result};
use crate::exec::Execution;
use crate::losses::{dag_class_loss, draw_adversarial_label, MATCH_IOU};
use crate::nn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DagConfig {
    pub max_iterations: usize,
    /// L∞ size of every step, in `[0, 1]` pixel units.
    pub step_size: f64,
    pub score_threshold: f64,
    /// A proposal appearing after the first iteration inherits the labels of
    /// the first-iteration proposal it overlaps most, if at least this much.
    pub inherit_iou: f64,
    /// Whether background may be drawn as an adversarial label.
    pub background_target: bool,
    pub seed: u64,
}

impl Default for DagConfig {
    fn default() -> Self {
        Self {
            max_iterations: 150,
            step_size: 0.5 / 255.0,
            score_threshold: 0.7,
            inherit_iou: 0.3,
            background_target: true,
            seed: 0,
        }
    }
}

impl DagConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_iterations >= 1, Argument, "max_iterations must be at least 1");
        ensure!(
            self.step_size > 0.0 && self.step_size.is_finite(),
            Argument,
            "step size must be positive"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DagOutcome {
    pub artifacts: AttackArtifacts,
    /// Gradient steps taken.
    pub iterations: usize,
    /// Proposals still correctly classified when the loop stopped; zero
    /// unless the iteration budget ran out.
    pub active_at_end: usize,
}

#[derive(Clone, Copy, Debug)]
struct Target {
    region: BoundingBox,
    true_label: usize,
    adversarial_label: usize,
}

struct Labeler<'a> {
    detector: &'a ProposalDetector,
    objects: Option<&'a [GroundTruthObject]>,
    config: &'a DagConfig,
    rng: rand_chacha::ChaCha8Rng,
    initial: Vec<Target>,
}

impl Labeler<'_> {
    fn excluded(&self) -> Option<usize> {
        (!self.config.background_target).then(|| self.detector.background_label())
    }

    /// True label of a fresh proposal: the matched object's label, or the
    /// victim's own prediction when no annotation was given.
    fn true_label(&self, region: &BoundingBox, predicted: usize) -> usize {
        match self.objects {
            Some(objs) => matched_label(region, objs, MATCH_IOU, self.detector.background_label()),
            None => predicted,
        }
    }

    fn fresh(&mut self, region: BoundingBox, predicted: usize) -> Result<Option<Target>> {
        let true_label = self.true_label(&region, predicted);
        if true_label == self.detector.background_label() {
            return Ok(None);
        }
        let excluded = self.excluded();
        let adversarial_label =
            draw_adversarial_label(true_label, self.detector.class_count(), excluded, &mut self.rng)?;
        Ok(Some(Target {
            region,
            true_label,
            adversarial_label,
        }))
    }

    fn label(&mut self, region: BoundingBox, predicted: usize, first: bool) -> Result<Option<Target>> {
        if first {
            let t = self.fresh(region, predicted)?;
            if let Some(t) = t {
                self.initial.push(t);
            }
            return Ok(t);
        }
        let best = self
            .initial
            .iter()
            .map(|t| (t, t.region.iou(&region)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((t, v)) if v >= self.config.inherit_iou => Ok(Some(Target { region, ..*t })),
            _ => self.fresh(region, predicted),
        }
    }
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as usize)
        .collect())
}

/// Attacks one image. `objects` gives the true labels of proposals; without
/// it the victim's own first prediction stands in for the truth.
pub fn dag_attack(
    victim: &Detector,
    image: &Image,
    objects: Option<&[GroundTruthObject]>,
    config: &DagConfig,
) -> Result<DagOutcome> {
    let detector = victim.as_proposal()?;
    config.validate()?;
    let start = Instant::now();
    let dtype = detector.backbone().dtype();
    let mut x = image.to_tensor(dtype, &Device::Cpu)?;
    let mut labeler = Labeler {
        detector,
        objects,
        config,
        rng: nn::seeded_rng(nn::mix_seed(config.seed, &[fnv(image.id())])),
        initial: Vec::new(),
    };
    let mut iterations = 0;
    let active_at_end = loop {
        let var = Var::from_tensor(&x)?;
        let features = detector.backbone().forward(var.as_tensor())?;
        let proposals: ProposalSet = detector
            .propose(&features)?
            .pop()
            .unwrap_or_default()
            .filter(|p| p.score >= config.score_threshold);
        if proposals.is_empty() {
            break 0;
        }
        let logits = detector.classify_regions(&features, &[proposals.regions()])?;
        let predicted = argmax_rows(&logits)?;
        let mut active = Vec::new();
        let mut rows = Vec::new();
        for (i, (p, &pred)) in proposals.iter().zip(&predicted).enumerate() {
            if let Some(t) = labeler.label(p.region, pred, iterations == 0)? {
                if pred == t.true_label {
                    active.push((t.true_label, t.adversarial_label));
                    rows.push(i as u32);
                }
            }
        }
        if active.is_empty() || iterations == config.max_iterations {
            break active.len();
        }
        let idx = Tensor::from_vec(rows, active.len(), &Device::Cpu)?;
        let loss = dag_class_loss(&logits.index_select(&idx, 0)?, &active)?;
        let grads = loss.value.backward()?;
        let Some(g) = grads.get(var.as_tensor()) else {
            break active.len();
        };
        let scale = nn::scalar(&g.abs()?.max_all()?)?;
        if scale == 0.0 {
            break active.len();
        }
        x = (var.as_tensor().detach() - (g * (config.step_size / scale))?)?.clamp(0.0, 1.0)?;
        iterations += 1;
    };
    let adversarial = Image::from_tensor(image.id(), &x)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(DagOutcome {
        artifacts: AttackArtifacts::new(image, adversarial, seconds)?,
        iterations,
        active_at_end,
    })
}

/// Attacks many images independently.
pub fn dag_attack_all(
    victim: &Detector,
    images: &[Image],
    objects: Option<&[Vec<GroundTruthObject>]>,
    config: &DagConfig,
    exec: Execution,
) -> Result<Vec<DagOutcome>> {
    if let Some(o) = objects {
        ensure!(
            o.len() == images.len(),
            Argument,
            "{} annotation lists for {} images",
            o.len(),
            images.len()
        );
    }
    let indices: Vec<usize> = (0..images.len()).collect();
    exec.try_map(&indices, |&i| {
        dag_attack(victim, &images[i], objects.map(|o| o[i].as_slice()), config)
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}
