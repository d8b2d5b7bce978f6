//! Supervised training of the toy detectors on labeled images.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::proposal::RpnOutput;
use super::regression::{BOX, OBJ};
use super::{Backbone, Detector, DetectorConfig, DetectorFamily, ProposalDetector, RegressionDetector};
use crate::datamodel::{matched_label, BoundingBox, GroundTruthObject, Image, LabeledImage};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, ApMethod};
use crate::nn::{self, ParamBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub max_epochs: usize,
    /// Validation starts after this many epochs.
    pub min_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub proposal_map_floor: f64,
    pub regression_map_floor: f64,
    /// Training stops early once held-out mAP reaches floor + margin.
    pub stop_margin: f64,
    pub roi_jitter_per_object: usize,
    pub roi_background_per_image: usize,
    pub roi_proposals_per_image: usize,
    pub horizontal_flip: bool,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 40,
            min_epochs: 6,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            proposal_map_floor: 0.85,
            regression_map_floor: 0.80,
            stop_margin: 0.05,
            roi_jitter_per_object: 4,
            roi_background_per_image: 4,
            roi_proposals_per_image: 8,
            horizontal_flip: true,
        }
    }
}

impl DetectorTrainConfig {
    fn floor(&self, family: DetectorFamily) -> f64 {
        match family {
            DetectorFamily::ProposalBased => self.proposal_map_floor,
            DetectorFamily::RegressionBased => self.regression_map_floor,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub held_out_map: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub family: DetectorFamily,
    pub history: Vec<EpochRecord>,
    pub held_out_map: f64,
}

/// Trains one detector. With `shared_backbone` the backbone stays frozen and
/// only the family's head learns; otherwise backbone and head train jointly.
///
/// Fails with [`Error::TrainingFailure`] when the held-out mAP is still below
/// the family's floor after `max_epochs`.
pub fn train_toy_detector(
    family: DetectorFamily,
    train: &[LabeledImage],
    held_out: &[LabeledImage],
    config: &DetectorConfig,
    train_config: &DetectorTrainConfig,
    shared_backbone: Option<Arc<Backbone>>,
) -> Result<(Detector, TrainingSummary)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if held_out.is_empty() {
        return Err(Error::Argument("held-out set is empty".into()));
    }
    for sample in train.iter().chain(held_out) {
        if let Some(o) = sample.objects.iter().find(|o| o.label >= config.num_classes) {
            return Err(Error::Argument(format!(
                "image {} has label {} but the detector has {} classes",
                sample.image.id(),
                o.label,
                config.num_classes
            )));
        }
    }

    let seed = nn::mix_seed(train_config.seed, &[family as u64]);
    let mut pb = ParamBuilder::fresh(seed, true, DType::F32);
    let backbone = match &shared_backbone {
        Some(b) => b.clone(),
        None => Arc::new(Backbone::build(&mut pb, config.backbone.clone())?),
    };
    let trainable = match family {
        DetectorFamily::ProposalBased => Detector::Proposal(ProposalDetector::build(&mut pb, backbone, config.clone())?),
        DetectorFamily::RegressionBased => {
            Detector::Regression(RegressionDetector::build(&mut pb, backbone, config.clone())?)
        }
    };
    let params = pb.finish();
    let mut opt = nn::adam(params.vars.clone(), train_config.learning_rate, 0.9, 0.999)?;
    let mut rng = nn::seeded_rng(nn::mix_seed(seed, &[1]));
    let floor = train_config.floor(family);
    let held_out_images: Vec<Image> = held_out.iter().map(|s| s.image.clone()).collect();
    let held_out_truth: Vec<Vec<GroundTruthObject>> = held_out.iter().map(|s| s.objects.clone()).collect();

    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_map = 0.0;
    for epoch in 0..train_config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_config.batch_size.max(1)) {
            let batch: Vec<LabeledImage> = chunk
                .iter()
                .map(|&i| {
                    if train_config.horizontal_flip && rng.random_bool(0.5) {
                        flip_horizontal(&train[i])
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let loss = match &trainable {
                Detector::Proposal(d) => proposal_loss(d, &batch, train_config, &mut rng)?,
                Detector::Regression(d) => regression_loss(d, &batch)?,
            };
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::TrainingFailure(format!(
                    "{} detector loss became non-finite at epoch {epoch}",
                    family.name()
                )));
            }
            opt.backward_step(&loss)?;
            loss_sum += value;
            batches += 1;
        }
        let mean_loss = loss_sum / batches.max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            mean_loss,
            held_out_map: None,
        };
        let last_epoch = epoch + 1 == train_config.max_epochs;
        if epoch + 1 >= train_config.min_epochs || last_epoch {
            let frozen = freeze(&trainable, &params)?;
            let dets = frozen.detect_all(&held_out_images, 0.0, 32)?;
            let map = mean_average_precision(&dets, &held_out_truth, config.num_classes, 0.5, ApMethod::ElevenPoint).map;
            log::info!("{} epoch {epoch}: loss {mean_loss:.4}, held-out mAP {map:.4}", family.name());
            record.held_out_map = Some(map);
            history.push(record);
            last_map = map;
            if map >= floor + train_config.stop_margin || (last_epoch && map >= floor) {
                return Ok((
                    frozen,
                    TrainingSummary {
                        family,
                        history,
                        held_out_map: map,
                    },
                ));
            }
        } else {
            log::info!("{} epoch {epoch}: loss {mean_loss:.4}", family.name());
            history.push(record);
        }
    }
    Err(Error::TrainingFailure(format!(
        "{} detector reached held-out mAP {last_map:.4} after {} epochs, floor is {floor:.2}; history: {:?}",
        family.name(),
        train_config.max_epochs,
        history
            .iter()
            .map(|r| (r.epoch, (r.mean_loss * 1e4).round() / 1e4, r.held_out_map))
            .collect::<Vec<_>>()
    )))
}

/// Trains the proposal-based detector (backbone included), then a
/// regression-based detector on top of the same frozen backbone.
pub fn train_detector_pair(
    train: &[LabeledImage],
    held_out: &[LabeledImage],
    config: &DetectorConfig,
    train_config: &DetectorTrainConfig,
) -> Result<(Detector, Detector, Vec<TrainingSummary>)> {
    let (proposal, s1) = train_toy_detector(DetectorFamily::ProposalBased, train, held_out, config, train_config, None)?;
    let backbone = proposal.backbone().clone();
    let (regression, s2) = train_toy_detector(
        DetectorFamily::RegressionBased,
        train,
        held_out,
        config,
        train_config,
        Some(backbone),
    )?;
    Ok((proposal, regression, vec![s1, s2]))
}

fn freeze(trainable: &Detector, params: &nn::Params) -> Result<Detector> {
    let snapshot = params.snapshot()?;
    match trainable {
        Detector::Proposal(d) => {
            let mut pb = ParamBuilder::frozen(&snapshot, DType::F32);
            let backbone = Arc::new(Backbone::build(&mut pb, d.config().backbone.clone())?);
            Ok(Detector::Proposal(ProposalDetector::build(&mut pb, backbone, d.config().clone())?))
        }
        Detector::Regression(d) => {
            // Heads only when the backbone was shared and frozen.
            let shared = !snapshot.keys().any(|k| k.starts_with("backbone."));
            let mut pb = ParamBuilder::frozen(&snapshot, DType::F32);
            let backbone = if shared {
                d.backbone().clone()
            } else {
                Arc::new(Backbone::build(&mut pb, d.config().backbone.clone())?)
            };
            Ok(Detector::Regression(RegressionDetector::build(&mut pb, backbone, d.config().clone())?))
        }
    }
}

fn flip_horizontal(sample: &LabeledImage) -> LabeledImage {
    let img = &sample.image;
    let (h, w) = (img.height(), img.width());
    let src = img.pixels();
    let mut px = vec![0f32; src.len()];
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            let row = (c * h + y) * w;
            for x in 0..w {
                px[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    let objects = sample
        .objects
        .iter()
        .map(|o| GroundTruthObject {
            bbox: BoundingBox {
                x_min: w as f64 - o.bbox.x_max,
                x_max: w as f64 - o.bbox.x_min,
                ..o.bbox
            },
            label: o.label,
        })
        .collect();
    LabeledImage {
        image: Image::new(img.id(), h, w, px).expect("flip preserves validity"),
        objects,
    }
}

fn batch_tensor(batch: &[LabeledImage]) -> Result<Tensor> {
    let images: Vec<Image> = batch.iter().map(|s| s.image.clone()).collect();
    Image::batch_to_tensor(&images, DType::F32, &Device::Cpu)
}

/// Objectness / box targets for one image on the proposal grid.
pub(crate) struct RpnTargets {
    pub objectness: Vec<f32>,
    pub weight: Vec<f32>,
    pub deltas: Vec<f32>,
    pub positive: Vec<f32>,
}

pub(crate) fn rpn_targets(
    detector: &ProposalDetector,
    objects: &[GroundTruthObject],
    gh: usize,
    gw: usize,
    stride: usize,
) -> RpnTargets {
    let cells = gh * gw;
    let mut t = RpnTargets {
        objectness: vec![0.0; cells],
        weight: vec![1.0; cells],
        deltas: vec![0.0; 4 * cells],
        positive: vec![0.0; cells],
    };
    let mut assigned: Vec<Option<usize>> = vec![None; cells];
    for row in 0..gh {
        for col in 0..gw {
            let cell = row * gw + col;
            let (ax, ay, a) = detector.anchor(row, col, stride);
            let anchor = BoundingBox::from_center(ax, ay, a, a).expect("positive anchor");
            let best = objects
                .iter()
                .enumerate()
                .map(|(i, o)| (i, anchor.iou(&o.bbox)))
                .max_by(|x, y| x.1.total_cmp(&y.1));
            match best {
                Some((i, v)) if v >= 0.5 => assigned[cell] = Some(i),
                Some((_, v)) if v >= 0.3 => t.weight[cell] = 0.0,
                _ => {}
            }
        }
    }
    for (i, o) in objects.iter().enumerate() {
        let (cx, cy) = o.bbox.center();
        let col = ((cx / stride as f64) as usize).min(gw - 1);
        let row = ((cy / stride as f64) as usize).min(gh - 1);
        assigned[row * gw + col] = Some(i);
    }
    for row in 0..gh {
        for col in 0..gw {
            let cell = row * gw + col;
            if let Some(i) = assigned[cell] {
                let (ax, ay, a) = detector.anchor(row, col, stride);
                let b = objects[i].bbox;
                let (cx, cy) = b.center();
                t.objectness[cell] = 1.0;
                t.weight[cell] = 1.0;
                t.positive[cell] = 1.0;
                t.deltas[cell] = ((cx - ax) / a) as f32;
                t.deltas[cells + cell] = ((cy - ay) / a) as f32;
                t.deltas[2 * cells + cell] = (b.width() / a).ln() as f32;
                t.deltas[3 * cells + cell] = (b.height() / a).ln() as f32;
            }
        }
    }
    t
}

fn proposal_loss(
    d: &ProposalDetector,
    batch: &[LabeledImage],
    cfg: &DetectorTrainConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let x = batch_tensor(batch)?;
    let features = d.backbone().forward(&x)?;
    let rpn: RpnOutput = d.rpn_forward(&features)?;
    let (b, gh, gw) = rpn.objectness.dims3()?;
    let stride = features.stride(features.len() - 1);
    let mut obj_t = Vec::new();
    let mut wt = Vec::new();
    let mut delta_t = Vec::new();
    let mut pos = Vec::new();
    for s in batch {
        let t = rpn_targets(d, &s.objects, gh, gw, stride);
        obj_t.extend(t.objectness);
        wt.extend(t.weight);
        delta_t.extend(t.deltas);
        pos.extend(t.positive);
    }
    let dev = Device::Cpu;
    let obj_t = Tensor::from_vec(obj_t, (b, gh, gw), &dev)?;
    let wt = Tensor::from_vec(wt, (b, gh, gw), &dev)?;
    let delta_t = Tensor::from_vec(delta_t, (b, 4, gh, gw), &dev)?;
    let pos = Tensor::from_vec(pos, (b, 1, gh, gw), &dev)?;
    let obj_loss = ((nn::bce_with_logits(&rpn.objectness, &obj_t)? * &wt)?.sum_all()? / nn::scalar(&wt.sum_all()?)?.max(1.0))?;
    let npos = nn::scalar(&pos.sum_all()?)?.max(1.0);
    let box_loss = (nn::smooth_l1(&rpn.deltas, &delta_t)?.broadcast_mul(&pos)?.sum_all()? / npos)?;

    // Region classifier: ground truths, jittered copies, random boxes and
    // the head's own current proposals, labeled by IOU matching.
    let current = d.decode_proposals(&rpn, &features)?;
    let (img_h, img_w) = features.input_hw();
    let bg = d.background_label();
    let mut regions = Vec::with_capacity(batch.len());
    let mut labels: Vec<u32> = Vec::new();
    for (s, props) in batch.iter().zip(&current) {
        let mut regs: Vec<BoundingBox> = s.objects.iter().map(|o| o.bbox).collect();
        for o in &s.objects {
            for _ in 0..cfg.roi_jitter_per_object {
                let (cx, cy) = o.bbox.center();
                let (w, h) = (o.bbox.width(), o.bbox.height());
                let jx = cx + rng.random_range(-0.3..0.3) * w;
                let jy = cy + rng.random_range(-0.3..0.3) * h;
                let sw = w * rng.random_range(0.7..1.4);
                let sh = h * rng.random_range(0.7..1.4);
                if let Some(b) = BoundingBox::from_center(jx, jy, sw, sh).ok().and_then(|b| b.clip(img_w, img_h)) {
                    regs.push(b);
                }
            }
        }
        for _ in 0..cfg.roi_background_per_image {
            let w = rng.random_range(6.0..24.0);
            let h = rng.random_range(6.0..24.0);
            let x0 = rng.random_range(0.0..(img_w as f64 - w).max(1.0));
            let y0 = rng.random_range(0.0..(img_h as f64 - h).max(1.0));
            if let Some(b) = BoundingBox::new(x0, y0, x0 + w, y0 + h).ok().and_then(|b| b.clip(img_w, img_h)) {
                regs.push(b);
            }
        }
        regs.extend(props.iter().take(cfg.roi_proposals_per_image).map(|p| p.region));
        labels.extend(regs.iter().map(|r| matched_label(r, &s.objects, 0.5, bg) as u32));
        regions.push(regs);
    }
    let logits = d.classify_regions(&features, &regions)?;
    let n = labels.len();
    let labels = Tensor::from_vec(labels, n, &dev)?;
    let cls_loss = candle_nn::loss::cross_entropy(&logits, &labels)?;
    Ok(((obj_loss + box_loss)? + cls_loss)?)
}

const POSITIVE_WEIGHT: f32 = 4.0;

fn regression_loss(d: &RegressionDetector, batch: &[LabeledImage]) -> Result<Tensor> {
    let x = batch_tensor(batch)?;
    let features = d.backbone().forward_until(&x, d.config().regression_layer)?;
    let out = d.head_forward(&features)?;
    let (b, _, gh, gw) = out.dims4()?;
    let cells = gh * gw;
    let s = d.grid_stride() as f64;
    let a = d.config().anchor_size;
    let mut obj_t = vec![0f32; b * cells];
    let mut wt = vec![1f32; b * cells];
    let mut xy_t = vec![0f32; b * 2 * cells];
    let mut wh_t = vec![0f32; b * 2 * cells];
    let mut pos = vec![0f32; b * cells];
    let mut pos_index: Vec<u32> = Vec::new();
    let mut pos_label: Vec<u32> = Vec::new();
    for (bi, sample) in batch.iter().enumerate() {
        let mut cell_label = vec![None; cells];
        for o in &sample.objects {
            let (cx, cy) = o.bbox.center();
            let col = ((cx / s) as usize).min(gw - 1);
            let row = ((cy / s) as usize).min(gh - 1);
            let cell = row * gw + col;
            obj_t[bi * cells + cell] = 1.0;
            wt[bi * cells + cell] = POSITIVE_WEIGHT;
            pos[bi * cells + cell] = 1.0;
            xy_t[(bi * 2) * cells + cell] = (cx / s - col as f64).clamp(0.0, 1.0) as f32;
            xy_t[(bi * 2 + 1) * cells + cell] = (cy / s - row as f64).clamp(0.0, 1.0) as f32;
            wh_t[(bi * 2) * cells + cell] = (o.bbox.width() / a).ln() as f32;
            wh_t[(bi * 2 + 1) * cells + cell] = (o.bbox.height() / a).ln() as f32;
            cell_label[cell] = Some(o.label);
        }
        for (cell, l) in cell_label.iter().enumerate() {
            if let Some(l) = l {
                pos_index.push((bi * cells + cell) as u32);
                pos_label.push(*l as u32);
            }
        }
    }
    let dev = Device::Cpu;
    let obj_t = Tensor::from_vec(obj_t, (b, 1, gh, gw), &dev)?;
    let wt = Tensor::from_vec(wt, (b, 1, gh, gw), &dev)?;
    let xy_t = Tensor::from_vec(xy_t, (b, 2, gh, gw), &dev)?;
    let wh_t = Tensor::from_vec(wh_t, (b, 2, gh, gw), &dev)?;
    let pos = Tensor::from_vec(pos, (b, 1, gh, gw), &dev)?;
    let npos = pos_index.len().max(1) as f64;

    let obj = out.narrow(1, OBJ, 1)?;
    let obj_loss = ((nn::bce_with_logits(&obj, &obj_t)? * &wt)?.sum_all()? / nn::scalar(&wt.sum_all()?)?)?;
    let xy_loss = (nn::bce_with_logits(&out.narrow(1, BOX, 2)?, &xy_t)?.broadcast_mul(&pos)?.sum_all()? / npos)?;
    let wh_loss = (nn::smooth_l1(&out.narrow(1, BOX + 2, 2)?, &wh_t)?.broadcast_mul(&pos)?.sum_all()? / npos)?;
    let mut loss = ((obj_loss + xy_loss)? + wh_loss)?;
    if !pos_index.is_empty() {
        let logits = RegressionDetector::cell_class_logits(&out, d.config().num_classes)?;
        let n = pos_index.len();
        let idx = Tensor::from_vec(pos_index, n, &dev)?;
        let picked = logits.index_select(&idx, 0)?;
        let labels = Tensor::from_vec(pos_label, n, &dev)?;
        loss = (loss + candle_nn::loss::cross_entropy(&picked, &labels)?)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proposal_detector() -> ProposalDetector {
        let mut pb = ParamBuilder::fresh(3, false, DType::F32);
        let cfg = DetectorConfig::default();
        let backbone = Arc::new(Backbone::build(&mut pb, cfg.backbone.clone()).unwrap());
        ProposalDetector::build(&mut pb, backbone, cfg).unwrap()
    }

    #[test]
    fn rpn_targets_mark_center_cell_positive() {
        let d = proposal_detector();
        let obj = GroundTruthObject {
            bbox: BoundingBox::new(18.0, 2.0, 30.0, 14.0).unwrap(),
            label: 1,
        };
        let t = rpn_targets(&d, &[obj], 6, 6, 8);
        // center (24, 8) -> row 1, col 3
        let cell = 6 + 3;
        assert_eq!(t.objectness[cell], 1.0);
        assert_eq!(t.positive.iter().sum::<f32>() as usize, t.objectness.iter().sum::<f32>() as usize);
        assert_eq!(t.objectness[35], 0.0);
        assert_eq!(t.weight[35], 1.0);
        // decoding the target deltas recovers the box
        let (ax, ay, a) = d.anchor(1, 3, 8);
        let cells = 36;
        let cx = ax + f64::from(t.deltas[cell]) * a;
        let w = a * f64::from(t.deltas[2 * cells + cell]).exp();
        assert!((cx - 24.0).abs() < 1e-5);
        assert!((w - 12.0).abs() < 1e-4);
        let _ = ay;
    }

    #[test]
    fn flip_mirrors_boxes() {
        let mut px = vec![0f32; 3 * 16 * 16];
        px[0] = 1.0;
        let s = LabeledImage {
            image: Image::new("a", 16, 16, px).unwrap(),
            objects: vec![GroundTruthObject {
                bbox: BoundingBox::new(0.0, 0.0, 4.0, 3.0).unwrap(),
                label: 0,
            }],
        };
        let f = flip_horizontal(&s);
        assert_eq!(f.image.get(0, 0, 15), 1.0);
        assert_eq!(f.objects[0].bbox, BoundingBox::new(12.0, 0.0, 16.0, 3.0).unwrap());
        assert_eq!(flip_horizontal(&f), s);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let s = LabeledImage {
            image: Image::filled("a", 48, 48, 0.5).unwrap(),
            objects: vec![GroundTruthObject {
                bbox: BoundingBox::new(0.0, 0.0, 4.0, 3.0).unwrap(),
                label: 7,
            }],
        };
        let err = train_toy_detector(
            DetectorFamily::ProposalBased,
            std::slice::from_ref(&s),
            std::slice::from_ref(&s),
            &DetectorConfig::default(),
            &DetectorTrainConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }
}
