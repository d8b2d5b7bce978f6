//! Desk-scale victim detectors.
//!
//! Both detector families sit on the same convolutional [`Backbone`]: a
//! proposal-based detector (objectness head producing scored regions, then a
//! region classifier over pooled features) and a regression-based detector
//! (grid cells directly regress boxes and classes). Two of the backbone's
//! layers are designated as attackable feature layers.

mod backbone;
mod proposal;
mod regression;
mod train;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig, BackboneToken, FeatureMapSet};
pub use proposal::ProposalDetector;
pub use regression::RegressionDetector;
pub use train::{train_detector_pair, train_toy_detector, DetectorTrainConfig, TrainingSummary};

use crate::datamodel::{BoundingBox, Detection, Image, ProposalSet};
use crate::error::{Error, Result};
use crate::nn::{NamedTensors, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorFamily {
    ProposalBased,
    RegressionBased,
}

impl DetectorFamily {
    pub fn name(self) -> &'static str {
        match self {
            DetectorFamily::ProposalBased => "proposal-based",
            DetectorFamily::RegressionBased => "regression-based",
        }
    }
}

/// Identity card of a trained detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorHandle {
    pub family: DetectorFamily,
    pub backbone: BackboneToken,
    /// Length of the class score vector (includes background for
    /// proposal-based detectors).
    pub class_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Object classes, excluding background.
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    /// Side of the single square anchor, in pixels.
    pub anchor_size: f64,
    /// Region-classifier pooling grid is `roi_bins × roi_bins`.
    pub roi_bins: usize,
    pub roi_hidden: usize,
    /// IOU used to suppress overlapping proposals.
    pub proposal_nms_iou: f64,
    /// Proposals kept after suppression.
    pub proposal_top_k: usize,
    /// IOU used for final per-class suppression.
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Backbone layer the regression head reads.
    pub regression_layer: usize,
    pub regression_channels: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone: BackboneConfig::default(),
            anchor_size: 16.0,
            roi_bins: 3,
            roi_hidden: 128,
            proposal_nms_iou: 0.7,
            proposal_top_k: 300,
            nms_iou: 0.45,
            max_detections: 100,
            regression_layer: 4,
            regression_channels: 64,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Argument("num_classes must be positive".into()));
        }
        if self.regression_layer >= self.backbone.channels.len() {
            return Err(Error::Argument(format!(
                "regression_layer {} out of range",
                self.regression_layer
            )));
        }
        let layer_stride = self.backbone.cumulative_strides()[self.regression_layer];
        let top = self.backbone.total_stride();
        if top % layer_stride != 0 {
            return Err(Error::Argument(format!(
                "regression layer stride {layer_stride} does not divide grid stride {top}"
            )));
        }
        if !(self.anchor_size > 0.0) || self.roi_bins == 0 || self.proposal_top_k == 0 {
            return Err(Error::Argument("anchor_size, roi_bins and proposal_top_k must be positive".into()));
        }
        Ok(())
    }
}

/// A trained detector of either family. Weights are frozen tensors.
#[derive(Clone, Debug)]
pub enum Detector {
    Proposal(ProposalDetector),
    Regression(RegressionDetector),
}

impl Detector {
    pub fn family(&self) -> DetectorFamily {
        match self {
            Detector::Proposal(_) => DetectorFamily::ProposalBased,
            Detector::Regression(_) => DetectorFamily::RegressionBased,
        }
    }

    pub fn handle(&self) -> DetectorHandle {
        let class_count = match self {
            Detector::Proposal(d) => d.class_count(),
            Detector::Regression(d) => d.class_count(),
        };
        DetectorHandle {
            family: self.family(),
            backbone: self.backbone().token(),
            class_count,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        match self {
            Detector::Proposal(d) => d.config(),
            Detector::Regression(d) => d.config(),
        }
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        match self {
            Detector::Proposal(d) => d.backbone(),
            Detector::Regression(d) => d.backbone(),
        }
    }

    pub fn as_proposal(&self) -> Result<&ProposalDetector> {
        match self {
            Detector::Proposal(d) => Ok(d),
            Detector::Regression(_) => Err(Error::Capability {
                family: DetectorFamily::RegressionBased.name(),
                capability: "region proposals",
            }),
        }
    }

    pub fn extract_features(&self, image: &Image) -> Result<FeatureMapSet> {
        let x = image.to_tensor(self.backbone().dtype(), &Device::Cpu)?;
        self.backbone().forward(&x)
    }

    pub fn propose(&self, features: &FeatureMapSet) -> Result<Vec<ProposalSet>> {
        self.as_proposal()?.propose(features)
    }

    /// Pre-softmax class scores of one region of the first image in `features`.
    pub fn classify_proposal(&self, features: &FeatureMapSet, region: &BoundingBox) -> Result<Tensor> {
        let d = self.as_proposal()?;
        let logits = d.classify_regions(features, &[vec![*region]])?;
        Ok(logits.squeeze(0)?)
    }

    pub fn detect(&self, image: &Image, score_threshold: f64) -> Result<Vec<Detection>> {
        Ok(self
            .detect_batch(std::slice::from_ref(image), score_threshold)?
            .pop()
            .unwrap_or_default())
    }

    pub fn detect_batch(&self, images: &[Image], score_threshold: f64) -> Result<Vec<Vec<Detection>>> {
        if !(0.0..=1.0).contains(&score_threshold) {
            return Err(Error::Argument(format!(
                "score threshold {score_threshold} outside [0, 1]"
            )));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = Image::batch_to_tensor(images, self.backbone().dtype(), &Device::Cpu)?;
        let features = self.backbone().forward(&x)?;
        match self {
            Detector::Proposal(d) => d.detect_from_features(&features, score_threshold),
            Detector::Regression(d) => d.detect_from_features(&features, score_threshold),
        }
    }

    /// Detections for many images, batched in chunks of `batch`.
    pub fn detect_all(&self, images: &[Image], score_threshold: f64, batch: usize) -> Result<Vec<Vec<Detection>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            out.extend(self.detect_batch(chunk, score_threshold)?);
        }
        Ok(out)
    }

    /// All weights, backbone included.
    pub fn params(&self) -> NamedTensors {
        let mut all = self.backbone().params().clone();
        let heads = match self {
            Detector::Proposal(d) => d.head_params(),
            Detector::Regression(d) => d.head_params(),
        };
        all.extend(heads.iter().map(|(k, v)| (k.clone(), v.clone())));
        all
    }

    /// Same detector with weights converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let params = self.params();
        let mut pb = ParamBuilder::frozen(&params, dtype);
        let backbone = Arc::new(Backbone::build(&mut pb, self.config().backbone.clone())?);
        Ok(match self {
            Detector::Proposal(d) => {
                Detector::Proposal(ProposalDetector::build(&mut pb, backbone, d.config().clone())?)
            }
            Detector::Regression(d) => {
                Detector::Regression(RegressionDetector::build(&mut pb, backbone, d.config().clone())?)
            }
        })
    }
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; ties keep input order.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Per-class suppression, confidence sort and truncation of raw detections.
pub(crate) fn finalize_detections(raw: Vec<Detection>, num_classes: usize, iou: f64, max: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for class in 0..num_classes {
        let of_class: Vec<Detection> = raw.iter().filter(|d| d.label == class).copied().collect();
        let boxes: Vec<BoundingBox> = of_class.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = of_class.iter().map(|d| d.confidence).collect();
        out.extend(nms(&boxes, &scores, iou).into_iter().map(|i| of_class[i]));
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out.truncate(max);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_keeps_highest_of_overlapping() {
        let b = |x: f64| BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
        let boxes = [b(0.0), b(1.0), b(30.0)];
        let keep = nms(&boxes, &[0.5, 0.9, 0.1], 0.45);
        assert_eq!(keep, vec![1, 2]);
        assert_eq!(nms(&boxes, &[0.5, 0.9, 0.1], 1.0), vec![1, 0, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        let bad = DetectorConfig {
            regression_layer: 9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
