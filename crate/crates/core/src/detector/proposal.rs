use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};

use super::{finalize_detections, nms, Backbone, DetectorConfig, FeatureMapSet};
use crate::datamodel::{BoundingBox, Detection, Proposal, ProposalSet};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear, NamedTensors, ParamBuilder};

/// Two-stage detector: an objectness head over the top backbone layer scores
/// one square anchor per cell, then a region classifier pools features under
/// each proposal and predicts `num_classes + 1` logits (background last).
#[derive(Clone, Debug)]
pub struct ProposalDetector {
    backbone: Arc<Backbone>,
    rpn_conv: Conv2d,
    rpn_out: Conv2d,
    roi_fc1: Linear,
    roi_fc2: Linear,
    config: DetectorConfig,
    head_params: NamedTensors,
}

/// Raw proposal-head outputs: objectness logits `(B, h, w)` and box deltas
/// `(B, 4, h, w)`.
pub(crate) struct RpnOutput {
    pub objectness: Tensor,
    pub deltas: Tensor,
}

impl ProposalDetector {
    pub fn build(pb: &mut ParamBuilder, backbone: Arc<Backbone>, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let top = *config.backbone.channels.last().expect("validated");
        let rpn_conv = Conv2d::build(pb, "rpn.conv", top, top, 3, 1)?;
        let rpn_out = Conv2d::build_with(pb, "rpn.out", top, 5, 1, 1, nn::Init::Normal { std: 0.01 })?;
        let bins = config.roi_bins * config.roi_bins;
        let roi_fc1 = Linear::build(pb, "roi.fc1", bins * top, config.roi_hidden)?;
        let roi_fc2 = Linear::build(pb, "roi.fc2", config.roi_hidden, config.num_classes + 1)?;
        let head_params = pb
            .registered()
            .iter()
            .filter(|(k, _)| k.starts_with("rpn.") || k.starts_with("roi."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            backbone,
            rpn_conv,
            rpn_out,
            roi_fc1,
            roi_fc2,
            config,
            head_params,
        })
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn class_count(&self) -> usize {
        self.config.num_classes + 1
    }

    /// Index of the background logit.
    pub fn background_label(&self) -> usize {
        self.config.num_classes
    }

    pub fn head_params(&self) -> &NamedTensors {
        &self.head_params
    }

    fn top_layer(&self, features: &FeatureMapSet) -> usize {
        features.len() - 1
    }

    pub(crate) fn rpn_forward(&self, features: &FeatureMapSet) -> Result<RpnOutput> {
        let top = features.layer(self.top_layer(features));
        let h = self.rpn_conv.forward(top)?.relu()?;
        let out = self.rpn_out.forward(&h)?;
        let objectness = out.narrow(1, 0, 1)?.squeeze(1)?;
        let deltas = out.narrow(1, 1, 4)?;
        Ok(RpnOutput { objectness, deltas })
    }

    /// Anchor box of grid cell `(row, col)`.
    pub(crate) fn anchor(&self, row: usize, col: usize, stride: usize) -> (f64, f64, f64) {
        let s = stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s, self.config.anchor_size)
    }

    /// Scored regions per image, suppressed at `proposal_nms_iou` and cut to
    /// the top `proposal_top_k`, sorted by descending score.
    pub fn propose(&self, features: &FeatureMapSet) -> Result<Vec<ProposalSet>> {
        let rpn = self.rpn_forward(features)?;
        self.decode_proposals(&rpn, features)
    }

    pub(crate) fn decode_proposals(&self, rpn: &RpnOutput, features: &FeatureMapSet) -> Result<Vec<ProposalSet>> {
        let (b, gh, gw) = rpn.objectness.dims3()?;
        let stride = features.stride(self.top_layer(features));
        let (img_h, img_w) = features.input_hw();
        let scores = nn::sigmoid(&rpn.objectness)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let deltas = rpn.deltas.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let cells = gh * gw;
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let mut boxes = Vec::with_capacity(cells);
            let mut box_scores = Vec::with_capacity(cells);
            for row in 0..gh {
                for col in 0..gw {
                    let cell = row * gw + col;
                    let d = |k: usize| deltas[(bi * 4 + k) * cells + cell];
                    let (ax, ay, a) = self.anchor(row, col, stride);
                    let cx = ax + d(0) * a;
                    let cy = ay + d(1) * a;
                    let w = a * d(2).clamp(-3.0, 3.0).exp();
                    let h = a * d(3).clamp(-3.0, 3.0).exp();
                    let Some(bx) = BoundingBox::from_center(cx, cy, w, h)
                        .ok()
                        .and_then(|b| b.clip(img_w, img_h))
                    else {
                        continue;
                    };
                    if bx.width() < 1.0 || bx.height() < 1.0 {
                        continue;
                    }
                    boxes.push(bx);
                    box_scores.push(scores[bi * cells + cell].clamp(0.0, 1.0));
                }
            }
            let keep = nms(&boxes, &box_scores, self.config.proposal_nms_iou);
            let proposals = keep
                .into_iter()
                .take(self.config.proposal_top_k)
                .map(|i| Proposal::new(boxes[i], box_scores[i]))
                .collect();
            out.push(ProposalSet::new(proposals));
        }
        Ok(out)
    }

    /// Pre-softmax class scores for every region, concatenated over images in
    /// order. Differentiable with respect to the features.
    pub fn classify_regions(&self, features: &FeatureMapSet, regions: &[Vec<BoundingBox>]) -> Result<Tensor> {
        let layer = self.top_layer(features);
        let map = features.layer(layer);
        let (b, c, h, w) = map.dims4()?;
        if regions.len() != b {
            return Err(Error::Dimension(format!(
                "{} region lists for a batch of {b}",
                regions.len()
            )));
        }
        let stride = features.stride(layer);
        let bins = self.config.roi_bins;
        let mut pooled = Vec::new();
        for (bi, regs) in regions.iter().enumerate() {
            if regs.is_empty() {
                continue;
            }
            let sampling = roi_sampling_matrix(regs, h, w, stride, bins, map.dtype(), map.device())?;
            let flat = map.get(bi)?.reshape((c, h * w))?.t()?;
            let p = sampling.matmul(&flat)?.reshape((regs.len(), bins * bins * c))?;
            pooled.push(p);
        }
        if pooled.is_empty() {
            return Err(Error::Argument("no regions to classify".into()));
        }
        let x = Tensor::cat(&pooled, 0)?;
        let hidden = self.roi_fc1.forward(&x)?.relu()?;
        self.roi_fc2.forward(&hidden)
    }

    pub(crate) fn detect_from_features(&self, features: &FeatureMapSet, threshold: f64) -> Result<Vec<Vec<Detection>>> {
        let proposals = self.propose(features)?;
        let regions: Vec<Vec<BoundingBox>> = proposals.iter().map(|p| p.regions()).collect();
        let total: usize = regions.iter().map(Vec::len).sum();
        if total == 0 {
            return Ok(vec![Vec::new(); regions.len()]);
        }
        let logits = self.classify_regions(features, &regions)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        let k = self.config.num_classes;
        let mut offset = 0;
        let mut out = Vec::with_capacity(regions.len());
        for regs in &regions {
            let mut raw = Vec::new();
            for (i, r) in regs.iter().enumerate() {
                let p = &probs[offset + i];
                for (class, &conf) in p.iter().enumerate().take(k) {
                    if conf >= threshold {
                        raw.push(Detection::new(*r, class, conf.clamp(0.0, 1.0))?);
                    }
                }
            }
            offset += regs.len();
            out.push(finalize_detections(raw, k, self.config.nms_iou, self.config.max_detections));
        }
        Ok(out)
    }
}

/// Bilinear region pooling as a constant `(N·bins², h·w)` matrix: each row
/// averages a 2x2 grid of bilinear samples inside one bin.
pub(crate) fn roi_sampling_matrix(
    regions: &[BoundingBox],
    h: usize,
    w: usize,
    stride: usize,
    bins: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    const SAMPLES: usize = 2;
    let rows = regions.len() * bins * bins;
    let mut m = vec![0f64; rows * h * w];
    let s = stride as f64;
    let weight = 1.0 / (SAMPLES * SAMPLES) as f64;
    for (ri, r) in regions.iter().enumerate() {
        let bin_w = r.width() / bins as f64;
        let bin_h = r.height() / bins as f64;
        for by in 0..bins {
            for bx in 0..bins {
                let row = (ri * bins + by) * bins + bx;
                let base = &mut m[row * h * w..(row + 1) * h * w];
                for sy in 0..SAMPLES {
                    for sx in 0..SAMPLES {
                        let px = r.x_min + (bx as f64 + (sx as f64 + 0.5) / SAMPLES as f64) * bin_w;
                        let py = r.y_min + (by as f64 + (sy as f64 + 0.5) / SAMPLES as f64) * bin_h;
                        let fx = (px / s - 0.5).clamp(0.0, (w - 1) as f64);
                        let fy = (py / s - 0.5).clamp(0.0, (h - 1) as f64);
                        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                        base[y0 * w + x0] += weight * (1.0 - ax) * (1.0 - ay);
                        base[y0 * w + x1] += weight * ax * (1.0 - ay);
                        base[y1 * w + x0] += weight * (1.0 - ax) * ay;
                        base[y1 * w + x1] += weight * ax * ay;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(m, (rows, h * w), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_rows_are_convex_weights() {
        let r = BoundingBox::new(3.0, 5.0, 20.0, 17.0).unwrap();
        let m = roi_sampling_matrix(&[r], 6, 6, 8, 3, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(m.dims(), &[9, 36]);
        for row in m.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn pooling_a_constant_map_returns_the_constant() {
        let r = BoundingBox::new(0.0, 0.0, 48.0, 30.0).unwrap();
        let m = roi_sampling_matrix(&[r], 6, 6, 8, 2, DType::F64, &Device::Cpu).unwrap();
        let map = Tensor::full(2.5f64, (36, 1), &Device::Cpu).unwrap();
        let pooled = m.matmul(&map).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(pooled.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
