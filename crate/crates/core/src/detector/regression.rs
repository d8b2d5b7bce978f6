use std::sync::Arc;

use candle_core::{DType, Tensor};

use super::{finalize_detections, Backbone, DetectorConfig, FeatureMapSet};
use crate::datamodel::{BoundingBox, Detection};
use crate::error::Result;
use crate::nn::{self, Conv2d, NamedTensors, ParamBuilder};

/// One-stage detector: every cell of a stride-`total_stride` grid predicts
/// objectness, a box (offset inside the cell plus log size relative to the
/// anchor) and class logits. Reads `regression_layer` of the backbone
/// through its own two conv layers.
#[derive(Clone, Debug)]
pub struct RegressionDetector {
    backbone: Arc<Backbone>,
    conv1: Conv2d,
    conv2: Conv2d,
    out: Conv2d,
    config: DetectorConfig,
    head_params: NamedTensors,
}

/// Channel layout of the head output.
pub(crate) const OBJ: usize = 0;
pub(crate) const BOX: usize = 1;
pub(crate) const CLS: usize = 5;

impl RegressionDetector {
    pub fn build(pb: &mut ParamBuilder, backbone: Arc<Backbone>, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let layer = config.regression_layer;
        let in_ch = config.backbone.channels[layer];
        let head_stride = config.backbone.total_stride() / config.backbone.cumulative_strides()[layer];
        let ch = config.regression_channels;
        let conv1 = Conv2d::build(pb, "reg.conv1", in_ch, ch, 3, head_stride)?;
        let conv2 = Conv2d::build(pb, "reg.conv2", ch, ch, 3, 1)?;
        let out = Conv2d::build_with(pb, "reg.out", ch, CLS + config.num_classes, 1, 1, nn::Init::Normal { std: 0.01 })?;
        let head_params = pb
            .registered()
            .iter()
            .filter(|(k, _)| k.starts_with("reg."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            backbone,
            conv1,
            conv2,
            out,
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
        self.config.num_classes
    }

    pub fn head_params(&self) -> &NamedTensors {
        &self.head_params
    }

    pub fn grid_stride(&self) -> usize {
        self.config.backbone.total_stride()
    }

    /// `(B, 5 + K, gh, gw)` raw head output.
    pub(crate) fn head_forward(&self, features: &FeatureMapSet) -> Result<Tensor> {
        let x = features.layer(self.config.regression_layer);
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?.relu()?;
        self.out.forward(&h)
    }

    pub(crate) fn detect_from_features(&self, features: &FeatureMapSet, threshold: f64) -> Result<Vec<Vec<Detection>>> {
        let out = self.head_forward(features)?;
        let (b, _, gh, gw) = out.dims4()?;
        let k = self.config.num_classes;
        let obj = nn::sigmoid(&out.narrow(1, OBJ, 1)?)?;
        let xy = nn::sigmoid(&out.narrow(1, BOX, 2)?)?;
        let wh = out.narrow(1, BOX + 2, 2)?.clamp(-3.0, 3.0)?.exp()?;
        let cls = candle_nn::ops::softmax(&out.narrow(1, CLS, k)?, 1)?;
        let conf = cls.broadcast_mul(&obj)?;
        let to_vec = |t: Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?) };
        let (xy, wh, conf) = (to_vec(xy)?, to_vec(wh)?, to_vec(conf)?);
        let cells = gh * gw;
        let s = self.grid_stride() as f64;
        let (img_h, img_w) = features.input_hw();
        let mut all = Vec::with_capacity(b);
        for bi in 0..b {
            let mut raw = Vec::new();
            for row in 0..gh {
                for col in 0..gw {
                    let cell = row * gw + col;
                    let cx = (col as f64 + xy[(bi * 2) * cells + cell]) * s;
                    let cy = (row as f64 + xy[(bi * 2 + 1) * cells + cell]) * s;
                    let w = self.config.anchor_size * wh[(bi * 2) * cells + cell];
                    let h = self.config.anchor_size * wh[(bi * 2 + 1) * cells + cell];
                    let Some(bx) = BoundingBox::from_center(cx, cy, w, h)
                        .ok()
                        .and_then(|b| b.clip(img_w, img_h))
                    else {
                        continue;
                    };
                    for class in 0..k {
                        let c = conf[(bi * k + class) * cells + cell].clamp(0.0, 1.0);
                        if c >= threshold {
                            raw.push(Detection::new(bx, class, c)?);
                        }
                    }
                }
            }
            all.push(finalize_detections(raw, k, self.config.nms_iou, self.config.max_detections));
        }
        Ok(all)
    }

    /// Class logits of every cell, `(B·gh·gw, K)`, in row-major cell order.
    pub(crate) fn cell_class_logits(out: &Tensor, num_classes: usize) -> Result<Tensor> {
        let cls = out.narrow(1, CLS, num_classes)?;
        let (b, k, gh, gw) = cls.dims4()?;
        Ok(cls.permute((0, 2, 3, 1))?.reshape((b * gh * gw, k))?)
    }
}
