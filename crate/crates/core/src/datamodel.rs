//! Core value types: images, boxes, ground truth, detections and proposals.
//!
//! Pixels are always in `[0, 1]`, stored channel-major (`C×H×W`) with three
//! channels. Boxes use continuous corner coordinates where pixel `(x, y)`
//! spans `[x, x+1) × [y, y+1)`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;
    pub const MIN_SIDE: usize = 16;

    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        ensure!(
            height >= Self::MIN_SIDE && width >= Self::MIN_SIDE,
            Dimension,
            "image is {height}x{width}, both sides must be at least {}",
            Self::MIN_SIDE
        );
        ensure!(
            pixels.len() == Self::CHANNELS * height * width,
            Dimension,
            "expected {} pixel values for 3x{height}x{width}, got {}",
            Self::CHANNELS * height * width,
            pixels.len()
        );
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(id, height, width, vec![value; Self::CHANNELS * height * width])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (Self::CHANNELS, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.pixels[(channel * self.height + y) * self.width + x]
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (1, Self::CHANNELS, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks same-sized images into a `(B, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * Self::CHANNELS * h * w);
        for img in images {
            ensure!(
                img.height == h && img.width == w,
                Dimension,
                "image {} is {}x{}, batch expects {h}x{w}",
                img.id,
                img.height,
                img.width
            );
            data.extend_from_slice(&img.pixels);
        }
        let t = Tensor::from_vec(data, (images.len(), Self::CHANNELS, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Builds an image from a `(3, H, W)` or `(1, 3, H, W)` tensor.
    pub fn from_tensor(id: impl Into<String>, tensor: &Tensor) -> Result<Self> {
        let t = match tensor.rank() {
            4 => tensor.squeeze(0)?,
            3 => tensor.clone(),
            r => return Err(Error::Dimension(format!("expected rank 3 or 4 image tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        ensure!(c == Self::CHANNELS, Dimension, "expected 3 channels, got {c}");
        let pixels = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(id, h, w, pixels)
    }

    /// Splits a `(B, 3, H, W)` tensor into images, reusing the given ids.
    pub fn unbatch(ids: &[&str], tensor: &Tensor) -> Result<Vec<Self>> {
        let b = tensor.dim(0)?;
        ensure!(b == ids.len(), Dimension, "{} ids for a batch of {b}", ids.len());
        ids.iter()
            .enumerate()
            .map(|(i, id)| Self::from_tensor(*id, &tensor.get(i)?))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        ensure!(
            [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()),
            Argument,
            "non-finite box coordinate"
        );
        ensure!(
            x_min < x_max && y_min < y_max,
            Argument,
            "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
        );
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Clips to `[0, width] × [0, height]`; `None` when nothing is left.
    pub fn clip(&self, width: usize, height: usize) -> Option<Self> {
        let (w, h) = (width as f64, height as f64);
        Self::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
        .ok()
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Whether the center of pixel `(x, y)` lies inside the box
    /// (min edges inclusive, max edges exclusive).
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px >= self.x_min && px < self.x_max && py >= self.y_min && py < self.y_max
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: BoundingBox,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub label: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, label: usize, confidence: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&confidence),
            Argument,
            "confidence {confidence} outside [0, 1]"
        );
        Ok(Self {
            bbox,
            label,
            confidence,
        })
    }
}

/// A scored candidate region. `true_label` and `adversarial_label` are filled
/// in by the attack code; once both are set they always differ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub region: BoundingBox,
    pub score: f64,
    pub true_label: Option<usize>,
    pub adversarial_label: Option<usize>,
}

impl Proposal {
    pub fn new(region: BoundingBox, score: f64) -> Self {
        Self {
            region,
            score,
            true_label: None,
            adversarial_label: None,
        }
    }
}

/// Proposals sorted by descending score (stable for ties).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(mut proposals: Vec<Proposal>) -> Self {
        proposals.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self { proposals }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn as_slice(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Proposal> {
        self.proposals.iter()
    }

    pub fn into_vec(self) -> Vec<Proposal> {
        self.proposals
    }

    pub fn top_k(&self, k: usize) -> Self {
        Self {
            proposals: self.proposals.iter().take(k).copied().collect(),
        }
    }

    pub fn regions(&self) -> Vec<BoundingBox> {
        self.proposals.iter().map(|p| p.region).collect()
    }

    /// Keeps proposals matching `keep`, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&Proposal) -> bool) -> Self {
        Self {
            proposals: self.proposals.iter().filter(|p| keep(p)).copied().collect(),
        }
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [Proposal] {
        &mut self.proposals
    }
}

impl<'a> IntoIterator for &'a ProposalSet {
    type Item = &'a Proposal;
    type IntoIter = std::slice::Iter<'a, Proposal>;
    fn into_iter(self) -> Self::IntoIter {
        self.proposals.iter()
    }
}

/// Label of the ground-truth object overlapping `region` most, if that IOU
/// reaches `min_iou`; `background` otherwise.
pub fn matched_label(region: &BoundingBox, objects: &[GroundTruthObject], min_iou: f64, background: usize) -> usize {
    objects
        .iter()
        .map(|o| (o.label, region.iou(&o.bbox)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|&(_, v)| v >= min_iou)
        .map_or(background, |(l, _)| l)
}

/// An image together with its annotated objects.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Image>,
    fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, fps: f64) -> Result<Self> {
        ensure!(fps.is_finite() && fps > 0.0, Argument, "fps must be positive, got {fps}");
        if let Some(first) = frames.first() {
            for f in &frames {
                ensure!(
                    f.height() == first.height() && f.width() == first.width(),
                    Format,
                    "frame {} is {}x{}, sequence is {}x{}",
                    f.id(),
                    f.height(),
                    f.width(),
                    first.height(),
                    first.width()
                );
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&a, &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_intersect() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(bx(-5.0, -5.0, -1.0, -1.0).clip(10, 10).is_none());
        assert_eq!(bx(-5.0, 2.0, 20.0, 4.0).clip(10, 10), Some(bx(0.0, 2.0, 10.0, 4.0)));
    }

    #[test]
    fn image_invariants() {
        assert!(Image::filled("a", 15, 16, 0.0).is_err());
        assert!(Image::filled("a", 16, 16, 1.5).is_err());
        assert!(Image::new("a", 16, 16, vec![0.0; 10]).is_err());
        let img = Image::filled("a", 16, 20, 0.25).unwrap();
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 16, 20]);
        assert_eq!(Image::from_tensor("a", &t).unwrap(), img);
    }

    #[test]
    fn proposal_set_sorted_and_stable() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let set = ProposalSet::new(vec![
            Proposal::new(b, 0.2),
            Proposal::new(bx(0.0, 0.0, 2.0, 2.0), 0.9),
            Proposal::new(bx(0.0, 0.0, 3.0, 3.0), 0.2),
        ]);
        let scores: Vec<f64> = set.iter().map(|p| p.score).collect();
        assert_eq!(scores, vec![0.9, 0.2, 0.2]);
        assert_eq!(set.as_slice()[1].region, b);
        assert_eq!(set.top_k(1).len(), 1);
    }

    #[test]
    fn frame_sequence_rejects_mixed_sizes() {
        let a = Image::filled("f1", 16, 16, 0.0).unwrap();
        let b = Image::filled("f2", 16, 24, 0.0).unwrap();
        let err = FrameSequence::new(vec![a.clone(), b], 25.0).unwrap_err();
        assert!(err.to_string().contains("f2"));
        assert!(FrameSequence::new(vec![a], 0.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }
}
