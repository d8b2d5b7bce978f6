//! Fooling criterion, VOC-style average precision, mAP drop, timing and
//! perceptibility.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BoundingBox, Detection, GroundTruthObject, Image, LabeledImage};
use crate::detector::{Detector, DetectorFamily};
use crate::error::{ensure, Error, Result};

/// An object counts as fooled when it is not detected, detected with IOU
/// below 0.5, or detected with the wrong label. IOU of exactly 0.5 is a hit.
pub fn is_fooled(gt: &GroundTruthObject, det: Option<&Detection>) -> bool {
    match det {
        None => true,
        Some(d) => d.bbox.iou(&gt.bbox) < 0.5 || d.label != gt.label,
    }
}

/// Applies [`is_fooled`] against every detection: the object survives if any
/// single detection still hits it.
pub fn object_fooled(gt: &GroundTruthObject, detections: &[Detection]) -> bool {
    detections.iter().all(|d| is_fooled(gt, Some(d)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// VOC-2007: mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

/// A single-class detection tagged with the image it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedDetection {
    pub image: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall after each detection in descending-confidence order.
///
/// Each detection is matched to the ground truth of its image with the
/// highest IOU; it is a true positive when that IOU reaches the threshold
/// and the ground truth is still unmatched. Equal confidences keep input
/// order.
pub fn precision_recall_curve(
    detections: &[RankedDetection],
    ground_truths: &[Vec<BoundingBox>],
    iou_threshold: f64,
) -> Vec<PrecisionRecall> {
    let n_gt: usize = ground_truths.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    let mut used: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(detections.len());
    for i in order {
        let d = &detections[i];
        let gts = ground_truths.get(d.image).map(Vec::as_slice).unwrap_or(&[]);
        let best = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (j, g.iou(&d.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= iou_threshold && !used[d.image][j] => {
                used[d.image][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push(PrecisionRecall {
            precision: tp as f64 / (tp + fp) as f64,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
        });
    }
    curve
}

/// Average precision of one class. `None` when the class has neither ground
/// truths nor detections (it then takes no part in the mean).
pub fn average_precision(
    detections: &[RankedDetection],
    ground_truths: &[Vec<BoundingBox>],
    iou_threshold: f64,
    method: ApMethod,
) -> Option<f64> {
    let n_gt: usize = ground_truths.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return if detections.is_empty() { None } else { Some(0.0) };
    }
    let curve = precision_recall_curve(detections, ground_truths, iou_threshold);
    Some(match method {
        ApMethod::ElevenPoint => eleven_point(&curve),
        ApMethod::AllPoint => all_point(&curve),
    })
}

fn eleven_point(curve: &[PrecisionRecall]) -> f64 {
    (0..=10)
        .map(|i| {
            let t = i as f64 / 10.0;
            curve
                .iter()
                .filter(|p| p.recall >= t)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

fn all_point(curve: &[PrecisionRecall]) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    recall.extend(curve.iter().map(|p| p.recall));
    precision.extend(curve.iter().map(|p| p.precision));
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// `None` for classes absent from both detections and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

pub fn mean_average_precision(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruthObject>],
    num_classes: usize,
    iou_threshold: f64,
    method: ApMethod,
) -> MapResult {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|class| {
            let dets: Vec<RankedDetection> = detections
                .iter()
                .enumerate()
                .flat_map(|(image, ds)| {
                    ds.iter().filter(|d| d.label == class).map(move |d| RankedDetection {
                        image,
                        bbox: d.bbox,
                        confidence: d.confidence,
                    })
                })
                .collect();
            let gts: Vec<Vec<BoundingBox>> = ground_truths
                .iter()
                .map(|g| g.iter().filter(|o| o.label == class).map(|o| o.bbox).collect())
                .collect();
            average_precision(&dets, &gts, iou_threshold, method)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapResult { per_class, map }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Perceptibility {
    /// Mean over pixels of the L2 norm of the per-pixel channel difference.
    pub mean_l2: f64,
    /// Largest absolute channel difference.
    pub linf: f64,
}

pub fn perceptibility(clean: &Image, adv: &Image) -> Result<Perceptibility> {
    ensure!(
        clean.dims() == adv.dims(),
        Dimension,
        "images {} {:?} and {} {:?} differ in shape",
        clean.id(),
        clean.dims(),
        adv.id(),
        adv.dims()
    );
    let (c, h, w) = clean.dims();
    let (a, b) = (clean.pixels(), adv.pixels());
    let plane = h * w;
    let mut l2_sum = 0.0;
    let mut linf = 0.0f64;
    for p in 0..plane {
        let mut sq = 0.0;
        for ch in 0..c {
            let d = f64::from(b[ch * plane + p]) - f64::from(a[ch * plane + p]);
            sq += d * d;
            linf = linf.max(d.abs());
        }
        l2_sum += sq.sqrt();
    }
    Ok(Perceptibility {
        mean_l2: l2_sum / plane as f64,
        linf,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub runs: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
    pub per_image: Vec<f64>,
}

impl TimingStats {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n.max(1) as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
        };
        Self {
            runs: n,
            mean,
            median,
            stddev: var.sqrt(),
            per_image: samples,
        }
    }

    /// Coefficient of variation, `stddev / mean`.
    pub fn cv(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.stddev / self.mean
        }
    }
}

/// Wall-time per image of `attack`, after `warmup` untimed calls. Only the
/// attack call is timed; evaluation happens elsewhere.
pub fn timing_benchmark<T>(
    mut attack: impl FnMut(&Image) -> Result<T>,
    images: &[Image],
    warmup: usize,
) -> Result<TimingStats> {
    ensure!(
        images.len() >= 5,
        Argument,
        "timing needs at least 5 images, got {}",
        images.len()
    );
    for img in images.iter().cycle().take(warmup) {
        attack(img)?;
    }
    let mut samples = Vec::with_capacity(images.len());
    for img in images {
        let start = Instant::now();
        let out = attack(img)?;
        samples.push(start.elapsed().as_secs_f64());
        drop(out);
    }
    Ok(TimingStats::from_samples(samples))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub method: ApMethod,
    /// Confidence threshold the fooling predicate uses.
    pub deployment_threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            method: ApMethod::ElevenPoint,
            deployment_threshold: 0.5,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub objects: usize,
    /// Objects detected on the clean image and fooled on the adversarial one.
    pub fooled_objects: usize,
    /// Every object fooled on the adversarial image.
    pub fooled: bool,
    pub perceptibility: Perceptibility,
    pub attack_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: DetectorFamily,
    pub clean_per_class_ap: Vec<Option<f64>>,
    pub per_class_ap: Vec<Option<f64>>,
    pub clean_map: f64,
    pub map: f64,
    pub map_drop: f64,
    pub mean_attack_seconds: Option<f64>,
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub images: Vec<ImageRecord>,
}

/// Runs `detector` on aligned clean and adversarial sets and aggregates
/// mAP before and after, the per-object fooling outcome, perceptibility and
/// (when given) per-image attack time.
pub fn evaluate_attack(
    detector: &Detector,
    clean: &[LabeledImage],
    adversarial: &[Image],
    attack_seconds: Option<&[f64]>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    ensure!(
        clean.len() == adversarial.len(),
        Argument,
        "{} clean images but {} adversarial images",
        clean.len(),
        adversarial.len()
    );
    if let Some(t) = attack_seconds {
        ensure!(t.len() == clean.len(), Argument, "{} timings for {} images", t.len(), clean.len());
    }
    for (c, a) in clean.iter().zip(adversarial) {
        if c.image.id() != a.id() || c.image.dims() != a.dims() {
            return Err(Error::Argument(format!(
                "clean image {} {:?} is paired with {} {:?}",
                c.image.id(),
                c.image.dims(),
                a.id(),
                a.dims()
            )));
        }
    }
    let clean_images: Vec<Image> = clean.iter().map(|s| s.image.clone()).collect();
    let truth: Vec<Vec<GroundTruthObject>> = clean.iter().map(|s| s.objects.clone()).collect();
    let num_classes = detector.config().num_classes;
    let clean_dets = detector.detect_all(&clean_images, 0.0, settings.batch_size)?;
    let adv_dets = detector.detect_all(adversarial, 0.0, settings.batch_size)?;
    let clean_map = mean_average_precision(&clean_dets, &truth, num_classes, settings.iou_threshold, settings.method);
    let adv_map = mean_average_precision(&adv_dets, &truth, num_classes, settings.iou_threshold, settings.method);

    let deployed = |ds: &[Detection]| -> Vec<Detection> {
        ds.iter()
            .filter(|d| d.confidence >= settings.deployment_threshold)
            .copied()
            .collect()
    };
    let mut images = Vec::with_capacity(clean.len());
    for (i, sample) in clean.iter().enumerate() {
        let before = deployed(&clean_dets[i]);
        let after = deployed(&adv_dets[i]);
        let fooled_objects = sample
            .objects
            .iter()
            .filter(|o| !object_fooled(o, &before) && object_fooled(o, &after))
            .count();
        let fooled = sample.objects.iter().all(|o| object_fooled(o, &after));
        images.push(ImageRecord {
            id: sample.image.id().to_string(),
            objects: sample.objects.len(),
            fooled_objects,
            fooled,
            perceptibility: perceptibility(&sample.image, &adversarial[i])?,
            attack_seconds: attack_seconds.map(|t| t[i]),
        });
    }
    let n = images.len().max(1) as f64;
    Ok(EvalReport {
        detector: detector.family(),
        clean_per_class_ap: clean_map.per_class,
        per_class_ap: adv_map.per_class,
        clean_map: clean_map.map,
        map: adv_map.map,
        map_drop: clean_map.map - adv_map.map,
        mean_attack_seconds: attack_seconds.map(|t| t.iter().sum::<f64>() / n),
        mean_l2: images.iter().map(|r| r.perceptibility.mean_l2).sum::<f64>() / n,
        mean_linf: images.iter().map(|r| r.perceptibility.linf).sum::<f64>() / n,
        images,
    })
}

/// Rows: clean / attack methods. Columns: victim detectors, then time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub victims: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub maps: Vec<f64>,
    pub seconds: Option<f64>,
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        let col_w = self.victims.iter().map(String::len).max().unwrap_or(0).max(8);
        write!(f, "{:<label_w$}", "")?;
        for v in &self.victims {
            write!(f, " | {v:>col_w$}")?;
        }
        writeln!(f, " | {:>10}", "time (s)")?;
        writeln!(f, "{}", "-".repeat(label_w + (col_w + 3) * self.victims.len() + 13))?;
        for row in &self.rows {
            write!(f, "{:<label_w$}", row.label)?;
            for m in &row.maps {
                write!(f, " | {m:>col_w$.3}")?;
            }
            match row.seconds {
                Some(s) => writeln!(f, " | {s:>10.4}")?,
                None => writeln!(f, " | {:>10}", "-")?,
            }
        }
        Ok(())
    }
}
