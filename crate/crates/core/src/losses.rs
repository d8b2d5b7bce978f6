//! Loss terms of the generator objective: the GAN game, the L2 similarity,
//! the proposal class loss and the attention-weighted feature loss, plus
//! proposal selection and adversarial label assignment.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{matched_label, GroundTruthObject, ProposalSet};
use crate::error::{ensure, Error, Result};
use crate::nn::{self, NamedTensors};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
const PROB_EPS: f64 = 1e-7;
/// Proposal score threshold for the attacked set.
pub const ATTACK_SCORE_THRESHOLD: f64 = 0.7;
/// IOU a proposal needs with a ground-truth box to inherit its label.
pub const MATCH_IOU: f64 = 0.5;

fn check_probabilities(p: &Tensor, what: &str) -> Result<()> {
    let values = p.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    ensure!(!values.is_empty(), Argument, "{what} is empty");
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("{what} contains {v}, outside [0, 1]")));
    }
    Ok(())
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// `-[log d_real + log(1 - d_fake)]`, batch mean. Inputs are probabilities.
pub fn gan_discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    check_probabilities(d_real, "discriminator output on real images")?;
    check_probabilities(d_fake, "discriminator output on generated images")?;
    let real = clamp_prob(d_real)?.log()?.mean_all()?;
    let fake = clamp_prob(d_fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// Non-saturating generator term `-log d_fake`, batch mean.
pub fn gan_generator_loss(d_fake: &Tensor) -> Result<Tensor> {
    check_probabilities(d_fake, "discriminator output on generated images")?;
    Ok(clamp_prob(d_fake)?.log()?.mean_all()?.neg()?)
}

/// `sqrt(sum_sq)` with the exact value and gradient for positive input and a
/// zero gradient at zero, where the plain square root has none.
fn safe_sqrt(sum_sq: &Tensor) -> Result<Tensor> {
    let d = sum_sq.detach().sqrt()?;
    let denom = d.clamp(1e-12, f64::MAX)?;
    Ok(((sum_sq.div(&denom)? * 0.5)? + (d * 0.5)?)?)
}

/// Per-sample sum of squares over every axis but the first, `(B,)`.
fn per_sample_sum_sq(t: &Tensor) -> Result<Tensor> {
    let b = t.dim(0)?;
    Ok(t.sqr()?.reshape((b, ()))?.sum(1)?)
}

fn norm_or_squared(sum_sq: &Tensor, squared: bool) -> Result<Tensor> {
    if squared {
        Ok(sum_sq.clone())
    } else {
        safe_sqrt(sum_sq)
    }
}

/// Euclidean norm of the flattened per-sample difference, averaged over the
/// batch. `squared` switches to the squared norm.
pub fn l2_similarity(clean: &Tensor, adv: &Tensor, squared: bool) -> Result<Tensor> {
    ensure!(
        clean.dims() == adv.dims() && clean.rank() >= 1,
        Dimension,
        "l2 similarity between shapes {:?} and {:?}",
        clean.dims(),
        adv.dims()
    );
    let diff = (adv - clean)?;
    Ok(norm_or_squared(&per_sample_sum_sq(&diff)?, squared)?.mean_all()?)
}

/// Plain-number version of [`l2_similarity`] for two images.
pub fn image_l2(clean: &crate::Image, adv: &crate::Image) -> Result<f64> {
    ensure!(
        clean.dims() == adv.dims(),
        Dimension,
        "images {} {:?} and {} {:?} differ in shape",
        clean.id(),
        clean.dims(),
        adv.id(),
        adv.dims()
    );
    Ok(clean
        .pixels()
        .iter()
        .zip(adv.pixels())
        .map(|(a, b)| (f64::from(*b) - f64::from(*a)).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Proposals scoring at least `threshold`, order preserved.
pub fn select_attack_proposals(proposals: &ProposalSet, threshold: f64) -> ProposalSet {
    proposals.filter(|p| p.score >= threshold)
}

/// Sets each proposal's true label to its best-matching object's label (IOU
/// at least 0.5), or `background`.
pub fn match_proposals_to_ground_truth(
    proposals: &ProposalSet,
    objects: &[GroundTruthObject],
    background: usize,
) -> ProposalSet {
    let mut out = proposals.clone();
    for p in out.as_mut_slice() {
        p.true_label = Some(matched_label(&p.region, objects, MATCH_IOU, background));
    }
    out
}

/// Draws an adversarial label uniformly from the classes other than the true
/// one. `excluded` (typically the background index) is never drawn.
pub fn draw_adversarial_label(
    true_label: usize,
    class_count: usize,
    excluded: Option<usize>,
    rng: &mut impl Rng,
) -> Result<usize> {
    ensure!(class_count >= 2, Argument, "need at least 2 classes, got {class_count}");
    ensure!(
        true_label < class_count,
        Argument,
        "label {true_label} out of range for {class_count} classes"
    );
    let options = class_count - 1 - usize::from(excluded.is_some_and(|e| e != true_label && e < class_count));
    ensure!(options > 0, Argument, "no wrong class left to draw for label {true_label}");
    let mut k = rng.random_range(0..options);
    for c in 0..class_count {
        if c == true_label || Some(c) == excluded {
            continue;
        }
        if k == 0 {
            return Ok(c);
        }
        k -= 1;
    }
    unreachable!("candidate count computed above")
}

/// Assigns every proposal (which must carry a true label) a random wrong
/// label. Deterministic in `seed`.
pub fn assign_adversarial_labels(
    proposals: &ProposalSet,
    class_count: usize,
    excluded: Option<usize>,
    seed: u64,
) -> Result<ProposalSet> {
    ensure!(class_count >= 2, Argument, "need at least 2 classes, got {class_count}");
    let mut rng = nn::seeded_rng(seed);
    let mut out = proposals.clone();
    for p in out.as_mut_slice() {
        let l = p
            .true_label
            .ok_or_else(|| Error::Argument("proposal has no true label".into()))?;
        p.adversarial_label = Some(draw_adversarial_label(l, class_count, excluded, &mut rng)?);
    }
    Ok(out)
}

/// `(true, adversarial)` label pairs of a fully labelled proposal set.
pub fn label_pairs(proposals: &ProposalSet) -> Result<Vec<(usize, usize)>> {
    proposals
        .iter()
        .map(|p| match (p.true_label, p.adversarial_label) {
            (Some(t), Some(a)) => Ok((t, a)),
            _ => Err(Error::Argument("proposal is missing a label".into())),
        })
        .collect()
}

/// Class loss over the attacked proposals.
#[derive(Clone, Debug)]
pub struct ClassLoss {
    pub value: Tensor,
    pub active_proposals: usize,
}

impl ClassLoss {
    /// No proposal left to attack; the loss is zero by convention.
    pub fn no_active_proposals(&self) -> bool {
        self.active_proposals == 0
    }
}

/// `sum_n logit[true_n] - logit[adv_n]` over the rows of `logits (N, C)`.
/// With no labels the loss is a zero scalar and `logits` is not read.
pub fn dag_class_loss(logits: &Tensor, labels: &[(usize, usize)]) -> Result<ClassLoss> {
    if labels.is_empty() {
        return Ok(ClassLoss {
            value: Tensor::zeros((), logits.dtype(), logits.device())?,
            active_proposals: 0,
        });
    }
    let (n, c) = logits.dims2()?;
    ensure!(
        n == labels.len(),
        Dimension,
        "{n} logit rows for {} labelled proposals",
        labels.len()
    );
    let mut signs = vec![0f64; n * c];
    for (i, &(t, a)) in labels.iter().enumerate() {
        ensure!(t < c && a < c, Argument, "label pair ({t}, {a}) out of range for {c} classes");
        ensure!(t != a, Argument, "adversarial label equals true label {t}");
        signs[i * c + t] += 1.0;
        signs[i * c + a] -= 1.0;
    }
    let signs = Tensor::from_vec(signs, (n, c), logits.device())?.to_dtype(logits.dtype())?;
    Ok(ClassLoss {
        value: (logits * signs)?.sum_all()?,
        active_proposals: n,
    })
}

/// `||A ∘ (X - R)||` for each attacked layer, batch-averaged.
///
/// `features[m]` is `(B, C, h, w)`, `targets[m]` is `(1 or B, C, h, w)` and
/// `attention[m]` is `(1 or B, 1, h, w)`, broadcast over channels.
pub fn attention_feature_loss(
    features: &[Tensor],
    targets: &[Tensor],
    attention: &[Tensor],
    squared: bool,
) -> Result<Vec<Tensor>> {
    ensure!(
        features.len() == targets.len() && features.len() == attention.len(),
        Dimension,
        "{} feature layers, {} targets, {} attention maps",
        features.len(),
        targets.len(),
        attention.len()
    );
    features
        .iter()
        .zip(targets)
        .zip(attention)
        .enumerate()
        .map(|(m, ((x, r), a))| {
            let (b, c, h, w) = x.dims4()?;
            let (rb, rc, rh, rw) = r.dims4()?;
            let (ab, ac, ah, aw) = a.dims4()?;
            ensure!(
                (rb == 1 || rb == b) && (rc, rh, rw) == (c, h, w),
                Dimension,
                "layer {m}: features {:?} vs target {:?}",
                x.dims(),
                r.dims()
            );
            ensure!(
                (ab == 1 || ab == b) && ac == 1 && (ah, aw) == (h, w),
                Dimension,
                "layer {m}: features {:?} vs attention {:?}",
                x.dims(),
                a.dims()
            );
            let weighted = x.broadcast_sub(r)?.broadcast_mul(a)?;
            Ok(norm_or_squared(&per_sample_sum_sq(&weighted)?, squared)?.mean_all()?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the L2 similarity term.
    pub alpha: f64,
    /// Weight of the class loss.
    pub beta: f64,
    /// Per-layer feature-loss weights.
    pub epsilon: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            epsilon: vec![1e-4, 2e-4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta].into_iter().chain(self.epsilon.iter().copied());
        for v in all {
            ensure!(v.is_finite() && v >= 0.0, Argument, "loss weight {v} must be finite and >= 0");
        }
        Ok(())
    }

    /// Same weights with the feature loss switched off.
    pub fn without_feature_loss(&self) -> Self {
        Self {
            epsilon: vec![0.0; self.epsilon.len()],
            ..self.clone()
        }
    }

    pub fn uses_feature_loss(&self) -> bool {
        self.epsilon.iter().any(|&e| e > 0.0)
    }
}

/// Term values of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub gan_g: f64,
    pub gan_d: f64,
    pub l2: f64,
    pub dag_class: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub l2: f64,
    pub dag_class: f64,
    pub feature: Vec<f64>,
    /// `gan_g + alpha·l2 + beta·dag_class + sum_m epsilon_m·feature_m`.
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.gan_g, self.gan_d, self.l2, self.dag_class, self.total]
            .iter()
            .chain(&self.feature)
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<LossReport> {
    ensure!(
        components.feature.len() == weights.epsilon.len(),
        Dimension,
        "{} feature terms for {} feature weights",
        components.feature.len(),
        weights.epsilon.len()
    );
    let feature: f64 = components
        .feature
        .iter()
        .zip(&weights.epsilon)
        .map(|(f, e)| f * e)
        .sum();
    Ok(LossReport {
        gan_g: components.gan_g,
        gan_d: components.gan_d,
        l2: components.l2,
        dag_class: components.dag_class,
        feature: components.feature.clone(),
        total: components.gan_g + weights.alpha * components.l2 + weights.beta * components.dag_class + feature,
    })
}

/// Differentiable counterpart of [`total_loss`] used for the generator step.
pub fn weighted_total(
    gan_g: &Tensor,
    l2: &Tensor,
    dag_class: &Tensor,
    feature: &[Tensor],
    weights: &LossWeights,
) -> Result<Tensor> {
    ensure!(
        feature.len() == weights.epsilon.len(),
        Dimension,
        "{} feature terms for {} feature weights",
        feature.len(),
        weights.epsilon.len()
    );
    let mut total = ((gan_g + (l2 * weights.alpha)?)? + (dag_class * weights.beta)?)?;
    for (f, &e) in feature.iter().zip(&weights.epsilon) {
        if e != 0.0 {
            total = (total + (f * e)?)?;
        }
    }
    Ok(total)
}

/// Fixed random targets for the attacked feature layers, drawn elementwise
/// from N(0, 1) and fully determined by the seed and the layer shapes.
#[derive(Clone, Debug)]
pub struct RandomTargetFeatures {
    seed: u64,
    layers: Vec<Tensor>,
}

impl RandomTargetFeatures {
    /// `shapes` are `(channels, height, width)` per attacked layer.
    pub fn generate(seed: u64, shapes: &[(usize, usize, usize)], dtype: DType) -> Result<Self> {
        let mut rng = nn::seeded_rng(seed);
        let layers = shapes
            .iter()
            .map(|&(c, h, w)| {
                let values: Vec<f64> = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
                Ok(Tensor::from_vec(values, (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
            })
            .collect::<Result<_>>()?;
        Ok(Self { seed, layers })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(1, C, h, w)` per layer.
    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .map(|t| {
                let d = t.dims();
                (d[1], d[2], d[3])
            })
            .collect()
    }

    pub fn to_named(&self) -> NamedTensors {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("layer{i}"), t.clone()))
            .collect()
    }

    /// Rebuilds from stored tensors, checking they match what `seed`
    /// regenerates.
    pub fn from_named(seed: u64, tensors: &NamedTensors, dtype: DType) -> Result<Self> {
        let layers: Vec<Tensor> = (0..tensors.len())
            .map(|i| {
                tensors
                    .get(&format!("layer{i}"))
                    .ok_or_else(|| Error::Format(format!("missing random target layer{i}")))
                    .and_then(|t| Ok(t.to_dtype(dtype)?))
            })
            .collect::<Result<_>>()?;
        let stored = Self { seed, layers };
        let regenerated = Self::generate(seed, &stored.shapes(), dtype)?;
        for (a, b) in stored.layers.iter().zip(&regenerated.layers) {
            let diff = nn::scalar(&(a - b)?.abs()?.max_all()?)?;
            ensure!(diff == 0.0, Format, "stored random targets do not match seed {seed}");
        }
        Ok(stored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BoundingBox, Proposal};
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn v(x: &Tensor) -> f64 {
        nn::scalar(x).unwrap()
    }

    /// Central finite-difference check of `f` at `x0`.
    fn fd_check(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) {
        let var = Var::from_tensor(&t(x0, shape)).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; x0.len()]);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.to_vec();
            let mut minus = x0.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let numeric = (v(&f(&t(&plus, shape))) - v(&f(&t(&minus, shape)))) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
            assert!(err < 1e-4, "coordinate {i}: numeric {numeric}, analytic {}", analytic[i]);
        }
    }

    #[test]
    fn gan_loss_values() {
        let half = t(&[0.5, 0.5], &[2]);
        assert!((v(&gan_discriminator_loss(&half, &half).unwrap()) - 4f64.ln()).abs() < 1e-12);
        assert!((v(&gan_generator_loss(&half).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let perfect = gan_discriminator_loss(&t(&[1.0], &[1]), &t(&[0.0], &[1])).unwrap();
        assert!(v(&perfect) < 1e-6);
        assert!(v(&gan_generator_loss(&t(&[1.0], &[1])).unwrap()) < 1e-6);
        assert!(gan_generator_loss(&t(&[1.2], &[1])).is_err());
        assert!(gan_discriminator_loss(&t(&[-0.1], &[1]), &half).is_err());
        assert!(gan_generator_loss(&t(&[f64::NAN], &[1])).is_err());
    }

    #[test]
    fn gan_losses_are_monotone() {
        let fake = t(&[0.3], &[1]);
        let mut last = f64::INFINITY;
        for i in 1..10 {
            let real = t(&[i as f64 / 10.0], &[1]);
            let d = v(&gan_discriminator_loss(&real, &fake).unwrap());
            assert!(d < last);
            last = d;
        }
        let mut last = f64::INFINITY;
        for i in 1..10 {
            let g = v(&gan_generator_loss(&t(&[i as f64 / 10.0], &[1])).unwrap());
            assert!(g < last);
            last = g;
        }
    }

    #[test]
    fn l2_values() {
        let a = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = (a.clone() + 0.1).unwrap();
        assert_eq!(v(&l2_similarity(&a, &a, false).unwrap()), 0.0);
        let d = v(&l2_similarity(&a, &b, false).unwrap());
        assert!((d - 0.1 * 48f64.sqrt()).abs() < 1e-12);
        assert!((d - 0.6928).abs() < 1e-4);
        let c = (a.clone() + 0.2).unwrap();
        assert!((v(&l2_similarity(&a, &c, false).unwrap()) - 2.0 * d).abs() < 1e-12);
        assert!((v(&l2_similarity(&a, &b, true).unwrap()) - 0.48).abs() < 1e-12);
        let other = Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(l2_similarity(&a, &other, false), Err(Error::Dimension(_))));
    }

    #[test]
    fn l2_is_averaged_over_the_batch() {
        let a = Tensor::zeros((2, 1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let b = t(&[3.0, 4.0, 0.0, 0.0], &[2, 1, 1, 2]);
        assert!((v(&l2_similarity(&a, &b, false).unwrap()) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn selection_is_inclusive() {
        let bx = BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        let set = ProposalSet::new(vec![
            Proposal::new(bx, 0.71),
            Proposal::new(bx, 0.70),
            Proposal::new(bx, 0.69),
        ]);
        let tau = select_attack_proposals(&set, ATTACK_SCORE_THRESHOLD);
        let scores: Vec<f64> = tau.iter().map(|p| p.score).collect();
        assert_eq!(scores, vec![0.71, 0.70]);
        let low = ProposalSet::new(vec![Proposal::new(bx, 0.5)]);
        assert!(select_attack_proposals(&low, 0.7).is_empty());
    }

    #[test]
    fn ground_truth_matching() {
        let g = GroundTruthObject {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            label: 1,
        };
        let set = ProposalSet::new(vec![
            Proposal::new(BoundingBox::new(0.0, 0.0, 10.0, 9.0).unwrap(), 0.9),
            Proposal::new(BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap(), 0.8),
        ]);
        let m = match_proposals_to_ground_truth(&set, &[g], 3);
        let labels: Vec<_> = m.iter().map(|p| p.true_label).collect();
        assert_eq!(labels, vec![Some(1), Some(3)]);
    }

    fn labelled(true_label: usize, n: usize) -> ProposalSet {
        let bx = BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        ProposalSet::new(
            (0..n)
                .map(|_| Proposal {
                    true_label: Some(true_label),
                    ..Proposal::new(bx, 0.9)
                })
                .collect(),
        )
    }

    #[test]
    fn two_classes_force_the_other_label() {
        let out = assign_adversarial_labels(&labelled(0, 50), 2, None, 7).unwrap();
        assert!(out.iter().all(|p| p.adversarial_label == Some(1)));
        assert!(assign_adversarial_labels(&labelled(0, 1), 1, None, 7).is_err());
    }

    #[test]
    fn adversarial_labels_are_uniform_over_wrong_classes() {
        let out = assign_adversarial_labels(&labelled(2, 10_000), 5, None, 11).unwrap();
        let mut counts = [0usize; 5];
        for p in &out {
            counts[p.adversarial_label.unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        let expected = 2500.0;
        let chi2: f64 = [0, 1, 3, 4]
            .iter()
            .map(|&c| (counts[c] as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, p = 0.001
        assert!(chi2 < 16.27, "chi2 {chi2}, counts {counts:?}");
        let again = assign_adversarial_labels(&labelled(2, 10_000), 5, None, 11).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn excluded_class_is_never_drawn() {
        let out = assign_adversarial_labels(&labelled(0, 2000), 4, Some(3), 5).unwrap();
        assert!(out.iter().all(|p| matches!(p.adversarial_label, Some(1 | 2))));
        // The excluded class itself may be the true label.
        let bg = assign_adversarial_labels(&labelled(3, 100), 4, Some(3), 5).unwrap();
        assert!(bg.iter().all(|p| p.adversarial_label.unwrap() < 3));
        assert!(assign_adversarial_labels(&labelled(0, 1), 2, Some(1), 5).is_err());
    }

    #[test]
    fn class_loss_values() {
        let logits = t(&[2.0, 1.0], &[1, 2]);
        let l = dag_class_loss(&logits, &[(0, 1)]).unwrap();
        assert_eq!(v(&l.value), 1.0);
        assert!(!l.no_active_proposals());
        let sym = t(&[1.5, 1.5, 0.2], &[1, 3]);
        assert_eq!(v(&dag_class_loss(&sym, &[(0, 1)]).unwrap().value), 0.0);
        let two = t(&[2.0, 1.0, 0.5, 3.0], &[2, 2]);
        assert_eq!(v(&dag_class_loss(&two, &[(0, 1), (1, 0)]).unwrap().value), 1.0 + 2.5);
        let empty = dag_class_loss(&logits, &[]).unwrap();
        assert_eq!(v(&empty.value), 0.0);
        assert!(empty.no_active_proposals());
        assert!(dag_class_loss(&logits, &[(0, 0)]).is_err());
        assert!(dag_class_loss(&logits, &[(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn feature_loss_values() {
        let x = t(&[3.0, 9.0, 9.0, 4.0], &[1, 1, 2, 2]);
        let r = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let a = t(&[1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let out = attention_feature_loss(&[x.clone()], &[r.clone()], &[a.clone()], false).unwrap();
        assert!((v(&out[0]) - 5.0).abs() < 1e-12);
        let zero = a.zeros_like().unwrap();
        assert_eq!(v(&attention_feature_loss(&[x.clone()], &[r.clone()], &[zero], false).unwrap()[0]), 0.0);
        assert_eq!(v(&attention_feature_loss(&[x.clone()], &[x.clone()], &[a.clone()], false).unwrap()[0]), 0.0);
        let bad = Tensor::zeros((1, 1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            attention_feature_loss(&[x], &[r], &[bad], false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn total_loss_example() {
        let c = LossComponents {
            gan_g: 1.0,
            gan_d: 0.0,
            l2: 2.0,
            dag_class: 3.0,
            feature: vec![4.0, 5.0],
        };
        let r = total_loss(&c, &LossWeights::default()).unwrap();
        assert!((r.total - 4.1014).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents { feature: vec![0.0; 2], ..Default::default() }, &LossWeights::default()).unwrap().total, 0.0);
        let doubled = LossWeights {
            beta: 2.0,
            ..LossWeights::default()
        };
        assert!((total_loss(&c, &doubled).unwrap().total - r.total - 3.0).abs() < 1e-12);
        let ablated = total_loss(&c, &LossWeights::default().without_feature_loss()).unwrap();
        assert!((ablated.total - 4.1).abs() < 1e-12);
    }

    #[test]
    fn weighted_total_matches_report() {
        let w = LossWeights::default();
        let s = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        let tot = weighted_total(&s(1.0), &s(2.0), &s(3.0), &[s(4.0), s(5.0)], &w).unwrap();
        assert!((v(&tot) - 4.1014).abs() < 1e-12);
    }

    #[test]
    fn random_targets_regenerate_from_seed() {
        let shapes = [(4, 3, 3), (2, 2, 5)];
        let a = RandomTargetFeatures::generate(9, &shapes, DType::F32).unwrap();
        let b = RandomTargetFeatures::from_named(9, &a.to_named(), DType::F32).unwrap();
        assert_eq!(a.shapes(), b.shapes());
        assert!(RandomTargetFeatures::from_named(10, &a.to_named(), DType::F32).is_err());
        let vals = a.layers()[0].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().any(|&x| x < 0.0) && vals.iter().any(|&x| x > 0.0));
    }

    fn pseudo(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = nn::seeded_rng(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let p = pseudo(seed, 8, 0.05, 0.95);
            let q = t(&pseudo(seed + 100, 8, 0.05, 0.95), &[8]);
            fd_check(&p, &[8], |x| gan_discriminator_loss(x, &q).unwrap());
            fd_check(&p, &[8], |x| gan_discriminator_loss(&q, x).unwrap());
            fd_check(&p, &[8], |x| gan_generator_loss(x).unwrap());

            let clean = t(&pseudo(seed + 1, 48, 0.0, 1.0), &[1, 3, 4, 4]);
            let adv = pseudo(seed + 2, 48, 0.0, 1.0);
            fd_check(&adv, &[1, 3, 4, 4], |x| l2_similarity(&clean, x, false).unwrap());
            fd_check(&adv, &[1, 3, 4, 4], |x| l2_similarity(&clean, x, true).unwrap());

            let logits = pseudo(seed + 3, 20, -3.0, 3.0);
            let labels = [(0, 1), (3, 2), (1, 0), (2, 3), (0, 3)];
            fd_check(&logits, &[5, 4], |x| dag_class_loss(x, &labels).unwrap().value);

            let feats = pseudo(seed + 4, 2 * 4 * 3 * 3, -2.0, 2.0);
            let target = t(&pseudo(seed + 5, 4 * 3 * 3, -2.0, 2.0), &[1, 4, 3, 3]);
            let attn = t(&pseudo(seed + 6, 9, 0.0, 1.0), &[1, 1, 3, 3]);
            fd_check(&feats, &[2, 4, 3, 3], |x| {
                attention_feature_loss(&[x.clone()], &[target.clone()], &[attn.clone()], false).unwrap()[0].clone()
            });

            let w = LossWeights::default();
            let parts = pseudo(seed + 7, 5, 0.1, 5.0);
            fd_check(&parts, &[5], |x| {
                let g = |i| x.get(i).unwrap();
                weighted_total(&g(0), &g(1), &g(2), &[g(3), g(4)], &w).unwrap()
            });
        }
    }

    #[test]
    fn zero_difference_has_zero_gradient() {
        let clean = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let var = Var::from_tensor(&clean).unwrap();
        let grads = l2_similarity(&clean, var.as_tensor(), false).unwrap().backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap();
        assert_eq!(v(&g.abs().unwrap().max_all().unwrap()), 0.0);
    }

    proptest! {
        #[test]
        fn class_loss_is_permutation_invariant(
            rows in prop::collection::vec((prop::collection::vec(-5.0..5.0f64, 3), 0usize..3, 1usize..3), 1..8),
            seed in 0u64..1000,
        ) {
            let labels: Vec<(usize, usize)> = rows.iter().map(|(_, t, o)| (*t, (t + o) % 3)).collect();
            let flat: Vec<f64> = rows.iter().flat_map(|(l, _, _)| l.clone()).collect();
            let base = v(&dag_class_loss(&t(&flat, &[rows.len(), 3]), &labels).unwrap().value);
            let mut order: Vec<usize> = (0..rows.len()).collect();
            let mut rng = nn::seeded_rng(seed);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let flat2: Vec<f64> = order.iter().flat_map(|&i| rows[i].0.clone()).collect();
            let labels2: Vec<(usize, usize)> = order.iter().map(|&i| labels[i]).collect();
            let permuted = v(&dag_class_loss(&t(&flat2, &[rows.len(), 3]), &labels2).unwrap().value);
            prop_assert!((base - permuted).abs() < 1e-9);
        }

        #[test]
        fn feature_loss_sum_ignores_layer_order(
            a in prop::collection::vec(-2.0..2.0f64, 8),
            b in prop::collection::vec(-2.0..2.0f64, 18),
        ) {
            let xa = t(&a, &[1, 2, 2, 2]);
            let xb = t(&b, &[1, 2, 3, 3]);
            let ra = xa.zeros_like().unwrap();
            let rb = xb.ones_like().unwrap();
            let aa = Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
            let ab = Tensor::full(0.5f64, (1, 1, 3, 3), &Device::Cpu).unwrap();
            let sum = |ls: Vec<Tensor>| ls.iter().map(v).sum::<f64>();
            let fwd = sum(attention_feature_loss(&[xa.clone(), xb.clone()], &[ra.clone(), rb.clone()], &[aa.clone(), ab.clone()], false).unwrap());
            let rev = sum(attention_feature_loss(&[xb, xa], &[rb, ra], &[ab, aa], false).unwrap());
            prop_assert!((fwd - rev).abs() < 1e-12);
        }

        #[test]
        fn l2_is_a_metric(
            x in prop::collection::vec(0.0..1.0f64, 12),
            y in prop::collection::vec(0.0..1.0f64, 12),
            z in prop::collection::vec(0.0..1.0f64, 12),
        ) {
            let (x, y, z) = (t(&x, &[1, 12]), t(&y, &[1, 12]), t(&z, &[1, 12]));
            let d = |a: &Tensor, b: &Tensor| v(&l2_similarity(a, b, false).unwrap());
            prop_assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-12);
            prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
        }

        #[test]
        fn report_total_is_the_weighted_sum(
            parts in prop::collection::vec(0.0..100.0f64, 6),
            alpha in 0.0..1.0f64,
            beta in 0.0..2.0f64,
        ) {
            let c = LossComponents { gan_g: parts[0], gan_d: parts[1], l2: parts[2], dag_class: parts[3], feature: vec![parts[4], parts[5]] };
            let w = LossWeights { alpha, beta, epsilon: vec![1e-4, 2e-4] };
            let r = total_loss(&c, &w).unwrap();
            let expect = parts[0] + alpha * parts[2] + beta * parts[3] + 1e-4 * parts[4] + 2e-4 * parts[5];
            prop_assert!((r.total - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
    }
}
