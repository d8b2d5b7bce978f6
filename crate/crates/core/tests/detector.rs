mod common;

use std::sync::Arc;

use advdet::detector::Detector;
use advdet::{Error, Image};
use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn feature_gradients_match_finite_differences() {
    let (p, _) = common::fresh_pair(3, DType::F64);
    let backbone = p.backbone();
    let mut rng = advdet::nn::seeded_rng(8);
    let px: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::from_vec(px.clone(), (1, 3, 16, 16), &Device::Cpu).unwrap();
    let shapes = backbone.config().layer_shapes(16, 16);
    let probes: Vec<Tensor> = shapes
        .iter()
        .map(|&(c, h, w)| {
            let v: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(v, (1, c, h, w), &Device::Cpu).unwrap()
        })
        .collect();
    let objective = |input: &Tensor| -> Tensor {
        let fm = backbone.forward(input).unwrap();
        fm.layers()
            .iter()
            .zip(&probes)
            .map(|(f, r)| (f * r).unwrap().sum_all().unwrap())
            .reduce(|a, b| (a + b).unwrap())
            .unwrap()
    };
    let var = Var::from_tensor(&x).unwrap();
    let grads = objective(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();

    let h = 1e-6;
    let mut num = Vec::new();
    let mut ana = Vec::new();
    for _ in 0..40 {
        let k = rng.random_range(0..px.len());
        let eval = |d: f64| {
            let mut q = px.clone();
            q[k] += d;
            let t = Tensor::from_vec(q, (1, 3, 16, 16), &Device::Cpu).unwrap();
            objective(&t).to_scalar::<f64>().unwrap()
        };
        num.push((eval(h) - eval(-h)) / (2.0 * h));
        ana.push(analytic[k]);
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
}

#[test]
fn detectors_on_one_backbone_see_identical_features() {
    let (p, r) = common::fresh_pair(5, DType::F32);
    assert!(Arc::ptr_eq(p.backbone(), r.backbone()));
    assert_eq!(p.handle().backbone, r.handle().backbone);
    let img = &common::dataset(1, 4)[0].image;
    let a = p.extract_features(img).unwrap().to_vecs().unwrap();
    let b = r.extract_features(img).unwrap().to_vecs().unwrap();
    assert_eq!(a, b);
}

#[test]
fn regression_detector_has_no_proposals() {
    let (p, r) = common::fresh_pair(5, DType::F32);
    let img = Image::filled("g", 48, 48, 0.5).unwrap();
    let fm = r.extract_features(&img).unwrap();
    assert!(matches!(r.propose(&fm), Err(Error::Capability { .. })));
    assert!(p.propose(&fm).is_ok());
}

#[test]
fn trained_detectors_reach_useful_accuracy() {
    let t = common::trained();
    for d in [&t.proposal, &t.regression] {
        let dets = d.detect_all(&common::images(&t.test), 0.5, 8).unwrap();
        let found = dets.iter().filter(|d| !d.is_empty()).count();
        assert!(found * 2 > t.test.len(), "{:?} finds objects in {found} images", d.family());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn proposal_scores_are_sorted_probabilities(seed in 0u64..1000, fill in 0.0f32..1.0) {
        let (p, _) = common::fresh_pair(seed, DType::F32);
        let mut rng = advdet::nn::seeded_rng(seed);
        let px: Vec<f32> = (0..3 * 48 * 48).map(|_| (fill + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0)).collect();
        let img = Image::new("r", 48, 48, px).unwrap();
        let fm = p.extract_features(&img).unwrap();
        let Detector::Proposal(pd) = &p else { unreachable!() };
        let sets = pd.propose(&fm).unwrap();
        prop_assert_eq!(sets.len(), 1);
        let scores: Vec<f64> = sets[0].iter().map(|q| q.score).collect();
        prop_assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
}
