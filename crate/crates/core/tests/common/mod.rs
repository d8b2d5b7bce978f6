#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use advdet::detector::{train_detector_pair, Backbone, Detector, DetectorConfig, DetectorTrainConfig, ProposalDetector, RegressionDetector};
use advdet::nn::ParamBuilder;
use advdet::pipeline::{generate_synthetic_dataset, SyntheticConfig};
use advdet::{Execution, Image, LabeledImage};
use candle_core::DType;

/// Untrained detector pair on one backbone.
pub fn fresh_pair(seed: u64, dtype: DType) -> (Detector, Detector) {
    let config = DetectorConfig::default();
    let mut pb = ParamBuilder::fresh(seed, false, dtype);
    let backbone = Arc::new(Backbone::build(&mut pb, config.backbone.clone()).unwrap());
    let p = ProposalDetector::build(&mut pb, backbone.clone(), config.clone()).unwrap();
    let r = RegressionDetector::build(&mut pb, backbone, config).unwrap();
    (Detector::Proposal(p), Detector::Regression(r))
}

pub fn dataset(n: usize, seed: u64) -> Vec<LabeledImage> {
    let cfg = SyntheticConfig {
        num_images: n,
        seed,
        id_prefix: format!("s{seed}_"),
        ..Default::default()
    };
    generate_synthetic_dataset(&cfg, Execution::Parallel).unwrap().samples
}

pub fn images(samples: &[LabeledImage]) -> Vec<Image> {
    samples.iter().map(|s| s.image.clone()).collect()
}

pub struct Trained {
    pub proposal: Detector,
    pub regression: Detector,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// A briefly trained pair: good enough to emit confident proposals.
pub fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let train = dataset(240, 11);
        let test = dataset(24, 12);
        let cfg = DetectorTrainConfig {
            max_epochs: 6,
            min_epochs: 6,
            proposal_map_floor: 0.0,
            regression_map_floor: 0.0,
            ..Default::default()
        };
        let (proposal, regression, _) = train_detector_pair(&train, &test, &DetectorConfig::default(), &cfg).unwrap();
        Trained {
            proposal,
            regression,
            train,
            test,
        }
    })
}
