use std::path::Path;
use std::sync::Arc;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::detector::{Backbone, BackboneToken, Detector, DetectorConfig, ProposalDetector, RegressionDetector};
use crate::error::{ensure, Error, Result};
use crate::nn::{self, NamedTensors, ParamBuilder};

const MANIFEST: &str = "detectors.yaml";
const BACKBONE: &str = "backbone.safetensors";
const PROPOSAL: &str = "proposal_head.safetensors";
const REGRESSION: &str = "regression_head.safetensors";

#[derive(Debug, Serialize, Deserialize)]
struct PairManifest {
    config: DetectorConfig,
    backbone: BackboneToken,
}

fn heads(detector: &Detector) -> NamedTensors {
    let backbone = detector.backbone().params();
    detector
        .params()
        .into_iter()
        .filter(|(k, _)| !backbone.contains_key(k))
        .collect()
}

/// Writes a proposal-based and a regression-based detector that share one
/// backbone: the backbone once, each head separately, and a YAML manifest.
pub fn save_detector_pair(dir: &Path, proposal: &Detector, regression: &Detector) -> Result<()> {
    proposal.as_proposal()?;
    ensure!(
        matches!(regression, Detector::Regression(_)),
        Argument,
        "second detector must be regression-based"
    );
    ensure!(
        proposal.backbone().token() == regression.backbone().token(),
        Argument,
        "detectors do not share a backbone"
    );
    ensure!(
        proposal.config() == regression.config(),
        Argument,
        "detectors were built from different configs"
    );
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    nn::save_tensors(proposal.backbone().params(), &dir.join(BACKBONE))?;
    nn::save_tensors(&heads(proposal), &dir.join(PROPOSAL))?;
    nn::save_tensors(&heads(regression), &dir.join(REGRESSION))?;
    let manifest = PairManifest {
        config: proposal.config().clone(),
        backbone: proposal.backbone().token(),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_yaml::to_string(&manifest)?).map_err(|e| Error::io(path, e))
}

/// Loads a pair written by [`save_detector_pair`]. Both detectors share the
/// same backbone instance, and its weights must match the recorded token.
pub fn load_detector_pair(dir: &Path) -> Result<(Detector, Detector)> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PairManifest = serde_yaml::from_str(&text)?;
    manifest.config.validate()?;

    let mut pb = ParamBuilder::frozen(&nn::load_tensors(&dir.join(BACKBONE))?, DType::F32);
    let backbone = Arc::new(Backbone::build(&mut pb, manifest.config.backbone.clone())?);
    if backbone.token() != manifest.backbone {
        return Err(Error::Format(format!(
            "backbone weights {} do not match the manifest token {}",
            backbone.token(),
            manifest.backbone
        )));
    }
    let mut pb = ParamBuilder::frozen(&nn::load_tensors(&dir.join(PROPOSAL))?, DType::F32);
    let proposal = ProposalDetector::build(&mut pb, backbone.clone(), manifest.config.clone())?;
    let mut pb = ParamBuilder::frozen(&nn::load_tensors(&dir.join(REGRESSION))?, DType::F32);
    let regression = RegressionDetector::build(&mut pb, backbone, manifest.config)?;
    Ok((Detector::Proposal(proposal), Detector::Regression(regression)))
}
