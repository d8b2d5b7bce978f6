//! Generative adversarial examples against object detectors.
//!
//! The crate trains an encoder-decoder generator that perturbs images (and
//! video frames) in a single forward pass so that both proposal-based and
//! regression-based detectors fail on them. It also ships the iterative
//! dense-adversary baseline, two trainable toy detectors sharing one feature
//! backbone, and the evaluation harness (mAP drop, timing, perceptibility).
//!
//! Data-parallel loops (dataset rendering, batch evaluation, per-image
//! baseline attacks) run on rayon when the `parallel` feature is enabled and
//! fall back to plain iterators otherwise. See [`exec::Execution`].

pub mod advgen;
pub mod attention;
pub mod dag;
pub mod datamodel;
pub mod detector;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod nn;
pub mod pipeline;

pub use datamodel::{
    iou, BoundingBox, Detection, FrameSequence, GroundTruthObject, Image, LabeledImage, Proposal,
    ProposalSet,
};
pub use error::{Error, Result};
pub use exec::Execution;
