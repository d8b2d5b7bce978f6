//! Datasets, configuration and persistence: VOC-style annotations, the
//! synthetic shapes generator, video frame directories, run configs,
//! detector checkpoints and result files.

mod checkpoint;
mod config;
mod frames;
mod imageio;
mod results;
mod synthetic;
mod voc;

pub use checkpoint::{load_detector_pair, save_detector_pair};
pub use config::{DataPaths, RunConfig};
pub use frames::{load_frames, write_frames, DEFAULT_FPS};
pub use imageio::{load_image, save_image, IMAGE_EXTENSIONS};
pub use results::{write_results, ResultLine};
pub use synthetic::{
    generate_synthetic_dataset, render_sample, synthetic_video, ShapeKind, SyntheticConfig, SyntheticDataset,
    SyntheticSample,
};
pub use voc::{load_voc_style, write_voc_style, DatasetManifest, LoadIssue, LoadReport, ManifestEntry};
