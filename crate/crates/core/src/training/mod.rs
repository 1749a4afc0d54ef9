//! Manifests, segment policies, the training loop and checkpoint inference.

pub mod config;
pub mod manifest;
pub mod predict;
pub mod segments;
pub mod trainer;

pub use config::{resolve, CheckpointPolicy, ConfigFile, TrainConfig, CONFIG_VERSION};
pub use manifest::{rescale_omos, scale_target, Manifest, ManifestRow, Split};
pub use predict::{score_clips, Predictor, ScoringPlan};
pub use segments::SegmentPolicy;
pub use trainer::{extract_all, model_spec, train, train_model, Dataset, LoadOptions, LoadStats, RunResult};
