//! Procedural data, staged training, ablation bundles and pixel metrics.

pub mod ablation;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod stage;

pub use ablation::{build_ablation, masked_mse, Variant};
pub use data::{make_sample, make_synthetic_dataset, match_scene_split, DataConfig, PromptKind, SyntheticSample};
pub use metrics::{edit_metrics, region_metrics, EditMetrics, RegionMetrics};
pub use optim::{AdamW, AdamWConfig};
pub use stage::{run_stage, LossRecord, Stage, StageOutput, TrainConfig};
