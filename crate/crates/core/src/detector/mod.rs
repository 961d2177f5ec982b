pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod roi_align;
pub mod train;

pub use backbone::Backbone;
pub use checkpoint::{Checkpoint, Phase};
pub use config::{BackboneConfig, DetectorConfig, FinetuneSet, PhaseConfig, RoiHeadConfig};
pub use model::{Detection, DetectOptions, Detector, LossPhase, Target};
pub use train::{evaluate, fine_tune, finetune_set, image_target, train_base, StepRecord};
