//! Incremental few-shot defect detection with dual knowledge alignment.
//!
//! A base detector is trained on plentiful base categories, frozen as a
//! teacher, and copied into a student that learns novel categories from K
//! shots while feature-level and logit-level distillation keep it close to
//! the teacher.

pub mod dataset;
pub mod detector;
pub mod distill;
pub mod eval;
pub mod heads;
pub mod train;

pub use dataset::{BoundingBox, CategoryId, DatasetError, DatasetPartition, DefectImage, Instance, SplitSpec};
pub use detector::{DetectorBackend, DetectorConfig, DetectorError, FeaturePyramid, HeadLayout, MiniDetector};
pub use distill::{DistillError, DistillWeights, Temperature};
pub use eval::{Detection, EvalReport};
pub use heads::{ClassifierKind, HeadError, HeadOutputs};
pub use train::{ExperimentReport, FinetuneDataPolicy, StepLog, TeacherSnapshot, TrainConfig, TrainError};
