//! Class-agnostic two-stage detector machinery: backbone with a four-level
//! feature pyramid, region proposal network, ROI feature pooling and the
//! standard detection losses.
//!
//! [`DetectorBackend`] is the contract the distillation trainer relies on;
//! [`MiniDetector`] is the bundled CPU-sized implementation.

pub mod boxes;
pub mod checkpoint;
pub mod layers;
pub mod losses;
mod mini;
pub mod params;
pub mod roi_align;
pub mod tensor;

pub use mini::{DetectorConfig, HeadLayout, MiniDetector, OutputGrads, RoiSample, RpnOutput, TrainForward};
pub use params::{DetectorParams, ParamGrads, ParamTensor};
pub use tensor::FeatureMap;

use crate::dataset::{BoundingBox, DefectImage};
use crate::eval::Detection;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pyramid level names, finest first.
pub const LEVEL_NAMES: [&str; 4] = ["P2", "P3", "P4", "P5"];
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("non-finite activations in {level}")]
    NonFinite { level: String },
    #[error("empty feature pyramid")]
    EmptyPyramid,
    #[error("proposal {index} collapses to zero area after clamping")]
    DegenerateRoi { index: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Head(#[from] crate::heads::HeadError),
}

/// Multi-scale class-agnostic features `{P2, P3, P4, P5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn level_name(i: usize) -> &'static str {
        LEVEL_NAMES[i]
    }

    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |l| l.channels)
    }

    pub fn check_finite(&self) -> Result<(), DetectorError> {
        match self.levels.iter().position(|l| !l.is_finite()) {
            Some(i) => Err(DetectorError::NonFinite {
                level: LEVEL_NAMES[i].to_string(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

/// Fixed-length ROI feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFeature {
    pub vector: Vec<f64>,
}

/// Inference contract of a two-stage detector.
pub trait DetectorBackend {
    fn extract_pyramid(&self, image: &DefectImage) -> Result<FeaturePyramid, DetectorError>;

    /// At most `max_proposals` NMS-deduplicated proposals, best first.
    fn propose_regions(
        &self,
        pyramid: &FeaturePyramid,
        max_proposals: usize,
        nms_iou: f64,
    ) -> Result<Vec<Proposal>, DetectorError>;

    fn pool_roi_features(
        &self,
        pyramid: &FeaturePyramid,
        proposals: &[Proposal],
    ) -> Result<Vec<RoiFeature>, DetectorError>;

    /// Final per-class detections in the image's own pixel coordinates.
    fn detect(&self, image: &DefectImage, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>, DetectorError>;
}
