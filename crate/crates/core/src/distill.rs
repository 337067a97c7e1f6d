//! Knowledge-align losses between a frozen teacher and the student.
//!
//! * Feature alignment: per channel, a temperature softmax over spatial
//!   positions; `KL(teacher || student)` scaled by `tau^2 / C`, summed over
//!   the four pyramid levels.
//! * Logit alignment: temperature softmax over base-category logits;
//!   `KL(student || teacher)` scaled by `tau^2 / C_base`, averaged over ROIs.
//!
//! The two KL directions differ on purpose. Teacher inputs are constants:
//! only student gradients are produced. Logarithms are natural.

use crate::detector::losses::log_softmax;
use crate::detector::{FeatureMap, FeaturePyramid, LEVEL_NAMES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("loss weights must be non-negative, got ({0}, {1})")]
    InvalidWeights(f64, f64),
    #[error("level {level}: teacher shape {teacher:?} differs from student shape {student:?}")]
    ShapeMismatch {
        level: String,
        teacher: (usize, usize, usize),
        student: (usize, usize, usize),
    },
    #[error("teacher has {teacher} pyramid levels, student has {student}")]
    LevelCount { teacher: usize, student: usize },
    #[error("teacher scored {teacher} ROIs, student {student}")]
    RoiCountMismatch { teacher: usize, student: usize },
    #[error("ROI {roi}: teacher has {teacher} base logits, student {student}")]
    LogitLength { roi: usize, teacher: usize, student: usize },
    #[error("non-finite {component} loss")]
    NonFinite { component: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, DistillError> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(DistillError::InvalidTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(5.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub lambda_fka: f64,
    pub lambda_lka: f64,
}

impl DistillWeights {
    pub fn new(lambda_fka: f64, lambda_lka: f64) -> Result<Self, DistillError> {
        if lambda_fka >= 0.0 && lambda_lka >= 0.0 {
            Ok(Self { lambda_fka, lambda_lka })
        } else {
            Err(DistillError::InvalidWeights(lambda_fka, lambda_lka))
        }
    }

    pub fn none() -> Self {
        Self {
            lambda_fka: 0.0,
            lambda_lka: 0.0,
        }
    }
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            lambda_fka: 1.0,
            lambda_lka: 0.01,
        }
    }
}

fn scaled_log_softmax(values: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = values.iter().map(|v| v / tau).collect();
    log_softmax(&scaled)
}

/// Per-channel softmax over the `H * W` positions of `y / tau`, returned as a
/// `C x 1 x (H * W)` map.
pub fn channel_spatial_softmax(map: &FeatureMap, tau: Temperature) -> FeatureMap {
    let n = map.plane();
    let mut data = Vec::with_capacity(map.data.len());
    for c in 0..map.channels {
        data.extend(scaled_log_softmax(map.channel(c), tau.0).into_iter().map(f64::exp));
    }
    FeatureMap::from_vec(map.channels, 1, n, data)
}

fn check_shapes(level: usize, teacher: &FeatureMap, student: &FeatureMap) -> Result<(), DistillError> {
    if teacher.shape() != student.shape() {
        return Err(DistillError::ShapeMismatch {
            level: LEVEL_NAMES.get(level).copied().unwrap_or("?").to_string(),
            teacher: teacher.shape(),
            student: student.shape(),
        });
    }
    Ok(())
}

/// Channel-wise `KL(teacher || student)` for one level, with the gradient
/// with respect to the student map.
pub fn fka_level_divergence_with_grad(
    teacher: &FeatureMap,
    student: &FeatureMap,
    tau: Temperature,
    level: usize,
) -> Result<(f64, FeatureMap), DistillError> {
    check_shapes(level, teacher, student)?;
    let tau = tau.0;
    let c_count = teacher.channels as f64;
    let scale = tau * tau / c_count;
    let mut grad = FeatureMap::zeros_like(student);
    let mut total = 0.0;
    for c in 0..teacher.channels {
        let lt = scaled_log_softmax(teacher.channel(c), tau);
        let ls = scaled_log_softmax(student.channel(c), tau);
        let kl: f64 = lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
        // d KL / d y_s = (p_s - p_t) / tau
        for (g, (a, b)) in grad.channel_mut(c).iter_mut().zip(lt.iter().zip(&ls)) {
            *g = scale * (b.exp() - a.exp()) / tau;
        }
    }
    Ok((scale * total, grad))
}

pub fn fka_level_divergence(teacher: &FeatureMap, student: &FeatureMap, tau: Temperature) -> Result<f64, DistillError> {
    fka_level_divergence_with_grad(teacher, student, tau, 0).map(|(v, _)| v)
}

/// Sum of the level divergences over P2..P5 plus per-level student
/// gradients.
pub fn fka_loss_with_grad(
    teacher: &FeaturePyramid,
    student: &FeaturePyramid,
    tau: Temperature,
) -> Result<(f64, Vec<FeatureMap>), DistillError> {
    if teacher.levels.len() != student.levels.len() {
        return Err(DistillError::LevelCount {
            teacher: teacher.levels.len(),
            student: student.levels.len(),
        });
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(teacher.levels.len());
    for (i, (t, s)) in teacher.levels.iter().zip(&student.levels).enumerate() {
        let (v, g) = fka_level_divergence_with_grad(t, s, tau, i)?;
        total += v;
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn fka_loss(teacher: &FeaturePyramid, student: &FeaturePyramid, tau: Temperature) -> Result<f64, DistillError> {
    fka_loss_with_grad(teacher, student, tau).map(|(v, _)| v)
}

/// Temperature softmax over base-category logits (background excluded).
pub fn base_logit_softmax(base_logits: &[f64], tau: Temperature) -> Vec<f64> {
    scaled_log_softmax(base_logits, tau.0).into_iter().map(f64::exp).collect()
}

/// Mean over ROIs of `tau^2 / C_base * KL(student || teacher)`, with the
/// gradient with respect to each student logit vector.
pub fn lka_loss_with_grad(
    student: &[Vec<f64>],
    teacher: &[Vec<f64>],
    tau: Temperature,
) -> Result<(f64, Vec<Vec<f64>>), DistillError> {
    if student.len() != teacher.len() {
        return Err(DistillError::RoiCountMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    if student.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let tau = tau.0;
    let rois = student.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (roi, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.len() != t.len() {
            return Err(DistillError::LogitLength {
                roi,
                teacher: t.len(),
                student: s.len(),
            });
        }
        let scale = tau * tau / s.len() as f64 / rois;
        let ls = scaled_log_softmax(s, tau);
        let lt = scaled_log_softmax(t, tau);
        let kl = ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0);
        total += scale * kl;
        // d KL / d z_i = p_i (log p_i - log q_i - KL) / tau
        grads.push(
            ls.iter()
                .zip(&lt)
                .map(|(a, b)| scale * a.exp() * (a - b - kl) / tau)
                .collect(),
        );
    }
    Ok((total, grads))
}

pub fn lka_loss(student: &[Vec<f64>], teacher: &[Vec<f64>], tau: Temperature) -> Result<f64, DistillError> {
    lka_loss_with_grad(student, teacher, tau).map(|(v, _)| v)
}

/// `rpn + rcnn + lambda_fka * fka + lambda_lka * lka`.
pub fn total_loss(rpn: f64, rcnn: f64, fka: f64, lka: f64, weights: DistillWeights) -> Result<f64, DistillError> {
    for (component, v) in [("rpn", rpn), ("rcnn", rcnn), ("fka", fka), ("lka", lka)] {
        if !v.is_finite() {
            return Err(DistillError::NonFinite { component });
        }
    }
    Ok(rpn + rcnn + weights.lambda_fka * fka + weights.lambda_lka * lka)
}
