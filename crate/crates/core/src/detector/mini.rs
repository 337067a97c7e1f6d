//! Bundled CPU-sized two-stage detector.
//!
//! Backbone: five stages of 3x3 convolutions (first of each stage at stride
//! 2), giving C2..C5 at strides 4..32. FPN: 1x1 laterals with nearest
//! top-down addition. RPN: shared 3x3 conv then 1x1 objectness and delta
//! convs, one anchor size per level. ROI head: ROI Align, two fully
//! connected layers, then the incremental classifier heads and a
//! class-agnostic regressor.

use super::boxes::{decode_deltas, encode_deltas, level_anchors, nms};
use super::layers::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, relu_backward_inplace, relu_inplace,
    upsample2x, upsample2x_backward, ConvShape,
};
use super::losses::{AnchorLabel, RpnTargets};
use super::params::{DetectorParams, ParamGrads};
use super::roi_align::RoiSampling;
use super::tensor::FeatureMap;
use super::{DetectorBackend, DetectorError, FeaturePyramid, Proposal, RoiFeature, LEVEL_STRIDES};
use crate::dataset::{BoundingBox, CategoryId, DefectImage};
use crate::eval::{iou, Detection};
use crate::heads::{
    classify_incremental, merge_head_scores, regress_class_agnostic, ClassifierHead, ClassifierKind,
    CosineHeadWeights, HeadOutputs, LinearHeadWeights, RegressorWeights,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const GROUP_BACKBONE: &str = "backbone";
pub const GROUP_FPN: &str = "fpn";
pub const GROUP_RPN: &str = "rpn";
pub const GROUP_ROI: &str = "roi_head";
pub const GROUP_CLS_BASE: &str = "cls_base";
pub const GROUP_CLS_NOVEL: &str = "cls_novel";
pub const GROUP_REG: &str = "reg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    /// Grayscale input is replicated to this many channels.
    pub in_channels: usize,
    /// Output channels of the stem and of stages C2..C5.
    pub stage_channels: [usize; 5],
    /// Number of 3x3 convolutions per stage.
    pub stage_depth: [usize; 5],
    pub fpn_channels: usize,
    /// Anchor side length as a multiple of the level stride.
    pub anchor_scale: f64,
    /// Height/width ratios.
    pub anchor_ratios: Vec<f64>,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_pre_nms_top: usize,
    pub rpn_post_nms_train: usize,
    pub rpn_post_nms_test: usize,
    pub rpn_nms_iou: f64,
    pub rpn_smooth_l1_beta: f64,
    pub min_proposal_size: f64,
    pub roi_pool: usize,
    pub roi_samples: usize,
    pub fc_dim: usize,
    pub rois_per_image: usize,
    pub roi_positive_fraction: f64,
    pub roi_fg_iou: f64,
    pub rcnn_smooth_l1_beta: f64,
    pub delta_stds: [f64; 4],
    /// ROI side length mapped to `canonical_level`.
    pub canonical_size: f64,
    pub canonical_level: usize,
    pub classifier: ClassifierKind,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DetectorConfig {
    /// Sized for 64 px inputs and CPU training.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            stage_channels: [16, 24, 32, 32, 32],
            stage_depth: [1, 2, 1, 1, 1],
            fpn_channels: 16,
            anchor_scale: 4.0,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch_per_image: 256,
            rpn_positive_fraction: 0.5,
            rpn_pre_nms_top: 1000,
            rpn_post_nms_train: 128,
            rpn_post_nms_test: 64,
            rpn_nms_iou: 0.7,
            rpn_smooth_l1_beta: 1.0 / 9.0,
            min_proposal_size: 1.0,
            roi_pool: 4,
            roi_samples: 2,
            fc_dim: 64,
            rois_per_image: 64,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            rcnn_smooth_l1_beta: 1.0,
            delta_stds: [0.1, 0.1, 0.2, 0.2],
            canonical_size: 64.0,
            canonical_level: 4,
            classifier: ClassifierKind::default(),
            max_detections: 100,
        }
    }

    /// Reference-scale settings for 800 px inputs.
    pub fn full() -> Self {
        Self {
            input_size: 800,
            stage_channels: [64, 256, 512, 1024, 2048],
            stage_depth: [1, 3, 4, 23, 3],
            fpn_channels: 256,
            anchor_scale: 8.0,
            rpn_batch_per_image: 256,
            rpn_pre_nms_top: 2000,
            rpn_post_nms_train: 2000,
            rpn_post_nms_test: 1000,
            roi_pool: 7,
            fc_dim: 1024,
            rois_per_image: 512,
            canonical_size: 224.0,
            ..Self::desk()
        }
    }

    /// Spatial size of each pyramid level for the configured input.
    pub fn level_sizes(&self) -> [usize; 4] {
        let mut n = self.input_size.div_ceil(2);
        [0; 4].map(|_| {
            n = n.div_ceil(2);
            n
        })
    }
}

/// Category order of the classifier heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub base: Vec<CategoryId>,
    pub novel: Vec<CategoryId>,
}

impl HeadLayout {
    /// Index in `[base, novel, background]` order.
    pub fn merged_index(&self, c: &CategoryId) -> Option<usize> {
        self.base
            .iter()
            .position(|x| x == c)
            .or_else(|| self.novel.iter().position(|x| x == c).map(|j| self.base.len() + j))
    }

    pub fn background_index(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    pub fn category(&self, merged: usize) -> Option<&CategoryId> {
        if merged < self.base.len() {
            self.base.get(merged)
        } else {
            self.novel.get(merged - self.base.len())
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvParams {
    shape: ConvShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseParams {
    w: usize,
    b: usize,
    out: usize,
}

#[derive(Debug, Clone)]
struct Arch {
    backbone: Vec<ConvParams>,
    /// Index into the backbone activations of C2..C5.
    stage_outputs: [usize; 4],
    lateral: [ConvParams; 4],
    rpn_conv: ConvParams,
    rpn_cls: ConvParams,
    rpn_reg: ConvParams,
    fc1: DenseParams,
    fc2: DenseParams,
    cls_base: (usize, Option<usize>),
    cls_novel: (usize, Option<usize>),
    reg: DenseParams,
}

fn lookup(params: &DetectorParams, name: &str) -> Result<usize, DetectorError> {
    params
        .index_of(name)
        .ok_or_else(|| DetectorError::Config(format!("missing parameter {name}")))
}

impl Arch {
    fn conv_specs(config: &DetectorConfig) -> Vec<(String, ConvShape)> {
        let mut specs = Vec::new();
        let mut in_c = config.in_channels;
        for (s, (&out_c, &depth)) in config.stage_channels.iter().zip(&config.stage_depth).enumerate() {
            for d in 0..depth {
                specs.push((
                    format!("backbone.s{s}.conv{d}"),
                    ConvShape {
                        in_channels: in_c,
                        out_channels: out_c,
                        kernel: 3,
                        stride: if d == 0 { 2 } else { 1 },
                        pad: 1,
                    },
                ));
                in_c = out_c;
            }
        }
        specs
    }

    fn resolve(config: &DetectorConfig, params: &DetectorParams) -> Result<Self, DetectorError> {
        let conv = |name: &str, shape: ConvShape| -> Result<ConvParams, DetectorError> {
            let w = lookup(params, &format!("{name}.weight"))?;
            let b = lookup(params, &format!("{name}.bias"))?;
            if params.data(w).len() != shape.weight_len() || params.data(b).len() != shape.out_channels {
                return Err(DetectorError::Config(format!("shape mismatch for {name}")));
            }
            Ok(ConvParams { shape, w, b })
        };
        let mut backbone = Vec::new();
        let mut stage_outputs = [0; 4];
        let mut count = 0;
        for (s, &depth) in config.stage_depth.iter().enumerate() {
            if depth == 0 {
                return Err(DetectorError::Config(format!("stage {s} has zero depth")));
            }
            count += depth;
            if s >= 1 {
                stage_outputs[s - 1] = count;
            }
        }
        for (name, shape) in Self::conv_specs(config) {
            backbone.push(conv(&name, shape)?);
        }
        let f = config.fpn_channels;
        let lateral_shape = |in_c| ConvShape {
            in_channels: in_c,
            out_channels: f,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let lateral = [0, 1, 2, 3].map(|i| conv(&format!("fpn.lateral{}", i + 2), lateral_shape(config.stage_channels[i + 1])));
        let [l0, l1, l2, l3] = lateral;
        let a = config.anchor_ratios.len();
        let one = |out| ConvShape {
            in_channels: f,
            out_channels: out,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let dense = |name: &str, out: usize| -> Result<DenseParams, DetectorError> {
            Ok(DenseParams {
                w: lookup(params, &format!("{name}.weight"))?,
                b: lookup(params, &format!("{name}.bias"))?,
                out,
            })
        };
        let cls = |name: &str| -> Result<(usize, Option<usize>), DetectorError> {
            Ok((lookup(params, &format!("{name}.weight"))?, params.index_of(&format!("{name}.bias"))))
        };
        Ok(Self {
            backbone,
            stage_outputs,
            lateral: [l0?, l1?, l2?, l3?],
            rpn_conv: conv(
                "rpn.conv",
                ConvShape {
                    in_channels: f,
                    out_channels: f,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            )?,
            rpn_cls: conv("rpn.cls", one(a))?,
            rpn_reg: conv("rpn.reg", one(4 * a))?,
            fc1: dense("roi.fc1", config.fc_dim)?,
            fc2: dense("roi.fc2", config.fc_dim)?,
            cls_base: cls("cls_base")?,
            cls_novel: cls("cls_novel")?,
            reg: dense("reg", 4)?,
        })
    }
}

/// Raw RPN outputs flattened over all levels in `(level, y, x, ratio)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub anchors: Vec<BoundingBox>,
    pub objectness: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
    /// Start of each level in the flattened arrays.
    pub level_offsets: Vec<usize>,
}

/// A sampled training ROI with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub bbox: BoundingBox,
    /// Index in `[base, novel, background]` order.
    pub label: usize,
    /// Unnormalised regression target (only meaningful for foreground).
    pub target: [f64; 4],
}

#[derive(Debug, Clone)]
struct RoiCache {
    level: usize,
    sampling: RoiSampling,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    feature: Vec<f64>,
}

/// Everything kept from a training forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    backbone_acts: Vec<FeatureMap>,
    pub pyramid: FeaturePyramid,
    rpn_hidden: Vec<FeatureMap>,
    pub rpn: RpnOutput,
    pub rpn_targets: RpnTargets,
    pub rois: Vec<RoiSample>,
    roi_cache: Vec<RoiCache>,
    pub heads: Vec<HeadOutputs>,
}

/// Upstream gradients fed into [`MiniDetector::backward`].
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    /// Direct gradients on the pyramid levels.
    pub pyramid: Option<Vec<FeatureMap>>,
    pub rpn_objectness: Vec<f64>,
    pub rpn_deltas: Vec<[f64; 4]>,
    /// Per ROI, over the base head rows (background last).
    pub base_logits: Vec<Vec<f64>>,
    pub novel_logits: Vec<Vec<f64>>,
    /// Per ROI, with respect to the de-normalised deltas.
    pub deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct MiniDetector {
    pub config: DetectorConfig,
    pub layout: HeadLayout,
    pub params: DetectorParams,
    arch: Arch,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

struct Heads {
    base: ClassifierHead,
    novel: ClassifierHead,
    reg: RegressorWeights,
}

impl MiniDetector {
    /// Fresh detector with seeded initialisation.
    pub fn new(config: DetectorConfig, layout: HeadLayout, seed: u64) -> Result<Self, DetectorError> {
        if layout.base.is_empty() {
            return Err(DetectorError::Config("at least one base category is required".into()));
        }
        if let ClassifierKind::Cosine { alpha } = config.classifier {
            if alpha.is_nan() || alpha <= 0.0 {
                return Err(crate::heads::HeadError::NonPositiveAlpha(alpha).into());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DetectorParams::new();
        let conv = |p: &mut DetectorParams, rng: &mut ChaCha8Rng, name: &str, group: &str, s: ConvShape, std: Option<f64>| {
            let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
            let std = std.unwrap_or((2.0 / fan_in).sqrt());
            p.push(
                &format!("{name}.weight"),
                group,
                vec![s.out_channels, s.in_channels, s.kernel, s.kernel],
                normal_vec(rng, s.weight_len(), std),
            );
            p.push(&format!("{name}.bias"), group, vec![s.out_channels], vec![0.0; s.out_channels]);
        };
        for (name, shape) in Arch::conv_specs(&config) {
            conv(&mut p, &mut rng, &name, GROUP_BACKBONE, shape, None);
        }
        let f = config.fpn_channels;
        for i in 0..4 {
            let s = ConvShape {
                in_channels: config.stage_channels[i + 1],
                out_channels: f,
                kernel: 1,
                stride: 1,
                pad: 0,
            };
            let std = (1.0 / s.in_channels as f64).sqrt();
            conv(&mut p, &mut rng, &format!("fpn.lateral{}", i + 2), GROUP_FPN, s, Some(std));
        }
        let a = config.anchor_ratios.len();
        let s3 = ConvShape {
            in_channels: f,
            out_channels: f,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        conv(&mut p, &mut rng, "rpn.conv", GROUP_RPN, s3, None);
        for (name, out) in [("rpn.cls", a), ("rpn.reg", 4 * a)] {
            let s = ConvShape {
                in_channels: f,
                out_channels: out,
                kernel: 1,
                stride: 1,
                pad: 0,
            };
            conv(&mut p, &mut rng, name, GROUP_RPN, s, Some(0.01));
        }
        let pooled = f * config.roi_pool * config.roi_pool;
        let d = config.fc_dim;
        for (name, fan_in) in [("roi.fc1", pooled), ("roi.fc2", d)] {
            p.push(&format!("{name}.weight"), GROUP_ROI, vec![d, fan_in], normal_vec(&mut rng, d * fan_in, (2.0 / fan_in as f64).sqrt()));
            p.push(&format!("{name}.bias"), GROUP_ROI, vec![d], vec![0.0; d]);
        }
        let linear = matches!(config.classifier, ClassifierKind::Linear);
        for (name, group, rows) in [
            ("cls_base", GROUP_CLS_BASE, layout.base.len() + 1),
            ("cls_novel", GROUP_CLS_NOVEL, layout.novel.len()),
        ] {
            p.push(&format!("{name}.weight"), group, vec![rows, d], normal_vec(&mut rng, rows * d, 0.01));
            if linear {
                p.push(&format!("{name}.bias"), group, vec![rows], vec![0.0; rows]);
            }
        }
        p.push("reg.weight", GROUP_REG, vec![4, d], normal_vec(&mut rng, 4 * d, 0.001));
        p.push("reg.bias", GROUP_REG, vec![4], vec![0.0; 4]);
        Self::from_parts(config, layout, p)
    }

    pub fn from_parts(config: DetectorConfig, layout: HeadLayout, params: DetectorParams) -> Result<Self, DetectorError> {
        let arch = Arch::resolve(&config, &params)?;
        let rows = |i: usize| params.tensors()[i].shape[0];
        if rows(arch.cls_base.0) != layout.base.len() + 1 || rows(arch.cls_novel.0) != layout.novel.len() {
            return Err(DetectorError::Config(
                "classifier rows do not match the category layout".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            params,
            arch,
        })
    }

    /// Re-resolves parameter indices after the parameter set was replaced.
    pub fn set_params(&mut self, params: DetectorParams) -> Result<(), DetectorError> {
        self.arch = Arch::resolve(&self.config, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn num_base(&self) -> usize {
        self.layout.base.len()
    }

    fn heads(&self) -> Result<Heads, DetectorError> {
        let d = self.config.fc_dim;
        let make = |(w, b): (usize, Option<usize>), background: bool| -> Result<ClassifierHead, DetectorError> {
            let weights = self.params.data(w).to_vec();
            let rows = weights.len() / d;
            Ok(match self.config.classifier {
                ClassifierKind::Cosine { alpha } => {
                    ClassifierHead::Cosine(CosineHeadWeights::new(weights, rows, d, alpha, background)?)
                }
                ClassifierKind::Linear => ClassifierHead::Linear(LinearHeadWeights {
                    weights,
                    bias: b.map(|b| self.params.data(b).to_vec()).unwrap_or_else(|| vec![0.0; rows]),
                    rows,
                    dim: d,
                }),
            })
        };
        let rb = self.params.data(self.arch.reg.b);
        Ok(Heads {
            base: make(self.arch.cls_base, true)?,
            novel: make(self.arch.cls_novel, false)?,
            reg: RegressorWeights {
                weights: self.params.data(self.arch.reg.w).to_vec(),
                bias: [rb[0], rb[1], rb[2], rb[3]],
                stds: self.config.delta_stds,
            },
        })
    }

    fn preprocess(&self, image: &DefectImage) -> FeatureMap {
        let im = image.resized(self.config.input_size);
        let n = im.pixels.len();
        let mut data = Vec::with_capacity(n * self.config.in_channels);
        for _ in 0..self.config.in_channels {
            data.extend(im.pixels.iter().map(|&v| (v as f64 - 0.5) / 0.25));
        }
        FeatureMap::from_vec(self.config.in_channels, im.height, im.width, data)
    }

    fn backbone_forward(&self, input: FeatureMap) -> Vec<FeatureMap> {
        let mut acts = vec![input];
        for c in &self.arch.backbone {
            let mut y = conv2d_forward(acts.last().expect("input"), &c.shape, self.params.data(c.w), self.params.data(c.b));
            relu_inplace(&mut y);
            acts.push(y);
        }
        acts
    }

    fn fpn_forward(&self, acts: &[FeatureMap]) -> FeaturePyramid {
        let mut levels: Vec<FeatureMap> = (0..4)
            .map(|i| {
                let l = &self.arch.lateral[i];
                conv2d_forward(&acts[self.arch.stage_outputs[i]], &l.shape, self.params.data(l.w), self.params.data(l.b))
            })
            .collect();
        for i in (0..3).rev() {
            let up = upsample2x(&levels[i + 1], levels[i].height, levels[i].width);
            levels[i].add_assign(&up);
        }
        FeaturePyramid {
            levels,
            strides: LEVEL_STRIDES.to_vec(),
        }
    }

    fn rpn_forward(&self, pyramid: &FeaturePyramid) -> (RpnOutput, Vec<FeatureMap>) {
        let ratios = &self.config.anchor_ratios;
        let a = ratios.len();
        let mut out = RpnOutput {
            anchors: Vec::new(),
            objectness: Vec::new(),
            deltas: Vec::new(),
            level_offsets: Vec::new(),
        };
        let mut hidden_maps = Vec::with_capacity(4);
        for (level, p) in pyramid.levels.iter().enumerate() {
            let (conv, cls, reg) = (&self.arch.rpn_conv, &self.arch.rpn_cls, &self.arch.rpn_reg);
            let mut hidden = conv2d_forward(p, &conv.shape, self.params.data(conv.w), self.params.data(conv.b));
            relu_inplace(&mut hidden);
            let obj = conv2d_forward(&hidden, &cls.shape, self.params.data(cls.w), self.params.data(cls.b));
            let del = conv2d_forward(&hidden, &reg.shape, self.params.data(reg.w), self.params.data(reg.b));
            let stride = pyramid.strides[level];
            out.level_offsets.push(out.anchors.len());
            out.anchors.extend(level_anchors(
                p.height,
                p.width,
                stride,
                self.config.anchor_scale * stride as f64,
                ratios,
            ));
            for y in 0..p.height {
                for x in 0..p.width {
                    for r in 0..a {
                        out.objectness.push(obj.at(r, y, x));
                        out.deltas.push([0, 1, 2, 3].map(|k| del.at(4 * r + k, y, x)));
                    }
                }
            }
            hidden_maps.push(hidden);
        }
        (out, hidden_maps)
    }

    fn proposals_from(&self, rpn: &RpnOutput, post_nms: usize, nms_iou: f64) -> Vec<Proposal> {
        let size = self.config.input_size as f64;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut ends = rpn.level_offsets.clone();
        ends.push(rpn.anchors.len());
        for w in ends.windows(2) {
            let mut idx: Vec<usize> = (w[0]..w[1]).collect();
            idx.sort_by(|&i, &j| rpn.objectness[j].total_cmp(&rpn.objectness[i]).then(i.cmp(&j)));
            idx.truncate(self.config.rpn_pre_nms_top);
            for i in idx {
                let b = decode_deltas(&rpn.anchors[i], &rpn.deltas[i]).clamped(size, size);
                if b.width() >= self.config.min_proposal_size && b.height() >= self.config.min_proposal_size {
                    boxes.push(b);
                    scores.push(1.0 / (1.0 + (-rpn.objectness[i]).exp()));
                }
            }
        }
        let mut keep = nms(&boxes, &scores, nms_iou);
        keep.truncate(post_nms);
        keep.into_iter()
            .map(|i| Proposal {
                bbox: boxes[i],
                objectness: scores[i],
            })
            .collect()
    }

    fn roi_level(&self, b: &BoundingBox) -> usize {
        let s = b.area().sqrt().max(1e-6);
        let k = (self.config.canonical_level as f64 + (s / self.config.canonical_size).log2()).floor();
        (k.clamp(2.0, 5.0) as usize) - 2
    }

    fn roi_forward(&self, pyramid: &FeaturePyramid, b: &BoundingBox) -> RoiCache {
        let level = self.roi_level(b);
        let map = &pyramid.levels[level];
        let sampling = RoiSampling::new(
            b,
            pyramid.strides[level],
            map.height,
            map.width,
            self.config.roi_pool,
            self.config.roi_samples,
        );
        let pooled = sampling.forward(map);
        let (fc1, fc2) = (self.arch.fc1, self.arch.fc2);
        let mut hidden = linear_forward(&pooled, self.params.data(fc1.w), self.params.data(fc1.b), fc1.out);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut feature = linear_forward(&hidden, self.params.data(fc2.w), self.params.data(fc2.b), fc2.out);
        feature.iter_mut().for_each(|v| *v = v.max(0.0));
        RoiCache {
            level,
            sampling,
            pooled,
            hidden,
            feature,
        }
    }

    fn head_outputs(&self, heads: &Heads, feature: &[f64]) -> Result<HeadOutputs, DetectorError> {
        let mut out = classify_incremental(feature, &heads.base, &heads.novel)?;
        out.box_deltas = regress_class_agnostic(feature, &heads.reg);
        Ok(out)
    }

    /// Pyramid for an image, resized to the configured input first.
    pub fn pyramid(&self, image: &DefectImage) -> Result<FeaturePyramid, DetectorError> {
        let acts = self.backbone_forward(self.preprocess(image));
        let pyr = self.fpn_forward(&acts);
        pyr.check_finite()?;
        Ok(pyr)
    }

    /// Head outputs for boxes given in input coordinates.
    pub fn score_boxes(&self, pyramid: &FeaturePyramid, boxes: &[BoundingBox]) -> Result<Vec<HeadOutputs>, DetectorError> {
        let heads = self.heads()?;
        boxes
            .iter()
            .map(|b| self.head_outputs(&heads, &self.roi_forward(pyramid, b).feature))
            .collect()
    }

    fn rpn_targets(&self, anchors: &[BoundingBox], gts: &[BoundingBox], rng: &mut ChaCha8Rng) -> RpnTargets {
        let n = anchors.len();
        let mut labels = vec![AnchorLabel::Ignore; n];
        let mut deltas = vec![[0.0; 4]; n];
        let mut assigned = vec![usize::MAX; n];
        if gts.is_empty() {
            labels.iter_mut().for_each(|l| *l = AnchorLabel::Negative);
        } else {
            let mut gt_best = vec![0.0f64; gts.len()];
            let ious: Vec<Vec<f64>> = anchors
                .iter()
                .map(|a| gts.iter().map(|g| iou(a, g)).collect())
                .collect();
            for row in &ious {
                for (g, v) in row.iter().enumerate() {
                    gt_best[g] = gt_best[g].max(*v);
                }
            }
            for (i, row) in ious.iter().enumerate() {
                let (g, best) = row
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
                if best < self.config.rpn_neg_iou {
                    labels[i] = AnchorLabel::Negative;
                }
                if best >= self.config.rpn_pos_iou {
                    labels[i] = AnchorLabel::Positive;
                    assigned[i] = g;
                }
            }
            // every ground truth keeps its best-matching anchors
            for (g, &best) in gt_best.iter().enumerate() {
                if best >= self.config.rpn_neg_iou {
                    for (i, row) in ious.iter().enumerate() {
                        if row[g] == best {
                            labels[i] = AnchorLabel::Positive;
                            assigned[i] = g;
                        }
                    }
                }
            }
        }
        let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
        let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let max_pos = (self.config.rpn_batch_per_image as f64 * self.config.rpn_positive_fraction) as usize;
        pos.truncate(max_pos);
        neg.truncate(self.config.rpn_batch_per_image - pos.len());
        labels.iter_mut().for_each(|l| *l = AnchorLabel::Ignore);
        for &i in &pos {
            labels[i] = AnchorLabel::Positive;
            deltas[i] = encode_deltas(&anchors[i], &gts[assigned[i]]);
        }
        for &i in &neg {
            labels[i] = AnchorLabel::Negative;
        }
        RpnTargets { labels, deltas }
    }

    fn sample_rois(
        &self,
        proposals: &[Proposal],
        gts: &[(BoundingBox, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Vec<RoiSample> {
        let bg = self.layout.background_index();
        let candidates: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).chain(gts.iter().map(|g| g.0)).collect();
        let mut fg = Vec::new();
        let mut bgs = Vec::new();
        for b in candidates {
            let best = gts
                .iter()
                .enumerate()
                .map(|(g, (gb, _))| (g, iou(&b, gb)))
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((g, v)) if v >= self.config.roi_fg_iou => fg.push(RoiSample {
                    bbox: b,
                    label: gts[g].1,
                    target: encode_deltas(&b, &gts[g].0),
                }),
                _ => bgs.push(RoiSample {
                    bbox: b,
                    label: bg,
                    target: [0.0; 4],
                }),
            }
        }
        fg.shuffle(rng);
        bgs.shuffle(rng);
        let max_fg = (self.config.rois_per_image as f64 * self.config.roi_positive_fraction) as usize;
        fg.truncate(max_fg);
        bgs.truncate(self.config.rois_per_image - fg.len());
        fg.extend(bgs);
        fg
    }

    /// Training forward pass: pyramid, RPN outputs and sampled targets, and
    /// head outputs on sampled ROIs. Ground truth outside the head layout is
    /// ignored.
    pub fn train_forward(&self, image: &DefectImage, rng: &mut ChaCha8Rng) -> Result<TrainForward, DetectorError> {
        self.train_forward_inner(image, None, rng)
    }

    /// Like [`train_forward`](Self::train_forward) but with fixed ROIs in
    /// input coordinates instead of sampled ones.
    pub fn train_forward_with_rois(
        &self,
        image: &DefectImage,
        rois: Vec<RoiSample>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward, DetectorError> {
        self.train_forward_inner(image, Some(rois), rng)
    }

    fn train_forward_inner(
        &self,
        image: &DefectImage,
        fixed_rois: Option<Vec<RoiSample>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward, DetectorError> {
        let image = image.resized(self.config.input_size);
        let acts = self.backbone_forward(self.preprocess(&image));
        let pyramid = self.fpn_forward(&acts);
        pyramid.check_finite()?;
        let (rpn, rpn_hidden) = self.rpn_forward(&pyramid);
        let gts: Vec<(BoundingBox, usize)> = image
            .instances
            .iter()
            .filter_map(|i| self.layout.merged_index(&i.category).map(|l| (i.bbox, l)))
            .collect();
        let gt_boxes: Vec<BoundingBox> = gts.iter().map(|g| g.0).collect();
        let rpn_targets = self.rpn_targets(&rpn.anchors, &gt_boxes, rng);
        let rois = match fixed_rois {
            Some(r) => r,
            None => {
                let proposals = self.proposals_from(&rpn, self.config.rpn_post_nms_train, self.config.rpn_nms_iou);
                self.sample_rois(&proposals, &gts, rng)
            }
        };
        let heads = self.heads()?;
        let roi_cache: Vec<RoiCache> = rois.iter().map(|r| self.roi_forward(&pyramid, &r.bbox)).collect();
        let head_out = roi_cache
            .iter()
            .map(|c| self.head_outputs(&heads, &c.feature))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TrainForward {
            backbone_acts: acts,
            pyramid,
            rpn_hidden,
            rpn,
            rpn_targets,
            rois,
            roi_cache,
            heads: head_out,
        })
    }

    /// Backpropagates `grads` through the whole network.
    pub fn backward(&self, fwd: &TrainForward, grads: &OutputGrads) -> Result<ParamGrads, DetectorError> {
        let mut out = self.params.zero_grads();
        let mut g_pyr: Vec<FeatureMap> = match &grads.pyramid {
            Some(g) => g.clone(),
            None => fwd.pyramid.levels.iter().map(FeatureMap::zeros_like).collect(),
        };
        let heads = self.heads()?;

        // ROI heads
        let (fc1, fc2, reg) = (self.arch.fc1, self.arch.fc2, self.arch.reg);
        let d = self.config.fc_dim;
        for (r, cache) in fwd.roi_cache.iter().enumerate() {
            let f = &cache.feature;
            let mut gf = vec![0.0; d];
            if let Some(g) = grads.base_logits.get(r) {
                let hg = heads.base.backward(f, g);
                accumulate_head(&mut out, self.arch.cls_base, &hg);
                gf.iter_mut().zip(&hg.feature).for_each(|(a, b)| *a += b);
            }
            if let Some(g) = grads.novel_logits.get(r) {
                if !g.is_empty() {
                    let hg = heads.novel.backward(f, g);
                    accumulate_head(&mut out, self.arch.cls_novel, &hg);
                    gf.iter_mut().zip(&hg.feature).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gd) = grads.deltas.get(r) {
                let graw: Vec<f64> = (0..4).map(|k| gd[k] * self.config.delta_stds[k]).collect();
                let (gw, gb) = split_two(&mut out, reg.w, reg.b);
                let gin = linear_backward(f, self.params.data(reg.w), &graw, gw, gb);
                gf.iter_mut().zip(&gin).for_each(|(a, b)| *a += b);
            }
            relu_backward_inplace(f, &mut gf);
            let (gw, gb) = split_two(&mut out, fc2.w, fc2.b);
            let mut gh = linear_backward(&cache.hidden, self.params.data(fc2.w), &gf, gw, gb);
            relu_backward_inplace(&cache.hidden, &mut gh);
            let (gw, gb) = split_two(&mut out, fc1.w, fc1.b);
            let gp = linear_backward(&cache.pooled, self.params.data(fc1.w), &gh, gw, gb);
            cache.sampling.backward(&gp, &mut g_pyr[cache.level]);
        }

        // RPN
        let a = self.config.anchor_ratios.len();
        let has_rpn_grad = !grads.rpn_objectness.is_empty() || !grads.rpn_deltas.is_empty();
        if has_rpn_grad {
            for (level, p) in fwd.pyramid.levels.iter().enumerate() {
                let off = fwd.rpn.level_offsets[level];
                let mut g_obj = FeatureMap::zeros(a, p.height, p.width);
                let mut g_del = FeatureMap::zeros(4 * a, p.height, p.width);
                let plane = p.plane();
                let mut i = off;
                for y in 0..p.height {
                    for x in 0..p.width {
                        for r in 0..a {
                            let pos = y * p.width + x;
                            if let Some(g) = grads.rpn_objectness.get(i) {
                                g_obj.data[r * plane + pos] = *g;
                            }
                            if let Some(g) = grads.rpn_deltas.get(i) {
                                for k in 0..4 {
                                    g_del.data[(4 * r + k) * plane + pos] = g[k];
                                }
                            }
                            i += 1;
                        }
                    }
                }
                let hidden = &fwd.rpn_hidden[level];
                let (cls, regc, conv) = (self.arch.rpn_cls, self.arch.rpn_reg, self.arch.rpn_conv);
                let (gw, gb) = split_two(&mut out, cls.w, cls.b);
                let mut gh = conv2d_backward(hidden, &cls.shape, self.params.data(cls.w), &g_obj, gw, gb, true)
                    .expect("input grad requested");
                let (gw, gb) = split_two(&mut out, regc.w, regc.b);
                let gh2 = conv2d_backward(hidden, &regc.shape, self.params.data(regc.w), &g_del, gw, gb, true)
                    .expect("input grad requested");
                gh.add_assign(&gh2);
                relu_backward_inplace(&hidden.data, &mut gh.data);
                let (gw, gb) = split_two(&mut out, conv.w, conv.b);
                let gp = conv2d_backward(p, &conv.shape, self.params.data(conv.w), &gh, gw, gb, true)
                    .expect("input grad requested");
                g_pyr[level].add_assign(&gp);
            }
        }

        // FPN: P_l = lateral_l(C_l) + up(P_{l+1})
        let mut g_stage: Vec<Option<FeatureMap>> = vec![None; 4];
        for l in 0..4 {
            if l < 3 {
                let next = &fwd.pyramid.levels[l + 1];
                let down = upsample2x_backward(&g_pyr[l], next.height, next.width);
                g_pyr[l + 1].add_assign(&down);
            }
            let lat = self.arch.lateral[l];
            let c_in = &fwd.backbone_acts[self.arch.stage_outputs[l]];
            let (gw, gb) = split_two(&mut out, lat.w, lat.b);
            g_stage[l] = conv2d_backward(c_in, &lat.shape, self.params.data(lat.w), &g_pyr[l], gw, gb, true);
        }

        // backbone, last conv first
        let mut g_act: Option<FeatureMap> = None;
        for i in (0..self.arch.backbone.len()).rev() {
            let act_idx = i + 1;
            if let Some(s) = self.arch.stage_outputs.iter().position(|&o| o == act_idx) {
                if let Some(gs) = g_stage[s].take() {
                    match g_act.as_mut() {
                        Some(g) => g.add_assign(&gs),
                        None => g_act = Some(gs),
                    }
                }
            }
            let Some(mut g) = g_act.take() else {
                continue;
            };
            relu_backward_inplace(&fwd.backbone_acts[act_idx].data, &mut g.data);
            let c = self.arch.backbone[i];
            let (gw, gb) = split_two(&mut out, c.w, c.b);
            g_act = conv2d_backward(&fwd.backbone_acts[i], &c.shape, self.params.data(c.w), &g, gw, gb, i > 0);
        }
        Ok(out)
    }

    fn detect_in_input_frame(&self, pyramid: &FeaturePyramid, score_threshold: f64, nms_iou: f64) -> Result<Vec<(usize, BoundingBox, f64)>, DetectorError> {
        let (rpn, _) = self.rpn_forward(pyramid);
        let proposals = self.proposals_from(&rpn, self.config.rpn_post_nms_test, self.config.rpn_nms_iou);
        let heads = self.heads()?;
        let size = self.config.input_size as f64;
        let classes = self.layout.background_index();
        let mut per_class: Vec<(Vec<BoundingBox>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); classes];
        for p in &proposals {
            let cache = self.roi_forward(pyramid, &p.bbox);
            let out = self.head_outputs(&heads, &cache.feature)?;
            let scores = merge_head_scores(&out);
            let b = decode_deltas(&p.bbox, &out.box_deltas).clamped(size, size);
            if !b.is_valid() {
                continue;
            }
            for (c, &s) in scores[..classes].iter().enumerate() {
                if s > score_threshold && s > 0.0 {
                    per_class[c].0.push(b);
                    per_class[c].1.push(s);
                }
            }
        }
        let mut dets = Vec::new();
        for (c, (boxes, scores)) in per_class.iter().enumerate() {
            for k in nms(boxes, scores, nms_iou) {
                dets.push((c, boxes[k], scores[k]));
            }
        }
        dets.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        dets.truncate(self.config.max_detections);
        Ok(dets)
    }
}

fn split_two(grads: &mut ParamGrads, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = grads.data.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = grads.data.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn accumulate_head(out: &mut ParamGrads, (w, b): (usize, Option<usize>), hg: &crate::heads::HeadGrads) {
    out.data[w].iter_mut().zip(&hg.weights).for_each(|(a, g)| *a += g);
    if let (Some(b), Some(gb)) = (b, &hg.bias) {
        out.data[b].iter_mut().zip(gb).for_each(|(a, g)| *a += g);
    }
}

impl DetectorBackend for MiniDetector {
    fn extract_pyramid(&self, image: &DefectImage) -> Result<FeaturePyramid, DetectorError> {
        self.pyramid(image)
    }

    fn propose_regions(&self, pyramid: &FeaturePyramid, max_proposals: usize, nms_iou: f64) -> Result<Vec<Proposal>, DetectorError> {
        if pyramid.levels.is_empty() {
            return Err(DetectorError::EmptyPyramid);
        }
        let (rpn, _) = self.rpn_forward(pyramid);
        Ok(self.proposals_from(&rpn, max_proposals, nms_iou))
    }

    fn pool_roi_features(&self, pyramid: &FeaturePyramid, proposals: &[Proposal]) -> Result<Vec<RoiFeature>, DetectorError> {
        let size = self.config.input_size as f64;
        proposals
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let b = p.bbox.clamped(size, size);
                if b.area() <= 0.0 {
                    return Err(DetectorError::DegenerateRoi { index });
                }
                Ok(RoiFeature {
                    vector: self.roi_forward(pyramid, &b).feature,
                })
            })
            .collect()
    }

    fn detect(&self, image: &DefectImage, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>, DetectorError> {
        let pyramid = self.pyramid(image)?;
        let sx = image.width as f64 / self.config.input_size as f64;
        let sy = image.height as f64 / self.config.input_size as f64;
        Ok(self
            .detect_in_input_frame(&pyramid, score_threshold, nms_iou)?
            .into_iter()
            .map(|(c, b, s)| Detection {
                image_id: image.id.clone(),
                category: self.layout.category(c).expect("non-background class").clone(),
                bbox: b.scaled(sx, sy),
                confidence: s.clamp(0.0, 1.0),
            })
            .collect())
    }
}
