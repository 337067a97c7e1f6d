//! Two-stage training: base pretraining, then teacher-student fine-tuning
//! with feature and logit distillation.

use crate::dataset::{sample_k_shot, CategoryId, DatasetError, DatasetPartition, DefectImage};
use crate::detector::losses::{rcnn_loss, rpn_loss};
use crate::detector::{
    DetectorBackend, DetectorConfig, DetectorError, DetectorParams, HeadLayout, MiniDetector, OutputGrads,
    ParamGrads, TrainForward,
};
use crate::distill::{fka_loss_with_grad, lka_loss_with_grad, total_loss, DistillError, DistillWeights, Temperature};
use crate::eval::{evaluate_groups, Detection, EvalError, EvalReport};
use crate::heads::ClassifierKind;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Detections below this confidence are dropped before AP evaluation.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.05;
pub const EVAL_NMS_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training images")]
    EmptyData,
    #[error("image {image} has instances of {category}, which is not a base category")]
    NonBaseInstance { image: String, category: String },
    #[error("training diverged at step {step}: {components}; last finite losses: {last_finite}")]
    Divergence {
        step: usize,
        components: String,
        last_finite: String,
    },
    #[error("teacher parameters changed during fine-tuning ({before} -> {after})")]
    TeacherMutated { before: String, after: String },
    #[error("student layout mismatch: {0}")]
    Layout(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneDataPolicy {
    NovelOnly,
    #[default]
    BalancedBasePlusNovel,
}

impl std::str::FromStr for FinetuneDataPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "novel_only" => Ok(Self::NovelOnly),
            "balanced" | "balanced_base_plus_novel" => Ok(Self::BalancedBasePlusNovel),
            _ => Err(format!("unknown finetune data policy {s:?} (novel_only, balanced_base_plus_novel)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub input_size: usize,
    pub batch_size: usize,
    /// Fine-tuning steps.
    pub iterations: usize,
    /// Base pretraining steps.
    pub pretrain_iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub tau: Temperature,
    pub distill: DistillWeights,
    pub alpha: f64,
    /// Plain linear classifier instead of the cosine one.
    pub linear_classifier: bool,
    pub seed: u64,
    pub finetune_data_policy: FinetuneDataPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: 800,
            batch_size: 4,
            iterations: 2000,
            pretrain_iterations: 2000,
            learning_rate: 0.02,
            weight_decay: 1e-4,
            momentum: 0.9,
            tau: Temperature::default(),
            distill: DistillWeights::default(),
            alpha: 20.0,
            linear_classifier: false,
            seed: 0,
            finetune_data_policy: FinetuneDataPolicy::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized preset for the bundled mini detector.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            iterations: 500,
            pretrain_iterations: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.input_size < 32 {
            return bad("input_size must be at least 32");
        }
        if self.batch_size == 0 || self.iterations == 0 || self.pretrain_iterations == 0 {
            return bad("batch_size and iteration counts must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive, weight_decay non-negative, momentum in [0, 1)");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        DistillWeights::new(self.distill.lambda_fka, self.distill.lambda_lka)?;
        Ok(())
    }

    pub fn classifier(&self) -> ClassifierKind {
        if self.linear_classifier {
            ClassifierKind::Linear
        } else {
            ClassifierKind::Cosine { alpha: self.alpha }
        }
    }

    /// Detector settings implied by this config.
    pub fn detector_config(&self) -> DetectorConfig {
        let mut c = if self.input_size <= 128 {
            DetectorConfig::desk()
        } else {
            DetectorConfig::full()
        };
        c.input_size = self.input_size;
        c.classifier = self.classifier();
        c
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_rpn: f64,
    pub loss_rcnn: f64,
    pub loss_fka: f64,
    pub loss_lka: f64,
    pub loss_total: f64,
}

impl StepLog {
    fn describe(&self) -> String {
        format!(
            "rpn={} rcnn={} fka={} lka={} total={}",
            self.loss_rpn, self.loss_rcnn, self.loss_fka, self.loss_lka, self.loss_total
        )
    }
}

/// SGD with momentum and L2 weight decay; frozen tensors are skipped.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &DetectorParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.zero_grads().data,
        }
    }

    pub fn step(&mut self, params: &mut DetectorParams, grads: &ParamGrads) {
        for (i, (v, g)) in self.velocity.iter_mut().zip(&grads.data).enumerate() {
            if params.is_frozen(i) {
                continue;
            }
            let w = params.data_mut(i);
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= self.learning_rate * *v;
            }
        }
    }
}

/// Frozen copy of the pretrained detector.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    model: MiniDetector,
    checksum: String,
}

impl TeacherSnapshot {
    pub fn new(base: &MiniDetector) -> Self {
        let mut model = base.clone();
        model.params.freeze_all();
        let checksum = model.params.checksum();
        Self { model, checksum }
    }

    pub fn model(&self) -> &MiniDetector {
        &self.model
    }

    pub fn checksum(&self) -> String {
        self.model.params.checksum()
    }

    pub fn verify(&self) -> Result<(), TrainError> {
        let now = self.checksum();
        if now != self.checksum {
            return Err(TrainError::TeacherMutated {
                before: self.checksum.clone(),
                after: now,
            });
        }
        Ok(())
    }
}

struct ImageStep {
    log: [f64; 4],
    grads: ParamGrads,
}

fn image_step(
    model: &MiniDetector,
    teacher: Option<&MiniDetector>,
    image: &DefectImage,
    rng: &mut ChaCha8Rng,
    config: &TrainConfig,
) -> Result<ImageStep, TrainError> {
    let fwd: TrainForward = model.train_forward(image, rng)?;
    let dc = &model.config;
    let rpn = rpn_loss(&fwd.rpn.objectness, &fwd.rpn.deltas, &fwd.rpn_targets, dc.rpn_smooth_l1_beta);

    let stds = dc.delta_stds;
    let logits: Vec<Vec<f64>> = fwd.heads.iter().map(|h| h.merged_logits()).collect();
    let norm = |d: &[f64; 4]| [0, 1, 2, 3].map(|k| d[k] / stds[k]);
    let pred: Vec<[f64; 4]> = fwd.heads.iter().map(|h| norm(&h.box_deltas)).collect();
    let target: Vec<[f64; 4]> = fwd.rois.iter().map(|r| norm(&r.target)).collect();
    let labels: Vec<usize> = fwd.rois.iter().map(|r| r.label).collect();
    let rcnn = rcnn_loss(&logits, &pred, &labels, &target, model.layout.background_index(), dc.rcnn_smooth_l1_beta);

    let mut grads = OutputGrads {
        pyramid: None,
        rpn_objectness: rpn.grad_objectness,
        rpn_deltas: rpn.grad_deltas,
        base_logits: Vec::with_capacity(fwd.heads.len()),
        novel_logits: Vec::with_capacity(fwd.heads.len()),
        deltas: rcnn
            .grad_deltas
            .iter()
            .map(|g| [0, 1, 2, 3].map(|k| g[k] / stds[k]))
            .collect(),
    };
    for (h, g) in fwd.heads.iter().zip(&rcnn.grad_logits) {
        let (b, n) = h.split_merged_grad(g);
        grads.base_logits.push(b);
        grads.novel_logits.push(n);
    }

    let w = config.distill;
    let (mut fka, mut lka) = (0.0, 0.0);
    if let Some(teacher) = teacher.filter(|_| w.lambda_fka > 0.0 || w.lambda_lka > 0.0) {
        let t_pyr = teacher.pyramid(image)?;
        if w.lambda_fka > 0.0 {
            let (v, mut g) = fka_loss_with_grad(&t_pyr, &fwd.pyramid, config.tau)?;
            g.iter_mut().for_each(|m| m.scale(w.lambda_fka));
            fka = v;
            grads.pyramid = Some(g);
        }
        if w.lambda_lka > 0.0 && !fwd.rois.is_empty() {
            let boxes: Vec<_> = fwd.rois.iter().map(|r| r.bbox).collect();
            let t_logits: Vec<Vec<f64>> = teacher
                .score_boxes(&t_pyr, &boxes)?
                .iter()
                .map(|h| h.base_category_logits().to_vec())
                .collect();
            let s_logits: Vec<Vec<f64>> = fwd.heads.iter().map(|h| h.base_category_logits().to_vec()).collect();
            let (v, g) = lka_loss_with_grad(&s_logits, &t_logits, config.tau)?;
            lka = v;
            for (acc, g) in grads.base_logits.iter_mut().zip(g) {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += w.lambda_lka * gi;
                }
            }
        }
    }
    let param_grads = model.backward(&fwd, &grads)?;
    Ok(ImageStep {
        log: [rpn.value, rcnn.value, fka, lka],
        grads: param_grads,
    })
}

fn train_loop(
    model: &mut MiniDetector,
    teacher: Option<&TeacherSnapshot>,
    data: &[DefectImage],
    iterations: usize,
    config: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut opt = Sgd::new(&model.params, config.learning_rate, config.momentum, config.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut last_finite: Option<StepLog> = None;
    let bs = config.batch_size;
    for step in 0..iterations {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<Result<ImageStep, TrainError>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((step * bs + slot) as u64 + 1);
                image_step(model, teacher.map(|t| t.model()), &data[idx], &mut rng, config)
            })
            .collect();
        let mut sums = [0.0; 4];
        let mut grads = model.params.zero_grads();
        for r in results {
            let r = r?;
            sums.iter_mut().zip(r.log).for_each(|(s, v)| *s += v);
            grads.add_assign(&r.grads);
        }
        let n = bs as f64;
        grads.scale(1.0 / n);
        let [rpn, rcnn, fka, lka] = sums.map(|s| s / n);
        let total = total_loss(rpn, rcnn, fka, lka, config.distill);
        let entry = StepLog {
            step,
            loss_rpn: rpn,
            loss_rcnn: rcnn,
            loss_fka: fka,
            loss_lka: lka,
            loss_total: total.as_ref().copied().unwrap_or(f64::NAN),
        };
        if total.is_err() || !grads.is_finite() {
            return Err(TrainError::Divergence {
                step,
                components: entry.describe() + if grads.is_finite() { "" } else { " (non-finite gradients)" },
                last_finite: last_finite.map_or("none".into(), |l| l.describe()),
            });
        }
        log(&entry);
        last_finite = Some(entry);
        opt.step(&mut model.params, &grads);
    }
    Ok(())
}

/// Stage I: trains a detector on base categories only.
pub fn pretrain_base(
    base_train: &[DefectImage],
    base_categories: &[CategoryId],
    config: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<MiniDetector, TrainError> {
    config.validate()?;
    if base_train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    for im in base_train {
        if let Some(i) = im.instances.iter().find(|i| !base_categories.contains(&i.category)) {
            return Err(TrainError::NonBaseInstance {
                image: im.id.clone(),
                category: i.category.name.clone(),
            });
        }
    }
    let mut base = base_categories.to_vec();
    base.sort();
    let layout = HeadLayout { base, novel: vec![] };
    let mut model = MiniDetector::new(config.detector_config(), layout, config.seed)?;
    train_loop(&mut model, None, base_train, config.pretrain_iterations, config, config.seed, log)?;
    Ok(model)
}

/// Copies the pretrained detector into a student with an extra, freshly
/// initialised novel head. All groups are trainable.
pub fn build_student(base: &MiniDetector, novel_categories: &[CategoryId], config: &TrainConfig) -> Result<MiniDetector, TrainError> {
    if !base.layout.novel.is_empty() {
        return Err(TrainError::Layout(format!(
            "base detector already has {} novel rows",
            base.layout.novel.len()
        )));
    }
    if novel_categories.is_empty() {
        return Err(TrainError::Layout("no novel categories".into()));
    }
    if let Some(c) = novel_categories.iter().find(|c| base.layout.base.contains(c)) {
        return Err(TrainError::Layout(format!("{} is already a base category", c.name)));
    }
    let mut novel = novel_categories.to_vec();
    novel.sort();
    let d = base.config.fc_dim;
    let rows = novel.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x6e6f76);
    let dist = Normal::new(0.0, 0.01).expect("valid std");
    let mut params = DetectorParams::new();
    for t in base.params.tensors() {
        match t.name.as_str() {
            "cls_novel.weight" => {
                let w = (0..rows * d).map(|_| dist.sample(&mut rng)).collect();
                params.push(&t.name, &t.group, vec![rows, d], w)
            }
            "cls_novel.bias" => params.push(&t.name, &t.group, vec![rows], vec![0.0; rows]),
            _ => params.push(&t.name, &t.group, t.shape.clone(), t.data.clone()),
        };
    }
    let layout = HeadLayout {
        base: base.layout.base.clone(),
        novel,
    };
    Ok(MiniDetector::from_parts(base.config.clone(), layout, params)?)
}

/// Fine-tuning images under the configured policy: the K-shot novel set,
/// plus K seeded shots per base category when balanced.
pub fn finetune_data(partition: &DatasetPartition, policy: FinetuneDataPolicy) -> Result<Vec<DefectImage>, TrainError> {
    let mut data = Vec::new();
    if policy == FinetuneDataPolicy::BalancedBasePlusNovel {
        data = sample_k_shot(
            &partition.base_train,
            &partition.spec.base_categories,
            partition.spec.k_shot,
            partition.spec.seed,
        )?;
    }
    data.extend(partition.novel_train.iter().cloned());
    Ok(data)
}

/// Stage II: trains the student against the frozen teacher.
pub fn finetune_dkan(
    mut student: MiniDetector,
    teacher: &TeacherSnapshot,
    data: &[DefectImage],
    config: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<MiniDetector, TrainError> {
    config.validate()?;
    teacher.verify()?;
    if teacher.model().layout.base != student.layout.base {
        return Err(TrainError::Layout("teacher and student base categories differ".into()));
    }
    let mut student_cfg = student.config.clone();
    student_cfg.classifier = config.classifier();
    if student_cfg != student.config {
        student = MiniDetector::from_parts(student_cfg, student.layout.clone(), student.params.clone())?;
    }
    train_loop(&mut student, Some(teacher), data, config.iterations, config, config.seed ^ 0x5eed, log)?;
    teacher.verify()?;
    Ok(student)
}

/// Runs the detector over the test split and scores it.
pub fn evaluate_model(model: &MiniDetector, partition: &DatasetPartition) -> Result<(EvalReport, Vec<Detection>), TrainError> {
    let dets: Vec<Vec<Detection>> = partition
        .test
        .par_iter()
        .map(|im| model.detect(im, EVAL_SCORE_THRESHOLD, EVAL_NMS_IOU))
        .collect::<Result<_, _>>()?;
    let dets: Vec<Detection> = dets.into_iter().flatten().collect();
    Ok((evaluate_groups(&dets, partition)?, dets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: EvalReport,
    pub log: Vec<StepLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub per_seed: Vec<SeedReport>,
    pub failures: Vec<SeedFailure>,
    pub mean: Option<EvalReport>,
}

/// Category-wise mean of several reports over the same split.
pub fn mean_report(reports: &[&EvalReport]) -> Option<EvalReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let per: BTreeMap<String, f64> = first
        .per_category_ap
        .keys()
        .map(|k| (k.clone(), reports.iter().map(|r| r.per_category_ap[k]).sum::<f64>() / n))
        .collect();
    let mut confusion = first.confusion.clone();
    for (i, row) in confusion.ratios.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = reports.iter().map(|r| r.confusion.ratios[i][j]).sum::<f64>() / n;
        }
    }
    for (i, row) in confusion.counts.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = reports.iter().map(|r| r.confusion.counts[i][j]).sum::<usize>();
        }
    }
    Some(EvalReport::from_category_aps(
        per,
        first.base_categories.clone(),
        first.novel_categories.clone(),
        confusion,
    ))
}

/// One fine-tuning run per seed (`config.seed`, `config.seed + 1`, ...),
/// each with its own K-shot resample, evaluated on the shared test split.
pub fn run_experiment(
    partition: &DatasetPartition,
    base: &MiniDetector,
    config: &TrainConfig,
    num_seeds: usize,
) -> ExperimentReport {
    let teacher = TeacherSnapshot::new(base);
    let outcomes: Vec<(u64, Result<SeedReport, TrainError>)> = (0..num_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed + i;
            (seed, run_seed(partition, base, &teacher, config, seed))
        })
        .collect();
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(r) => per_seed.push(r),
            Err(e) => failures.push(SeedFailure {
                seed,
                message: e.to_string(),
            }),
        }
    }
    let mean = mean_report(&per_seed.iter().map(|r| &r.report).collect::<Vec<_>>());
    ExperimentReport {
        per_seed,
        failures,
        mean,
    }
}

fn run_seed(
    partition: &DatasetPartition,
    base: &MiniDetector,
    teacher: &TeacherSnapshot,
    config: &TrainConfig,
    seed: u64,
) -> Result<SeedReport, TrainError> {
    let part = partition.with_k_shot_seed(seed)?;
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let data = finetune_data(&part, cfg.finetune_data_policy)?;
    let student = build_student(base, &part.spec.novel_categories, &cfg)?;
    let mut log = Vec::new();
    let student = finetune_dkan(student, teacher, &data, &cfg, &mut |l| log.push(*l))?;
    let (report, _) = evaluate_model(&student, &part)?;
    Ok(SeedReport { seed, report, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::neu_det_categories;

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.input_size, c.batch_size, c.iterations), (800, 4, 2000));
        assert_eq!((c.learning_rate, c.weight_decay), (0.02, 1e-4));
        assert_eq!(c.tau.value(), 5.0);
        assert_eq!((c.distill.lambda_fka, c.distill.lambda_lka), (1.0, 0.01));
        assert_eq!(c.alpha, 20.0);
        assert_eq!(c.finetune_data_policy, FinetuneDataPolicy::BalancedBasePlusNovel);
        let d = TrainConfig::desk();
        assert_eq!(d.input_size, 64);
        assert!(d.iterations <= 1000 && d.pretrain_iterations <= 1000);
    }

    #[test]
    fn sgd_skips_frozen_groups() {
        let mut p = DetectorParams::new();
        p.push("a", "g1", vec![2], vec![1.0, 1.0]);
        p.push("b", "g2", vec![1], vec![1.0]);
        p.freeze_group("g2");
        let mut opt = Sgd::new(&p, 0.1, 0.9, 0.0);
        let g = ParamGrads {
            data: vec![vec![1.0, 2.0], vec![5.0]],
        };
        opt.step(&mut p, &g);
        assert!((p.data(0)[0] - 0.9).abs() < 1e-15);
        assert!((p.data(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(p.data(1), &[1.0]);
        opt.step(&mut p, &g);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((p.data(0)[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn student_dimensions_and_copy() {
        let cats = neu_det_categories();
        let layout = HeadLayout {
            base: cats[..3].to_vec(),
            novel: vec![],
        };
        let base = MiniDetector::new(DetectorConfig::desk(), layout, 3).unwrap();
        let cfg = TrainConfig::desk();
        let s = build_student(&base, &cats[3..], &cfg).unwrap();
        assert_eq!(s.params.get("cls_base.weight").unwrap().shape[0], 4);
        assert_eq!(s.params.get("cls_novel.weight").unwrap().shape[0], 3);
        assert_eq!(s.params.get("cls_base.weight"), base.params.get("cls_base.weight"));
        assert!(s.params.frozen_groups().is_empty());
        let s2 = build_student(&base, &cats[3..], &cfg).unwrap();
        assert_eq!(s.params.get("cls_novel.weight"), s2.params.get("cls_novel.weight"));
        assert!(build_student(&s, &cats[3..], &cfg).is_err());
        assert!(build_student(&base, &cats[..1], &cfg).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("novel_only".parse::<FinetuneDataPolicy>().unwrap(), FinetuneDataPolicy::NovelOnly);
        assert_eq!("balanced".parse::<FinetuneDataPolicy>().unwrap(), FinetuneDataPolicy::BalancedBasePlusNovel);
        assert!("x".parse::<FinetuneDataPolicy>().is_err());
    }

    #[test]
    fn empty_base_train_is_rejected() {
        let cats = neu_det_categories();
        assert!(matches!(
            pretrain_base(&[], &cats[..3], &TrainConfig::desk(), &mut |_| {}),
            Err(TrainError::EmptyData)
        ));
    }
}
