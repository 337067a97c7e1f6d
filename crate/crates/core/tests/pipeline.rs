use dkan_core::dataset::{generate_synthetic_dataset, neu_det_categories, SynthConfig};
use dkan_core::detector::boxes::nms;
use dkan_core::detector::{FeatureMap, Proposal};
use dkan_core::eval::iou;
use dkan_core::train::pretrain_base;
use dkan_core::{
    BoundingBox, CategoryId, DefectImage, DetectorBackend, DetectorConfig, FeaturePyramid, HeadLayout, MiniDetector,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn base_categories() -> Vec<CategoryId> {
    neu_det_categories()[..3].to_vec()
}

fn base_images(per_category: usize, seed: u64) -> Vec<DefectImage> {
    let cfg = SynthConfig {
        num_categories: 3,
        images_per_category: per_category,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, seed).unwrap()
}

struct Trained {
    model: MiniDetector,
    totals: Vec<f64>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = TrainConfig {
            pretrain_iterations: 400,
            ..TrainConfig::desk()
        };
        let mut totals = Vec::new();
        let model = pretrain_base(&base_images(30, 1), &base_categories(), &config, &mut |l| totals.push(l.loss_total)).unwrap();
        Trained { model, totals }
    })
}

#[test]
fn pretraining_reduces_loss() {
    let t = trained();
    assert_eq!(t.totals.len(), 400);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = mean(&t.totals[..50]);
    let last = mean(&t.totals[t.totals.len() - 50..]);
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn pretraining_is_deterministic() {
    let config = TrainConfig {
        pretrain_iterations: 5,
        ..TrainConfig::desk()
    };
    let images = base_images(4, 2);
    let a = pretrain_base(&images, &base_categories(), &config, &mut |_| {}).unwrap();
    let b = pretrain_base(&images, &base_categories(), &config, &mut |_| {}).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
}

#[test]
fn single_defect_gives_one_correct_detection() {
    let model = &trained().model;
    let held_out = base_images(5, 99);
    let image = held_out
        .iter()
        .find(|im| im.instances.len() == 1 && im.instances[0].category.name == "In")
        .unwrap();
    let truth = &image.instances[0];
    let dets = model.detect(image, 0.3, 0.5).unwrap();
    assert_eq!(dets.len(), 1, "{dets:?}");
    assert_eq!(dets[0].category, truth.category);
    assert!(iou(&dets[0].bbox, &truth.bbox) > 0.5);
}

#[test]
fn threshold_one_returns_nothing() {
    let model = &trained().model;
    for image in base_images(2, 5).iter() {
        assert!(model.detect(image, 1.0, 0.5).unwrap().is_empty());
        for d in model.detect(image, 0.0, 0.5).unwrap() {
            assert!((0.0..=1.0).contains(&d.confidence));
        }
    }
}

fn layout() -> HeadLayout {
    HeadLayout {
        base: base_categories(),
        novel: vec![],
    }
}

fn blank(size: usize) -> DefectImage {
    DefectImage {
        id: "blank".into(),
        width: size,
        height: size,
        pixels: vec![0.3; size * size],
        instances: vec![],
    }
}

#[test]
fn pyramid_levels_follow_strides() {
    let desk = MiniDetector::new(DetectorConfig::desk(), layout(), 0).unwrap();
    let p = desk.extract_pyramid(&blank(64)).unwrap();
    let sizes: Vec<(usize, usize)> = p.levels.iter().map(|l| (l.height, l.width)).collect();
    assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    assert!(p.levels.iter().all(|l| l.channels == p.channels()));
    assert_eq!(DetectorConfig::full().level_sizes(), [200, 100, 50, 25]);
}

#[test]
fn pyramid_at_full_resolution() {
    let config = DetectorConfig {
        input_size: 800,
        ..DetectorConfig::desk()
    };
    let m = MiniDetector::new(config, layout(), 0).unwrap();
    let p = m.extract_pyramid(&blank(800)).unwrap();
    let sizes: Vec<usize> = p.levels.iter().map(|l| l.height).collect();
    assert_eq!(sizes, vec![200, 100, 50, 25]);
}

#[test]
fn constant_maps_pool_to_equal_vectors() {
    let m = MiniDetector::new(DetectorConfig::desk(), layout(), 0).unwrap();
    let c = m.config.fpn_channels;
    let pyramid = FeaturePyramid {
        levels: m
            .config
            .level_sizes()
            .iter()
            .map(|&s| FeatureMap::from_vec(c, s, s, vec![0.7; c * s * s]))
            .collect(),
        strides: vec![4, 8, 16, 32],
    };
    let proposals: Vec<Proposal> = [(2.0, 3.0, 12.0, 20.0), (30.0, 30.0, 62.0, 50.0), (0.0, 0.0, 64.0, 64.0)]
        .iter()
        .map(|&(a, b, c, d)| Proposal {
            bbox: BoundingBox::new(a, b, c, d).unwrap(),
            objectness: 0.5,
        })
        .collect();
    let feats = m.pool_roi_features(&pyramid, &proposals).unwrap();
    assert_eq!(feats.len(), 3);
    for f in &feats[1..] {
        for (a, b) in f.vector.iter().zip(&feats[0].vector) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// A box survives when it overlaps no higher-scored survivor.
fn nms_oracle(boxes: &[BoundingBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut keep: Vec<usize> = Vec::new();
    for i in idx {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thr) {
            keep.push(i);
        }
    }
    keep
}

#[test]
fn nms_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let n = rng.gen_range(0..15);
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..30.0);
                let y = rng.gen_range(0.0..30.0);
                BoundingBox::new(x, y, x + rng.gen_range(2.0..15.0), y + rng.gen_range(2.0..15.0)).unwrap()
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let thr = rng.gen_range(0.2..0.8);
        assert_eq!(nms(&boxes, &scores, thr), nms_oracle(&boxes, &scores, thr));
    }
}
