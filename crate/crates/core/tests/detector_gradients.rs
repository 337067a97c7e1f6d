use dkan_core::dataset::{generate_synthetic_dataset, neu_det_categories, SynthConfig};
use dkan_core::detector::{DetectorConfig, FeatureMap, HeadLayout, MiniDetector, OutputGrads, TrainForward};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> DetectorConfig {
    DetectorConfig {
        input_size: 32,
        stage_channels: [4, 6, 6, 6, 6],
        stage_depth: [1, 2, 1, 1, 1],
        fpn_channels: 4,
        fc_dim: 8,
        roi_pool: 2,
        rois_per_image: 8,
        rpn_post_nms_train: 16,
        ..DetectorConfig::desk()
    }
}

fn upstream(fwd: &TrainForward, rng: &mut ChaCha8Rng) -> OutputGrads {
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let pyramid = fwd
        .pyramid
        .levels
        .iter()
        .map(|l| FeatureMap::from_vec(l.channels, l.height, l.width, r(l.data.len())))
        .collect();
    let n = fwd.rpn.anchors.len();
    OutputGrads {
        pyramid: Some(pyramid),
        rpn_objectness: r(n),
        rpn_deltas: r(4 * n).chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        base_logits: fwd.heads.iter().map(|h| r(h.base_logits.len())).collect(),
        novel_logits: fwd.heads.iter().map(|h| r(h.novel_logits.len())).collect(),
        deltas: fwd.heads.iter().map(|_| { let v = r(4); [v[0], v[1], v[2], v[3]] }).collect(),
    }
}

fn functional(fwd: &TrainForward, g: &OutputGrads) -> f64 {
    let mut s = 0.0;
    for (l, gl) in fwd.pyramid.levels.iter().zip(g.pyramid.as_ref().unwrap()) {
        s += l.data.iter().zip(&gl.data).map(|(a, b)| a * b).sum::<f64>();
    }
    s += fwd.rpn.objectness.iter().zip(&g.rpn_objectness).map(|(a, b)| a * b).sum::<f64>();
    for (d, gd) in fwd.rpn.deltas.iter().zip(&g.rpn_deltas) {
        s += (0..4).map(|k| d[k] * gd[k]).sum::<f64>();
    }
    for (i, h) in fwd.heads.iter().enumerate() {
        s += h.base_logits.iter().zip(&g.base_logits[i]).map(|(a, b)| a * b).sum::<f64>();
        s += h.novel_logits.iter().zip(&g.novel_logits[i]).map(|(a, b)| a * b).sum::<f64>();
        s += (0..4).map(|k| h.box_deltas[k] * g.deltas[i][k]).sum::<f64>();
    }
    s
}

#[test]
fn backward_matches_finite_differences() {
    let cats = neu_det_categories();
    let layout = HeadLayout {
        base: cats[..3].to_vec(),
        novel: cats[3..].to_vec(),
    };
    let images = generate_synthetic_dataset(
        &SynthConfig {
            images_per_category: 1,
            image_size: 32,
            ..SynthConfig::default()
        },
        5,
    )
    .unwrap();
    let image = images.iter().find(|i| layout.merged_index(&i.instances[0].category).is_some()).unwrap();
    let mut model = MiniDetector::new(small_config(), layout, 11).unwrap();
    let fwd = model.train_forward(image, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(!fwd.rois.is_empty());
    let g = upstream(&fwd, &mut ChaCha8Rng::seed_from_u64(2));
    let grads = model.backward(&fwd, &g).unwrap();

    let mut pick = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut checked = 0;
    let mut bad = Vec::new();
    for t in 0..model.params.len() {
        let name = model.params.tensors()[t].name.clone();
        for _ in 0..4 {
            let j = pick.gen_range(0..model.params.data(t).len());
            let orig = model.params.data(t)[j];
            let eval = |v: f64, m: &mut MiniDetector| {
                let mut p = m.params.clone();
                p.data_mut(t)[j] = v;
                m.set_params(p).unwrap();
                let f = m
                    .train_forward_with_rois(image, fwd.rois.clone(), &mut ChaCha8Rng::seed_from_u64(1))
                    .unwrap();
                functional(&f, &g)
            };
            let (up, dn) = (eval(orig + h, &mut model), eval(orig - h, &mut model));
            eval(orig, &mut model);
            let num = (up - dn) / (2.0 * h);
            let ana = grads.data[t][j];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
            checked += 1;
            if err > 1e-4 {
                bad.push(format!("{name}[{j}]: numeric {num} analytic {ana}"));
            }
        }
    }
    eprintln!("checked {checked}, mismatched {}", bad.len());
    assert!(checked > 40, "only {checked} entries checked");
    // isolated ReLU kinks may flip under the perturbation
    assert!(bad.len() * 20 <= checked, "{} of {checked} mismatched:\n{}", bad.len(), bad.join("\n"));
}
