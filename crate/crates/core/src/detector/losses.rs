//! Standard two-stage detection losses: sigmoid objectness + smooth-L1 for
//! the RPN, softmax cross-entropy + smooth-L1 for the ROI head. Every loss
//! returns its value together with the gradient of that value.

/// Anchor label for RPN training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Ignore,
    Negative,
    Positive,
}

/// Sampled RPN targets aligned with the anchor list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Regression target per anchor; only read for positives.
    pub deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnLoss {
    pub value: f64,
    pub classification: f64,
    pub regression: f64,
    pub grad_objectness: Vec<f64>,
    pub grad_deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcnnLoss {
    pub value: f64,
    pub classification: f64,
    pub regression: f64,
    pub grad_logits: Vec<Vec<f64>>,
    pub grad_deltas: Vec<[f64; 4]>,
}

pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Binary cross-entropy on a logit, with its derivative.
pub fn bce_with_logit(x: f64, target: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
    let p = 1.0 / (1.0 + (-x).exp());
    (loss, p - target)
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Mean objectness BCE over sampled anchors plus summed smooth-L1 over
/// positive anchors, both divided by the number of sampled anchors.
pub fn rpn_loss(objectness: &[f64], deltas: &[[f64; 4]], targets: &RpnTargets, beta: f64) -> RpnLoss {
    let n = objectness.len();
    let sampled = targets.labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    let mut grad_objectness = vec![0.0; n];
    let mut grad_deltas = vec![[0.0; 4]; n];
    if sampled == 0 {
        return RpnLoss {
            value: 0.0,
            classification: 0.0,
            regression: 0.0,
            grad_objectness,
            grad_deltas,
        };
    }
    let norm = 1.0 / sampled as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    for i in 0..n {
        let t = match targets.labels[i] {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Negative => 0.0,
            AnchorLabel::Positive => 1.0,
        };
        let (l, g) = bce_with_logit(objectness[i], t);
        cls += l * norm;
        grad_objectness[i] = g * norm;
        if targets.labels[i] == AnchorLabel::Positive {
            for k in 0..4 {
                let (l, g) = smooth_l1(deltas[i][k] - targets.deltas[i][k], beta);
                reg += l * norm;
                grad_deltas[i][k] = g * norm;
            }
        }
    }
    RpnLoss {
        value: cls + reg,
        classification: cls,
        regression: reg,
        grad_objectness,
        grad_deltas,
    }
}

/// Mean softmax cross-entropy over ROIs plus smooth-L1 on the box deltas of
/// foreground ROIs (label != `background`), normalised by the ROI count.
pub fn rcnn_loss(
    logits: &[Vec<f64>],
    deltas: &[[f64; 4]],
    labels: &[usize],
    target_deltas: &[[f64; 4]],
    background: usize,
    beta: f64,
) -> RcnnLoss {
    let n = logits.len();
    if n == 0 {
        return RcnnLoss {
            value: 0.0,
            classification: 0.0,
            regression: 0.0,
            grad_logits: Vec::new(),
            grad_deltas: Vec::new(),
        };
    }
    let norm = 1.0 / n as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    let mut grad_logits = Vec::with_capacity(n);
    let mut grad_deltas = vec![[0.0; 4]; n];
    for i in 0..n {
        let lsm = log_softmax(&logits[i]);
        cls -= lsm[labels[i]] * norm;
        let mut g: Vec<f64> = lsm.iter().map(|v| v.exp() * norm).collect();
        g[labels[i]] -= norm;
        grad_logits.push(g);
        if labels[i] != background {
            for k in 0..4 {
                let (l, gd) = smooth_l1(deltas[i][k] - target_deltas[i][k], beta);
                reg += l * norm;
                grad_deltas[i][k] = gd * norm;
            }
        }
    }
    RcnnLoss {
        value: cls + reg,
        classification: cls,
        regression: reg,
        grad_logits,
        grad_deltas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_rpn(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<[f64; 4]>, RpnTargets) {
        let obj = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let deltas = (0..n).map(|_| [(); 4].map(|_| rng.gen_range(-1.0..1.0))).collect();
        let labels = (0..n)
            .map(|_| match rng.gen_range(0..3) {
                0 => AnchorLabel::Ignore,
                1 => AnchorLabel::Negative,
                _ => AnchorLabel::Positive,
            })
            .collect();
        let tdeltas = (0..n).map(|_| [(); 4].map(|_| rng.gen_range(-1.0..1.0))).collect();
        (obj, deltas, RpnTargets { labels, deltas: tdeltas })
    }

    #[test]
    fn rpn_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = 1e-3;
        for _ in 0..20 {
            let (obj, deltas, t) = random_rpn(&mut rng, 12);
            let beta = 1.0 / 9.0;
            let base = rpn_loss(&obj, &deltas, &t, beta);
            for i in 0..obj.len() {
                let (mut p, mut m) = (obj.clone(), obj.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (rpn_loss(&p, &deltas, &t, beta).value - rpn_loss(&m, &deltas, &t, beta).value) / (2.0 * h);
                assert!(rel_err(fd, base.grad_objectness[i]) < 1e-4 || (fd - base.grad_objectness[i]).abs() < 1e-9);
                for k in 0..4 {
                    // skip points within h of the smooth-L1 kink
                    let d = deltas[i][k] - t.deltas[i][k];
                    if (d.abs() - beta).abs() < 2.0 * h {
                        continue;
                    }
                    let (mut p, mut m) = (deltas.clone(), deltas.clone());
                    p[i][k] += h;
                    m[i][k] -= h;
                    let fd = (rpn_loss(&obj, &p, &t, beta).value - rpn_loss(&obj, &m, &t, beta).value) / (2.0 * h);
                    let g = base.grad_deltas[i][k];
                    assert!(rel_err(fd, g) < 1e-4 || (fd - g).abs() < 1e-9, "{fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn rcnn_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-3;
        for _ in 0..20 {
            let n = 5;
            let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
            let deltas: Vec<[f64; 4]> = (0..n).map(|_| [(); 4].map(|_| rng.gen_range(-2.0..2.0))).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let targets: Vec<[f64; 4]> = (0..n).map(|_| [(); 4].map(|_| rng.gen_range(-2.0..2.0))).collect();
            let f = |l: &[Vec<f64>], d: &[[f64; 4]]| rcnn_loss(l, d, &labels, &targets, 3, 1.0).value;
            let base = rcnn_loss(&logits, &deltas, &labels, &targets, 3, 1.0);
            for i in 0..n {
                for j in 0..4 {
                    let (mut p, mut m) = (logits.clone(), logits.clone());
                    p[i][j] += h;
                    m[i][j] -= h;
                    let fd = (f(&p, &deltas) - f(&m, &deltas)) / (2.0 * h);
                    assert!(rel_err(fd, base.grad_logits[i][j]) < 1e-4);
                    let d = deltas[i][j] - targets[i][j];
                    if (d.abs() - 1.0).abs() < 2.0 * h {
                        continue;
                    }
                    let (mut p, mut m) = (deltas.clone(), deltas.clone());
                    p[i][j] += h;
                    m[i][j] -= h;
                    let fd = (f(&logits, &p) - f(&logits, &m)) / (2.0 * h);
                    let g = base.grad_deltas[i][j];
                    assert!(rel_err(fd, g) < 1e-4 || (fd - g).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn perfect_predictions_approach_zero() {
        let t = RpnTargets {
            labels: vec![AnchorLabel::Positive, AnchorLabel::Negative],
            deltas: vec![[0.1, 0.2, 0.3, 0.4], [0.0; 4]],
        };
        let l = rpn_loss(&[40.0, -40.0], &[[0.1, 0.2, 0.3, 0.4], [9.0; 4]], &t, 1.0 / 9.0);
        assert!(l.value < 1e-15 && l.value >= 0.0);
        let r = rcnn_loss(&[vec![50.0, 0.0, 0.0]], &[[1.0; 4]], &[0], &[[1.0; 4]], 2, 1.0);
        assert!(r.value < 1e-20);
    }

    fn dup<T: Clone>(v: &[T]) -> Vec<T> {
        [v.to_vec(), v.to_vec()].concat()
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (obj, deltas, t) = random_rpn(&mut rng, 9);
        let a = rpn_loss(&obj, &deltas, &t, 1.0 / 9.0).value;
        let t2 = RpnTargets {
            labels: dup(&t.labels),
            deltas: dup(&t.deltas),
        };
        let b = rpn_loss(&dup(&obj), &dup(&deltas), &t2, 1.0 / 9.0).value;
        assert!((a - b).abs() < 1e-12);

        let logits = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.0]];
        let d = vec![[0.5; 4], [0.1; 4]];
        let labels = vec![1, 2];
        let tg = vec![[0.0; 4], [0.0; 4]];
        let a = rcnn_loss(&logits, &d, &labels, &tg, 2, 1.0).value;
        let b = rcnn_loss(&dup(&logits), &dup(&d), &dup(&labels), &dup(&tg), 2, 1.0).value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_trains_background_only() {
        let r = rcnn_loss(&[vec![0.0, 0.0, 1.0]], &[[3.0; 4]], &[2], &[[0.0; 4]], 2, 1.0);
        assert_eq!(r.regression, 0.0);
        assert_eq!(r.grad_deltas[0], [0.0; 4]);
        assert!(r.classification > 0.0);
    }
}
