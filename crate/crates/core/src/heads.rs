//! Incremental ROI heads: decoupled base and novel classifiers scoring a
//! shared ROI feature, and one class-agnostic box regressor.
//!
//! The base head carries the background as its last row. Merged scores are
//! ordered `[base categories, novel categories, background]`.

use crate::detector::losses::softmax;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Guard on both norms of the cosine score.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("{head} head expects feature dimension {expected}, got {got}")]
    DimensionMismatch {
        head: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("scaling factor must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("weight row {0} has zero norm")]
    ZeroRow(usize),
    #[error("weight buffer of {len} values does not hold {rows} x {dim}")]
    BadShape { len: usize, rows: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierKind {
    /// `alpha * cos(f, w_j)`.
    Cosine { alpha: f64 },
    /// Plain fully connected scores `w_j . f + b_j`.
    Linear,
}

impl Default for ClassifierKind {
    fn default() -> Self {
        ClassifierKind::Cosine { alpha: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineHeadWeights {
    /// Row-major `rows x dim`.
    pub weights: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub alpha: f64,
    /// Whether the last row scores the background.
    pub has_background: bool,
}

impl CosineHeadWeights {
    pub fn new(weights: Vec<f64>, rows: usize, dim: usize, alpha: f64, has_background: bool) -> Result<Self, HeadError> {
        if weights.len() != rows * dim {
            return Err(HeadError::BadShape {
                len: weights.len(),
                rows,
                dim,
            });
        }
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(HeadError::NonPositiveAlpha(alpha));
        }
        if let Some(r) = (0..rows).find(|&r| norm(&weights[r * dim..(r + 1) * dim]) <= NORM_EPS) {
            return Err(HeadError::ZeroRow(r));
        }
        Ok(Self {
            weights,
            rows,
            dim,
            alpha,
            has_background,
        })
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHeadWeights {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierHead {
    Cosine(CosineHeadWeights),
    Linear(LinearHeadWeights),
}

/// Gradients of a classifier head for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub feature: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Entry `j` is `alpha * cos(f, w_j)`. A feature (or weight row) whose norm
/// is at most [`NORM_EPS`] scores 0.
pub fn cosine_logits(f: &[f64], head: &CosineHeadWeights) -> Vec<f64> {
    let nf = norm(f);
    (0..head.rows)
        .map(|j| {
            let w = head.row(j);
            let nw = norm(w);
            if nf <= NORM_EPS || nw <= NORM_EPS {
                0.0
            } else {
                (head.alpha * (dot(f, w) / (nf * nw))).clamp(-head.alpha, head.alpha)
            }
        })
        .collect()
}

/// Gradients of `sum_j grad[j] * logit_j` with respect to `f` and the rows.
pub fn cosine_logits_backward(f: &[f64], head: &CosineHeadWeights, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = head.dim;
    let mut gf = vec![0.0; d];
    let mut gw = vec![0.0; head.weights.len()];
    let nf = norm(f);
    if nf <= NORM_EPS {
        return (gf, gw);
    }
    for (j, &g) in grad.iter().enumerate() {
        let w = head.row(j);
        let nw = norm(w);
        if g == 0.0 || nw <= NORM_EPS {
            continue;
        }
        let cos = dot(f, w) / (nf * nw);
        let a = g * head.alpha;
        let gwr = &mut gw[j * d..(j + 1) * d];
        for k in 0..d {
            let (fh, wh) = (f[k] / nf, w[k] / nw);
            gf[k] += a * (wh - cos * fh) / nf;
            gwr[k] += a * (fh - cos * wh) / nw;
        }
    }
    (gf, gw)
}

impl ClassifierHead {
    pub fn rows(&self) -> usize {
        match self {
            ClassifierHead::Cosine(h) => h.rows,
            ClassifierHead::Linear(h) => h.rows,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ClassifierHead::Cosine(h) => h.dim,
            ClassifierHead::Linear(h) => h.dim,
        }
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        match self {
            ClassifierHead::Cosine(h) => cosine_logits(f, h),
            ClassifierHead::Linear(h) => crate::detector::layers::linear_forward(f, &h.weights, &h.bias, h.rows),
        }
    }

    pub fn backward(&self, f: &[f64], grad: &[f64]) -> HeadGrads {
        match self {
            ClassifierHead::Cosine(h) => {
                let (feature, weights) = cosine_logits_backward(f, h, grad);
                HeadGrads {
                    feature,
                    weights,
                    bias: None,
                }
            }
            ClassifierHead::Linear(h) => {
                let mut weights = vec![0.0; h.weights.len()];
                let mut bias = vec![0.0; h.rows];
                let feature = crate::detector::layers::linear_backward(f, &h.weights, grad, &mut weights, &mut bias);
                HeadGrads {
                    feature,
                    weights,
                    bias: Some(bias),
                }
            }
        }
    }
}

/// Per-ROI outputs of the incremental head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutputs {
    /// Base categories followed by the background slot.
    pub base_logits: Vec<f64>,
    pub novel_logits: Vec<f64>,
    pub box_deltas: [f64; 4],
}

impl HeadOutputs {
    pub fn num_base(&self) -> usize {
        self.base_logits.len() - 1
    }

    /// Base-category logits without the background slot.
    pub fn base_category_logits(&self) -> &[f64] {
        &self.base_logits[..self.num_base()]
    }

    pub fn background_logit(&self) -> f64 {
        self.base_logits[self.num_base()]
    }

    /// Logits ordered `[base categories, novel categories, background]`.
    pub fn merged_logits(&self) -> Vec<f64> {
        let mut v = self.base_category_logits().to_vec();
        v.extend_from_slice(&self.novel_logits);
        v.push(self.background_logit());
        v
    }

    /// Splits a gradient over [`merged_logits`](Self::merged_logits) into
    /// `(base head, novel head)` gradients.
    pub fn split_merged_grad(&self, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let b = self.num_base();
        let n = self.novel_logits.len();
        let mut base = grad[..b].to_vec();
        base.push(grad[b + n]);
        (base, grad[b..b + n].to_vec())
    }
}

/// Scores one ROI feature with both classifier heads. The heads share the
/// feature and nothing else; box deltas are left at zero.
pub fn classify_incremental(f: &[f64], base: &ClassifierHead, novel: &ClassifierHead) -> Result<HeadOutputs, HeadError> {
    for (head, h) in [("base", base), ("novel", novel)] {
        if h.dim() != f.len() {
            return Err(HeadError::DimensionMismatch {
                head,
                expected: h.dim(),
                got: f.len(),
            });
        }
    }
    Ok(HeadOutputs {
        base_logits: base.logits(f),
        novel_logits: novel.logits(f),
        box_deltas: [0.0; 4],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorWeights {
    /// Row-major `4 x dim`.
    pub weights: Vec<f64>,
    pub bias: [f64; 4],
    /// Per-coordinate target scaling; raw output times `stds` gives deltas.
    pub stds: [f64; 4],
}

/// One `(dx, dy, dw, dh)` per ROI, shared by every category.
pub fn regress_class_agnostic(f: &[f64], reg: &RegressorWeights) -> [f64; 4] {
    let d = f.len();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (reg.bias[k] + dot(&reg.weights[k * d..(k + 1) * d], f)) * reg.stds[k];
    }
    out
}

/// Softmax over `[base categories, novel categories, background]`.
pub fn merge_head_scores(outputs: &HeadOutputs) -> Vec<f64> {
    softmax(&outputs.merged_logits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cos_head(rows: &[&[f64]], alpha: f64) -> CosineHeadWeights {
        let dim = rows[0].len();
        CosineHeadWeights::new(rows.concat(), rows.len(), dim, alpha, false).unwrap()
    }

    #[test]
    fn analytic_cosines() {
        assert!((cosine_logits(&[3.0, 4.0], &cos_head(&[&[3.0, 4.0]], 20.0))[0] - 20.0).abs() < 1e-12);
        assert_eq!(cosine_logits(&[1.0, 0.0], &cos_head(&[&[0.0, 1.0]], 7.0))[0], 0.0);
        let v = cosine_logits(&[1.0, 1.0], &cos_head(&[&[1.0, 0.0]], 20.0))[0];
        assert!((v - 14.142_135_623_730_951).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_scores_zero() {
        let h = cos_head(&[&[1.0, 2.0], &[-1.0, 0.5]], 20.0);
        assert_eq!(cosine_logits(&[0.0, 0.0], &h), vec![0.0, 0.0]);
        let (gf, gw) = cosine_logits_backward(&[0.0, 0.0], &h, &[1.0, 1.0]);
        assert!(gf.iter().chain(&gw).all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_heads_rejected() {
        assert_eq!(
            CosineHeadWeights::new(vec![0.0, 0.0], 1, 2, 20.0, false),
            Err(HeadError::ZeroRow(0))
        );
        assert!(matches!(
            CosineHeadWeights::new(vec![1.0, 0.0], 1, 2, 0.0, false),
            Err(HeadError::NonPositiveAlpha(_))
        ));
    }

    #[test]
    fn dimension_laws_and_mismatch() {
        let base = ClassifierHead::Cosine(cos_head(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.2]], 20.0));
        let novel = ClassifierHead::Cosine(cos_head(&[&[1.0, 2.0], &[2.0, 1.0], &[0.5, -1.0]], 20.0));
        let out = classify_incremental(&[0.3, 0.9], &base, &novel).unwrap();
        assert_eq!(out.base_logits.len(), 4);
        assert_eq!(out.novel_logits.len(), 3);
        assert_eq!(out.merged_logits().len(), 7);
        match classify_incremental(&[1.0, 2.0, 3.0], &base, &novel) {
            Err(HeadError::DimensionMismatch { head, .. }) => assert_eq!(head, "base"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn novel_perturbation_leaves_base_untouched() {
        let base = ClassifierHead::Cosine(cos_head(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]], 20.0));
        let mut novel_w = cos_head(&[&[0.2, 0.1, 0.3]], 20.0);
        let f = [0.4, -0.2, 0.9];
        let a = classify_incremental(&f, &base, &ClassifierHead::Cosine(novel_w.clone())).unwrap();
        novel_w.weights[1] += 5.0;
        let b = classify_incremental(&f, &base, &ClassifierHead::Cosine(novel_w)).unwrap();
        assert_eq!(a.base_logits, b.base_logits);
        assert_ne!(a.novel_logits, b.novel_logits);
        // and the novel loss gradient never reaches base rows
        let (gbase, gnovel) = a.split_merged_grad(&[0.0, 0.7, 0.0]);
        assert_eq!(gnovel, vec![0.7]);
        assert!(gbase.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn aligned_feature_wins_argmax() {
        // base: Cr, In, bg ; novel: Pa
        let base = ClassifierHead::Cosine(cos_head(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]], 20.0));
        let novel = ClassifierHead::Cosine(cos_head(&[&[0.0, 0.0, 0.0, 1.0]], 20.0));
        let out = classify_incremental(&[2.0, 0.0, 0.0, 0.0], &base, &novel).unwrap();
        let s = merge_head_scores(&out);
        let argmax = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 0);
    }

    #[test]
    fn merge_hand_softmax() {
        let out = HeadOutputs {
            base_logits: vec![2.0, 0.0, 0.0, 0.0],
            novel_logits: vec![0.0, 0.0, 0.0],
            box_deltas: [0.0; 4],
        };
        let s = merge_head_scores(&out);
        let z = 2f64.exp() + 6.0;
        assert!((s[0] - 2f64.exp() / z).abs() < 1e-15);
        for v in &s[1..] {
            assert!((v - 1.0 / z).abs() < 1e-15);
        }
        let uniform = merge_head_scores(&HeadOutputs {
            base_logits: vec![1.5; 4],
            novel_logits: vec![1.5; 3],
            box_deltas: [0.0; 4],
        });
        assert!(uniform.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn regressor_is_class_agnostic() {
        let reg = RegressorWeights {
            weights: vec![0.0; 8],
            bias: [1.0, 2.0, 3.0, 4.0],
            stds: [0.1, 0.1, 0.2, 0.2],
        };
        let d = regress_class_agnostic(&[5.0, 6.0], &reg);
        assert_eq!(d.len(), 4);
        assert!((d[0] - 0.1).abs() < 1e-15 && (d[3] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let h = cos_head(&[&[0.3, -1.2, 0.5], &[1.0, 0.4, -0.7]], 10.0);
        let f = [0.6, 0.2, -0.9];
        let g = [0.7, -1.3];
        let loss = |f: &[f64], h: &CosineHeadWeights| -> f64 {
            cosine_logits(f, h).iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (gf, gw) = cosine_logits_backward(&f, &h, &g);
        let eps = 1e-6;
        for i in 0..3 {
            let (mut p, mut m) = (f, f);
            p[i] += eps;
            m[i] -= eps;
            assert!(((loss(&p, &h) - loss(&m, &h)) / (2.0 * eps) - gf[i]).abs() < 1e-7);
        }
        for i in 0..6 {
            let (mut p, mut m) = (h.clone(), h.clone());
            p.weights[i] += eps;
            m.weights[i] -= eps;
            assert!(((loss(&f, &p) - loss(&f, &m)) / (2.0 * eps) - gw[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn bounded_and_scale_invariant(
            f in proptest::collection::vec(-10.0..10.0f64, 5),
            w in proptest::collection::vec(-10.0..10.0f64, 10),
            alpha in prop::sample::select(vec![5.0, 10.0, 20.0, 50.0]),
            k in prop::sample::select(vec![0.5, 3.0, 100.0]),
        ) {
            prop_assume!(norm(&f) > 1e-6 && norm(&w[..5]) > 1e-6 && norm(&w[5..]) > 1e-6);
            let head = CosineHeadWeights::new(w, 2, 5, alpha, false).unwrap();
            let a = cosine_logits(&f, &head);
            prop_assert!(a.iter().all(|v| v.abs() <= alpha));
            let fk: Vec<f64> = f.iter().map(|v| v * k).collect();
            let b = cosine_logits(&fk, &head);
            if k == 0.5 {
                // power-of-two scaling is exact in floating point
                prop_assert_eq!(&a, &b);
            }
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * alpha);
            }
        }
    }
}
