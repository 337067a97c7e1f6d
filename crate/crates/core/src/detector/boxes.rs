//! Center/size box deltas, anchors and greedy non-maximum suppression.

use crate::dataset::BoundingBox;
use crate::eval::iou;

/// Largest log-scale change applied when decoding, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Deltas `(dx, dy, dw, dh)` taking `reference` onto `target`.
pub fn encode_deltas(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    [
        (tx - rx) / rw,
        (ty - ry) / rh,
        (target.width() / rw).ln(),
        (target.height() / rh).ln(),
    ]
}

pub fn decode_deltas(reference: &BoundingBox, deltas: &[f64; 4]) -> BoundingBox {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let cx = rx + deltas[0] * rw;
    let cy = ry + deltas[1] * rh;
    let w = rw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = rh * deltas[3].min(MAX_LOG_SCALE).exp();
    BoundingBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Anchors for one pyramid level, ordered `(y, x, ratio)`.
pub fn level_anchors(height: usize, width: usize, stride: usize, size: f64, ratios: &[f64]) -> Vec<BoundingBox> {
    let mut out = Vec::with_capacity(height * width * ratios.len());
    for y in 0..height {
        for x in 0..width {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &r in ratios {
                // r = h / w at constant area
                let w = size / r.sqrt();
                let h = size * r.sqrt();
                out.push(BoundingBox {
                    x1: cx - 0.5 * w,
                    y1: cy - 0.5 * h,
                    x2: cx + 0.5 * w,
                    y2: cy + 0.5 * h,
                });
            }
        }
    }
    out
}

/// Greedy NMS. Returns indices of kept boxes, highest score first; equal
/// scores keep their input order.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn hand_decode() {
        let b = decode_deltas(&bb(0.0, 0.0, 10.0, 10.0), &[0.1, 0.1, 0.0, 0.0]);
        assert_eq!(b.to_array(), [1.0, 1.0, 11.0, 11.0]);
    }

    #[test]
    fn zero_deltas_identity() {
        let r = bb(3.0, 4.0, 17.5, 9.0);
        assert_eq!(decode_deltas(&r, &[0.0; 4]), r);
    }

    #[test]
    fn duplicate_suppressed() {
        let b = bb(0.0, 0.0, 5.0, 5.0);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.7), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.7), vec![1]);
    }

    #[test]
    fn anchor_ratios_preserve_area() {
        let a = level_anchors(2, 3, 8, 32.0, &[0.5, 1.0, 2.0]);
        assert_eq!(a.len(), 18);
        for b in &a {
            assert!((b.area() - 1024.0).abs() < 1e-9);
        }
        assert_eq!(a[1].center(), (4.0, 4.0));
        assert_eq!(a[3].center(), (12.0, 4.0));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(x in 0.0..50.0f64, y in 0.0..50.0f64, w in 1.0..40.0f64, h in 1.0..40.0f64,
                                   tx in 0.0..50.0f64, ty in 0.0..50.0f64, tw in 1.0..40.0f64, th in 1.0..40.0f64) {
            let r = bb(x, y, x + w, y + h);
            let t = bb(tx, ty, tx + tw, ty + th);
            let d = decode_deltas(&r, &encode_deltas(&r, &t));
            for (a, b) in d.to_array().iter().zip(t.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
