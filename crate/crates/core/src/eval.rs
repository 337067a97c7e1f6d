//! AP50 evaluation, base/novel group means and the confusion matrix.

use crate::dataset::{BoundingBox, CategoryId, DatasetPartition};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

pub const AP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("detection references unknown image '{0}'")]
    UnknownImage(String),
    #[error("detection category {0} is not part of the split")]
    UnknownCategory(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub category: CategoryId,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Greedy matching in descending confidence: each detection claims the
/// highest-IoU unclaimed ground truth of its image when that IoU reaches
/// 0.5. Returns the sorted detections with their TP flags.
pub fn match_detections<'a>(
    detections: &'a [Detection],
    ground_truths: &HashMap<String, Vec<BoundingBox>>,
) -> Vec<(&'a Detection, bool)> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));
    let mut claimed: HashMap<&str, Vec<bool>> = HashMap::new();
    sorted
        .into_iter()
        .map(|d| {
            let gts = ground_truths.get(&d.image_id).map(Vec::as_slice).unwrap_or(&[]);
            let flags = claimed
                .entry(d.image_id.as_str())
                .or_insert_with(|| vec![false; gts.len()]);
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, _)| !flags[*i])
                .map(|(i, g)| (i, iou(&d.bbox, g)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((i, v)) if v >= AP_IOU_THRESHOLD => {
                    flags[i] = true;
                    (d, true)
                }
                _ => (d, false),
            }
        })
        .collect()
}

/// AP at IoU 0.5 for one category: area under the all-points interpolated
/// precision/recall curve. Returns 0 when there is no ground truth.
pub fn average_precision_50(detections: &[Detection], ground_truths: &HashMap<String, Vec<BoundingBox>>) -> f64 {
    let n_gt: usize = ground_truths.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let matched = match_detections(detections, ground_truths);
    let mut tp = 0.0;
    let mut recall = Vec::with_capacity(matched.len());
    let mut precision = Vec::with_capacity(matched.len());
    for (k, (_, is_tp)) in matched.iter().enumerate() {
        if *is_tp {
            tp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (k + 1) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Ground-truth boxes of one category, keyed by image id.
pub fn ground_truth_for(partition_images: &[crate::dataset::DefectImage], category: &CategoryId) -> HashMap<String, Vec<BoundingBox>> {
    let mut gts: HashMap<String, Vec<BoundingBox>> = HashMap::new();
    for im in partition_images {
        let boxes: Vec<BoundingBox> = im
            .instances
            .iter()
            .filter(|i| &i.category == category)
            .map(|i| i.bbox)
            .collect();
        gts.insert(im.id.clone(), boxes);
    }
    gts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Category names followed by `"BG"`.
    pub labels: Vec<String>,
    /// Raw counts, rows = ground truth, columns = prediction.
    pub counts: Vec<Vec<usize>>,
    /// Row-normalised ratios; rows without entries stay zero.
    pub ratios: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category_ap: BTreeMap<String, f64>,
    pub base_categories: Vec<String>,
    pub novel_categories: Vec<String>,
    pub ap_base: f64,
    pub ap_novel: f64,
    pub ap_all: f64,
    pub confusion: ConfusionMatrix,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    /// Builds a report from per-category APs using the group mean law.
    pub fn from_category_aps(
        per_category_ap: BTreeMap<String, f64>,
        base: Vec<String>,
        novel: Vec<String>,
        confusion: ConfusionMatrix,
    ) -> Self {
        let ap_base = mean(base.iter().map(|c| per_category_ap[c]));
        let ap_novel = mean(novel.iter().map(|c| per_category_ap[c]));
        let ap_all = mean(base.iter().chain(&novel).map(|c| per_category_ap[c]));
        Self {
            per_category_ap,
            base_categories: base,
            novel_categories: novel,
            ap_base,
            ap_novel,
            ap_all,
            confusion,
        }
    }
}

fn check_detections(detections: &[Detection], partition: &DatasetPartition) -> Result<(), EvalError> {
    let ids: std::collections::HashSet<&str> = partition.test.iter().map(|i| i.id.as_str()).collect();
    let cats = partition.spec.all_categories();
    for d in detections {
        if !ids.contains(d.image_id.as_str()) {
            return Err(EvalError::UnknownImage(d.image_id.clone()));
        }
        if !cats.contains(&d.category) {
            return Err(EvalError::UnknownCategory(d.category.name.clone()));
        }
    }
    Ok(())
}

/// Per-category AP50 on the test split, group means and the confusion
/// matrix at the default thresholds.
pub fn evaluate_groups(detections: &[Detection], partition: &DatasetPartition) -> Result<EvalReport, EvalError> {
    check_detections(detections, partition)?;
    let mut per_category_ap = BTreeMap::new();
    for cat in partition.spec.all_categories() {
        let dets: Vec<Detection> = detections.iter().filter(|d| d.category == cat).cloned().collect();
        let gts = ground_truth_for(&partition.test, &cat);
        per_category_ap.insert(cat.name.clone(), average_precision_50(&dets, &gts));
    }
    let names = |v: &[CategoryId]| v.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    Ok(EvalReport::from_category_aps(
        per_category_ap,
        names(&partition.spec.base_categories),
        names(&partition.spec.novel_categories),
        confusion_matrix(detections, partition, 0.3, AP_IOU_THRESHOLD),
    ))
}

/// Rows are ground-truth categories plus a final background row; columns
/// are predicted categories plus a final background column.
///
/// Each ground-truth instance goes to the category of its best-IoU detection
/// among those above both thresholds, or to the background column. Detections
/// above the confidence threshold that no ground truth claimed are counted in
/// the background row under their predicted category. Category rows are
/// normalised by their instance count, the background row by the number of
/// unclaimed detections.
pub fn confusion_matrix(
    detections: &[Detection],
    partition: &DatasetPartition,
    conf_threshold: f64,
    iou_threshold: f64,
) -> ConfusionMatrix {
    let cats = partition.spec.all_categories();
    let n = cats.len();
    let col_of = |c: &CategoryId| cats.iter().position(|x| x == c);
    let mut counts = vec![vec![0usize; n + 1]; n + 1];
    let mut by_image: HashMap<&str, Vec<&Detection>> = HashMap::new();
    for d in detections.iter().filter(|d| d.confidence > conf_threshold) {
        by_image.entry(d.image_id.as_str()).or_default().push(d);
    }
    for dets in by_image.values_mut() {
        dets.sort_by(|a, b| detection_order(a, b));
    }
    for im in &partition.test {
        let dets = by_image.get(im.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let mut used = vec![false; dets.len()];
        for inst in &im.instances {
            let Some(row) = col_of(&inst.category) else {
                continue;
            };
            let best = dets
                .iter()
                .enumerate()
                .map(|(j, d)| (j, iou(&inst.bbox, &d.bbox)))
                .filter(|(_, v)| *v >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    counts[row][col_of(&dets[j].category).unwrap_or(n)] += 1;
                }
                None => counts[row][n] += 1,
            }
        }
        for (j, d) in dets.iter().enumerate() {
            if !used[j] {
                if let Some(col) = col_of(&d.category) {
                    counts[n][col] += 1;
                }
            }
        }
    }
    let ratios = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    let mut labels: Vec<String> = cats.iter().map(|c| c.name.clone()).collect();
    labels.push("BG".into());
    ConfusionMatrix { labels, counts, ratios }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DefectImage, Instance, SplitSpec};

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(img: &str, cat: &CategoryId, b: BoundingBox, conf: f64) -> Detection {
        Detection {
            image_id: img.into(),
            category: cat.clone(),
            bbox: b,
            confidence: conf,
        }
    }

    #[test]
    fn iou_cases() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bb(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn ap_hand_cases() {
        let c = CategoryId::new(0, "A");
        let gts = HashMap::from([("i".to_string(), vec![bb(0.0, 0.0, 10.0, 10.0)])]);
        let tp = det("i", &c, bb(0.0, 0.0, 10.0, 6.0), 0.7);
        assert_eq!(average_precision_50(&[tp.clone()], &gts), 1.0);
        let fp = det("i", &c, bb(50.0, 50.0, 60.0, 60.0), 0.9);
        let tp8 = Detection { confidence: 0.8, ..tp };
        assert_eq!(average_precision_50(&[fp, tp8], &gts), 0.5);
        assert_eq!(average_precision_50(&[], &HashMap::new()), 0.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let c = CategoryId::new(0, "A");
        let gts = HashMap::from([("i".to_string(), vec![bb(0.0, 0.0, 10.0, 10.0)])]);
        let d1 = det("i", &c, bb(0.0, 0.0, 10.0, 10.0), 0.9);
        let d2 = det("i", &c, bb(0.0, 0.0, 10.0, 9.0), 0.8);
        let dets = [d1, d2];
        let m = match_detections(&dets, &gts);
        assert_eq!(m.iter().map(|x| x.1).collect::<Vec<_>>(), vec![true, false]);
    }

    fn partition(images: Vec<DefectImage>, base: &[CategoryId], novel: &[CategoryId]) -> DatasetPartition {
        DatasetPartition {
            spec: SplitSpec::new(base.to_vec(), novel.to_vec(), 1, 0).unwrap(),
            base_train: vec![],
            novel_train: vec![],
            test: images,
            novel_pool: vec![],
        }
    }

    fn image(id: &str, inst: &[(&CategoryId, BoundingBox)]) -> DefectImage {
        DefectImage {
            id: id.into(),
            width: 64,
            height: 64,
            pixels: vec![0.0; 64 * 64],
            instances: inst
                .iter()
                .map(|(c, b)| Instance {
                    category: (*c).clone(),
                    bbox: *b,
                })
                .collect(),
        }
    }

    #[test]
    fn group_mean_law_and_errors() {
        let a = CategoryId::new(0, "A");
        let b = CategoryId::new(1, "B");
        let p = partition(vec![image("x", &[(&a, bb(0.0, 0.0, 8.0, 8.0))])], &[a.clone()], &[b.clone()]);
        let r = evaluate_groups(&[], &p).unwrap();
        assert_eq!((r.ap_base, r.ap_novel, r.ap_all), (0.0, 0.0, 0.0));
        let r = evaluate_groups(&[det("x", &a, bb(0.0, 0.0, 8.0, 8.0), 0.9)], &p).unwrap();
        assert_eq!((r.ap_base, r.ap_novel, r.ap_all), (1.0, 0.0, 0.5));
        assert_eq!(
            evaluate_groups(&[det("nope", &a, bb(0.0, 0.0, 8.0, 8.0), 0.9)], &p),
            Err(EvalError::UnknownImage("nope".into()))
        );

        let aps: BTreeMap<String, f64> = ["a", "b", "c", "d", "e", "f"]
            .iter()
            .zip([0.6, 0.6, 0.6, 0.3, 0.3, 0.3])
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let cm = ConfusionMatrix {
            labels: vec![],
            counts: vec![],
            ratios: vec![],
        };
        let r = EvalReport::from_category_aps(aps, s(&["a", "b", "c"]), s(&["d", "e", "f"]), cm);
        assert!((r.ap_base - 0.6).abs() < 1e-15 && (r.ap_novel - 0.3).abs() < 1e-15);
        assert!((r.ap_all - 0.45).abs() < 1e-15);
    }

    #[test]
    fn confusion_cases() {
        let a = CategoryId::new(0, "A");
        let b = CategoryId::new(1, "B");
        let g1 = bb(0.0, 0.0, 10.0, 10.0);
        let g2 = bb(20.0, 20.0, 30.0, 30.0);
        let p = partition(vec![image("x", &[(&a, g1), (&a, g2)])], &[a.clone()], &[b.clone()]);
        let cm = confusion_matrix(&[det("x", &a, g1, 0.9), det("x", &b, g2, 0.5)], &p, 0.3, 0.5);
        assert_eq!(cm.ratios[0], vec![0.5, 0.5, 0.0]);

        let none = confusion_matrix(&[], &p, 0.3, 0.5);
        assert_eq!(none.ratios[0], vec![0.0, 0.0, 1.0]);

        let perfect = confusion_matrix(&[det("x", &a, g1, 0.9), det("x", &a, g2, 0.9)], &p, 0.3, 0.5);
        assert_eq!(perfect.ratios[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(perfect.counts[2], vec![0, 0, 0]);

        let spurious = confusion_matrix(&[det("x", &b, bb(40.0, 40.0, 50.0, 50.0), 0.9)], &p, 0.3, 0.5);
        assert_eq!(spurious.ratios[2], vec![0.0, 1.0, 0.0]);
        // below the confidence threshold: ignored
        let low = confusion_matrix(&[det("x", &a, g1, 0.2)], &p, 0.3, 0.5);
        assert_eq!(low.ratios[0], vec![0.0, 0.0, 1.0]);
    }
}
