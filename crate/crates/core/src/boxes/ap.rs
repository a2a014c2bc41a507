use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{iou, BBox, Detection};

pub const AP_IOU: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// AP at IoU 0.5 per class (`None` for classes without ground truth) and
/// their mean over classes that have ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

/// All-point interpolated area under the precision envelope.
///
/// `hits` lists `(score, is_true_positive)` in ranking order; precision and
/// recall are only sampled after the last detection of each score group so
/// that the order inside a tie is irrelevant.
pub fn pr_ap(hits: &[(f32, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_end = hits.get(i + 1).map_or(true, |next| next.0 != score);
        if group_end {
            points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = 0.0;
    let mut envelopes = vec![0.0; points.len()];
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        envelope = envelope.max(p);
        envelopes[i] = envelope;
    }
    for (&(r, _), &e) in points.iter().zip(&envelopes) {
        ap += (r - prev_recall) * e;
        prev_recall = r;
    }
    ap
}

fn box_order(a: &BBox, b: &BBox) -> Ordering {
    a.coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| x.total_cmp(&y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// VOC-style AP50 with all-point interpolation.
///
/// Per class, detections are ranked by score and each is greedily matched to
/// the not-yet-matched ground truth of its image with the highest IoU ≥ 0.5.
pub fn evaluate_ap50(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "evaluate_ap50: one detection list per image");
    let mut per_class_ap = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let num_gt: usize = gts.iter().map(|g| g.iter().filter(|t| t.class_id == class).count()).sum();
        if num_gt == 0 {
            per_class_ap.push(None);
            continue;
        }
        // (score, image, box) with an order that ignores input permutation.
        let mut ranked: Vec<(f32, usize, BBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, d)| d.iter().filter(|d| d.class_id == class).map(move |d| (d.score, img, d.bbox)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then_with(|| box_order(&a.2, &b.2)));
        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<(f32, bool)> = ranked
            .iter()
            .map(|&(score, img, bbox)| {
                let mut best: Option<(f32, usize)> = None;
                for (j, g) in gts[img].iter().enumerate() {
                    if g.class_id != class || matched[img][j] {
                        continue;
                    }
                    let v = iou(&bbox, &g.bbox);
                    if v >= AP_IOU && best.map_or(true, |(b, _)| v > b) {
                        best = Some((v, j));
                    }
                }
                match best {
                    Some((_, j)) => {
                        matched[img][j] = true;
                        (score, true)
                    }
                    None => (score, false),
                }
            })
            .collect();
        per_class_ap.push(Some(pr_ap(&hits, num_gt)));
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    EvalResult { per_class_ap, map }
}
