use std::cmp::Ordering;

use super::{iou, Detection};

/// Score descending, then smaller class id, then lexicographic box coords.
pub(crate) fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.bbox
                .coords()
                .iter()
                .zip(b.bbox.coords())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(detection_order);
}

/// Greedy per-class suppression: a detection is dropped when a kept,
/// higher-ranked detection of the same class overlaps it with IoU above
/// `iou_threshold`. Output is in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sort_detections(&mut sorted);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
