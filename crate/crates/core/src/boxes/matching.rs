use super::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box at this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Region-proposal assignment: positive at IoU ≥ `pos_thr` or when the
/// anchor attains a ground truth's best IoU; negative at max IoU ≤
/// `neg_thr`; everything else ignored. Positives carry their own best
/// ground truth (lowest index on ties).
pub fn match_anchors(anchors: &[BBox], gt: &[BBox], pos_thr: f32, neg_thr: f32) -> Vec<AnchorLabel> {
    debug_assert!(pos_thr > neg_thr);
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best = vec![(0.0f32, 0usize); anchors.len()];
    let mut gt_best = vec![0.0f32; gt.len()];
    let mut table = vec![0.0f32; anchors.len() * gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(a, g);
            table[i * gt.len() + j] = v;
            if v > best[i].0 {
                best[i] = (v, j);
            }
            if v > gt_best[j] {
                gt_best[j] = v;
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(v, j)| {
            if v >= pos_thr {
                AnchorLabel::Positive(j)
            } else if v <= neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (j, &gb) in gt_best.iter().enumerate() {
        if gb <= 0.0 {
            continue;
        }
        for (i, label) in labels.iter_mut().enumerate() {
            if table[i * gt.len() + j] == gb {
                *label = AnchorLabel::Positive(best[i].1);
            }
        }
    }
    labels
}
