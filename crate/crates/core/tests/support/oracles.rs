//! Box utilities against independent brute-force references, 100 random
//! instances each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfod::boxes::{evaluate_ap50, iou, match_anchors, nms, AnchorLabel, BBox, Detection, GroundTruth};

pub const INSTANCES: u64 = 100;

fn rand_box(rng: &mut ChaCha8Rng, extent: f32) -> BBox {
    // Integer-ish coordinates make exact overlaps and ties common.
    let x1 = rng.gen_range(0..(extent as i32 - 4)) as f32 * 0.5;
    let y1 = rng.gen_range(0..(extent as i32 - 4)) as f32 * 0.5;
    let w = rng.gen_range(2..16) as f32;
    let h = rng.gen_range(2..16) as f32;
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// IoU by counting covered cells on a 0.5-pixel raster; exact for boxes on
/// the half-pixel lattice.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let cells = |v: f32| (v * 2.0).round() as i64;
    let (mut inter, mut union) = (0i64, 0i64);
    let lo_x = cells(a.x1.min(b.x1));
    let hi_x = cells(a.x2.max(b.x2));
    let lo_y = cells(a.y1.min(b.y1));
    let hi_y = cells(a.y2.max(b.y2));
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let inside = |r: &BBox| x >= cells(r.x1) && x < cells(r.x2) && y >= cells(r.y1) && y < cells(r.y2);
            let (ia, ib) = (inside(a), inside(b));
            inter += (ia && ib) as i64;
            union += (ia || ib) as i64;
        }
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

pub fn iou_matches_raster_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let a = rand_box(&mut rng, 40.0);
        let b = rand_box(&mut rng, 40.0);
        let fast = iou(&a, &b) as f64;
        assert!((fast - raster_iou(&a, &b)).abs() < 1e-6, "{a:?} {b:?}");
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }
}

/// NMS by fixed-point iteration over the full suppression relation: a box
/// survives iff no surviving, strictly higher-ranked box of its class
/// overlaps it above the threshold.
pub fn nms_oracle(dets: &[Detection], thr: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].score.total_cmp(&dets[i].score).then(dets[i].class_id.cmp(&dets[j].class_id)).then_with(|| {
            let (a, b) = (dets[i].bbox.coords(), dets[j].bbox.coords());
            (0..4).map(|k| a[k].total_cmp(&b[k])).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut alive = vec![true; order.len()];
    for r in 0..order.len() {
        alive[r] = !(0..r).any(|q| {
            alive[q] && dets[order[q]].class_id == dets[order[r]].class_id && iou(&dets[order[q]].bbox, &dets[order[r]].bbox) > thr
        });
    }
    order.iter().zip(&alive).filter(|(_, &a)| a).map(|(&i, _)| dets[i]).collect()
}

fn rand_dets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: rand_box(rng, 30.0),
            class_id: rng.gen_range(0..classes),
            // Coarse scores produce ties.
            score: rng.gen_range(1..20) as f32 / 20.0,
        })
        .collect()
}

pub fn nms_matches_fixed_point_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(0..30);
        let dets = rand_dets(&mut rng, n, 2);
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
    }
}

pub fn match_oracle(anchors: &[BBox], gt: &[BBox], pos: f32, neg: f32) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            if gt.is_empty() {
                return AnchorLabel::Negative;
            }
            let ious: Vec<f32> = gt.iter().map(|g| iou(a, g)).collect();
            let max = ious.iter().copied().fold(0.0f32, f32::max);
            let own = ious.iter().position(|&v| v == max).unwrap();
            let is_best_for_some = gt.iter().enumerate().any(|(j, g)| {
                let best = anchors.iter().map(|b| iou(b, g)).fold(0.0f32, f32::max);
                best > 0.0 && ious[j] == best
            });
            if max >= pos || is_best_for_some {
                AnchorLabel::Positive(own)
            } else if max <= neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

pub fn anchor_matching_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let anchors: Vec<BBox> = (0..rng.gen_range(1..40)).map(|_| rand_box(&mut rng, 30.0)).collect();
        let gt: Vec<BBox> = (0..rng.gen_range(0..5)).map(|_| rand_box(&mut rng, 30.0)).collect();
        assert_eq!(match_anchors(&anchors, &gt, 0.7, 0.3), match_oracle(&anchors, &gt, 0.7, 0.3));
    }
}

/// AP50 from first principles: rank, greedily match, then take the maximum
/// precision at recall ≥ r for every distinct recall level r and integrate
/// the resulting step function.
pub fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize) -> Option<f64> {
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f32, usize, BBox)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for d in ds.iter().filter(|d| d.class_id == class) {
            ranked.push((d.score, img, d.bbox));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then_with(|| {
            let (x, y) = (a.2.coords(), b.2.coords());
            (0..4).map(|k| x[k].total_cmp(&y[k])).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::new();
    for &(_, img, bbox) in &ranked {
        let mut best: Option<usize> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if g.class_id == class && !used[img][j] && iou(&bbox, &g.bbox) >= 0.5 {
                if best.map_or(true, |b| iou(&bbox, &g.bbox) > iou(&bbox, &gts[img][b].bbox)) {
                    best = Some(j);
                }
            }
        }
        if let Some(j) = best {
            used[img][j] = true;
        }
        tp_flags.push(best.is_some());
    }
    // Operating points at the end of each score group only.
    let mut pts = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in 0..ranked.len() {
        if tp_flags[i] { tp += 1 } else { fp += 1 }
        if i + 1 == ranked.len() || ranked[i + 1].0 != ranked[i].0 {
            pts.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut levels: Vec<f64> = pts.iter().map(|p| p.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

pub fn ap50_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let images = rng.gen_range(1..5);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..images {
            let g: Vec<GroundTruth> = (0..rng.gen_range(0..5))
                .map(|_| GroundTruth { bbox: rand_box(&mut rng, 30.0), class_id: rng.gen_range(0..3) })
                .collect();
            // Jittered copies of ground truth plus clutter.
            let mut d = Vec::new();
            for t in &g {
                if !rng.gen_bool(0.8) {
                    continue;
                }
                d.push(Detection {
                    bbox: t.bbox.translate(rng.gen_range(-2..3) as f32 * 0.5, rng.gen_range(-2..3) as f32 * 0.5),
                    class_id: if rng.gen_bool(0.9) { t.class_id } else { rng.gen_range(0..3) },
                    score: rng.gen_range(1..10) as f32 / 10.0,
                });
            }
            let clutter = rng.gen_range(0..4);
            d.extend(rand_dets(&mut rng, clutter, 3));
            gts.push(g);
            dets.push(d);
        }
        let r = evaluate_ap50(&dets, &gts, 3);
        let mut present = Vec::new();
        for c in 0..3 {
            let o = ap_oracle(&dets, &gts, c);
            match (r.per_class_ap[c], o) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "class {c}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
            present.extend(o);
        }
        let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        assert!((r.map - map).abs() < 1e-9);
    }
}
