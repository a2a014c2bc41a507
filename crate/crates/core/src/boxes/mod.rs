//! Box geometry, box-delta coding, NMS, anchor assignment and AP50.

mod ap;
mod matching;
mod nms;

pub use ap::{evaluate_ap50, pr_ap, EvalResult, GroundTruth};
pub use matching::{match_anchors, AnchorLabel};
pub use nms::{nms, sort_detections};

use serde::{Deserialize, Serialize};

/// Axis-aligned box in continuous pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    /// Intersection with `[0,width]×[0,height]`; `None` if nothing with
    /// positive area remains.
    pub fn clip(&self, width: f32, height: f32) -> Option<BBox> {
        let b = BBox::new(self.x1.clamp(0.0, width), self.y1.clamp(0.0, height), self.x2.clamp(0.0, width), self.y2.clamp(0.0, height));
        b.is_valid().then_some(b)
    }

    pub fn translate(&self, dx: f32, dy: f32) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn coords(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Largest log-scale delta accepted by [`decode_deltas`] (box growth ×62.5).
pub const MAX_LOG_DELTA: f32 = 4.135_166_6;

/// Center/size offsets of `target` relative to `anchor`:
/// `((x−xa)/wa, (y−ya)/ha, ln(w/wa), ln(h/ha))`.
pub fn encode_deltas(target: &BBox, anchor: &BBox) -> [f32; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (tx, ty) = target.center();
    [(tx - ax) / aw, (ty - ay) / ah, (target.width() / aw).ln(), (target.height() / ah).ln()]
}

pub fn decode_deltas(deltas: [f32; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].min(MAX_LOG_DELTA).exp();
    let h = ah * deltas[3].min(MAX_LOG_DELTA).exp();
    BBox::from_center(cx, cy, w, h)
}

/// One scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}
