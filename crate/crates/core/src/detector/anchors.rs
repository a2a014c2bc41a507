use super::arch::ArchDescriptor;
use crate::boxes::BBox;

/// Anchors in image coordinates, ordered by feature row, feature column,
/// then (scale, aspect). Aspect is height/width at constant area.
pub fn generate_anchors(arch: &ArchDescriptor) -> Vec<BBox> {
    let stride = arch.feature_stride() as f32;
    let f = arch.feature_size();
    let mut out = Vec::with_capacity(f * f * arch.anchors_per_cell());
    for y in 0..f {
        for x in 0..f {
            let (cx, cy) = ((x as f32 + 0.5) * stride, (y as f32 + 0.5) * stride);
            for &s in &arch.anchor_scales {
                for &a in &arch.anchor_aspects {
                    let r = a.sqrt();
                    out.push(BBox::from_center(cx, cy, s / r, s * r));
                }
            }
        }
    }
    out
}
