use crate::boxes::BBox;
use crate::real::Real;
use crate::tensor::{shape_err, Tensor, TensorError};

/// Feature cells pooled by one output bin spanning `[start, end)`: all
/// cells whose centers fall in the span, or the cell under its midpoint
/// when the span is narrower than a cell.
fn bin_cells(start: f32, end: f32, size: usize) -> (usize, usize) {
    let last = size as isize - 1;
    let lo = (start - 0.5).ceil() as isize;
    let hi = (end - 0.5).ceil() as isize - 1;
    if lo > hi {
        let mid = ((0.5 * (start + end)).floor() as isize).clamp(0, last) as usize;
        return (mid, mid);
    }
    (lo.clamp(0, last) as usize, hi.clamp(0, last) as usize)
}

/// Max pooling of a `[C, H, W]` feature map over an `out×out` grid laid on
/// `proposal` (given in feature-cell coordinates). Returns the pooled
/// `[C, out, out]` values and the flat source index of each.
pub fn roi_pool<R: Real>(features: &Tensor<R>, proposal: &BBox, out: usize) -> Result<(Tensor<R>, Vec<u32>), TensorError> {
    let (c, h, w) = match features.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(shape_err("roi_pool", "[C, H, W]", format!("{s:?}"))),
    };
    let mut pooled = Tensor::zeros(&[c, out, out]);
    let mut arg = vec![0u32; c * out * out];
    roi_pool_into(features.data(), c, h, w, proposal, out, pooled.data_mut(), &mut arg);
    Ok((pooled, arg))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn roi_pool_into<R: Real>(
    feat: &[R],
    c: usize,
    h: usize,
    w: usize,
    proposal: &BBox,
    out: usize,
    dst: &mut [R],
    arg: &mut [u32],
) {
    let bw = (proposal.x2 - proposal.x1) / out as f32;
    let bh = (proposal.y2 - proposal.y1) / out as f32;
    let cols: Vec<(usize, usize)> = (0..out)
        .map(|u| bin_cells(proposal.x1 + u as f32 * bw, proposal.x1 + (u + 1) as f32 * bw, w))
        .collect();
    let rows: Vec<(usize, usize)> = (0..out)
        .map(|v| bin_cells(proposal.y1 + v as f32 * bh, proposal.y1 + (v + 1) as f32 * bh, h))
        .collect();
    for ch in 0..c {
        let plane = &feat[ch * h * w..(ch + 1) * h * w];
        for (v, &(y0, y1)) in rows.iter().enumerate() {
            for (u, &(x0, x1)) in cols.iter().enumerate() {
                let mut best = y0 * w + x0;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let i = y * w + x;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                }
                let o = (ch * out + v) * out + u;
                dst[o] = plane[best];
                arg[o] = (ch * h * w + best) as u32;
            }
        }
    }
}
