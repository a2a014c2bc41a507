//! Two-stage detector: BN backbone → RPN → ROI head, with hand-written
//! backward passes.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::anchors::generate_anchors;
use super::arch::ArchDescriptor;
use super::roi_pool::roi_pool_into;
use super::state::{Grads, ModelState, StateError};
use crate::batchnorm::{bn_backward, bn_forward, BnCache, BnMode, BnView};
use crate::boxes::{decode_deltas, encode_deltas, iou, match_anchors, nms, AnchorLabel, BBox, Detection, GroundTruth};
use crate::ops::{
    conv2d_backward_opt, conv2d_forward, linear_backward, linear_forward, maxpool2_backward, maxpool2_forward, relu_backward,
    relu_inplace, smooth_l1, softmax, softmax_cross_entropy,
};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

/// Scaling of ROI-head regression targets (standard Faster R-CNN values).
pub const ROI_DELTA_WEIGHTS: [f32; 4] = [10.0, 10.0, 5.0, 5.0];

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("malformed target: {0}")]
    Target(String),
    #[error("bad input: {0}")]
    Input(String),
}

/// Anchor and proposal sampling used while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f32,
    pub rpn_pos_iou: f32,
    pub rpn_neg_iou: f32,
    pub pre_nms_train: usize,
    pub post_nms_train: usize,
    pub proposal_nms_iou: f32,
    pub roi_batch: usize,
    pub roi_pos_fraction: f32,
    pub roi_fg_iou: f32,
    pub min_proposal_size: f32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            pre_nms_train: 300,
            post_nms_train: 100,
            proposal_nms_iou: 0.7,
            roi_batch: 32,
            roi_pos_fraction: 0.25,
            roi_fg_iou: 0.5,
            min_proposal_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub pre_nms: usize,
    pub rpn_top: usize,
    pub proposal_nms_iou: f32,
    pub score_floor: f32,
    pub nms_iou: f32,
    pub max_dets: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            pre_nms: 300,
            rpn_top: 50,
            proposal_nms_iou: 0.7,
            score_floor: 0.05,
            nms_iou: 0.5,
            max_dets: 50,
        }
    }
}

/// The four detection loss terms and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(rpn_cls: f64, rpn_reg: f64, roi_cls: f64, roi_reg: f64) -> Self {
        Self {
            rpn_cls,
            rpn_reg,
            roi_cls,
            roi_reg,
            total: rpn_cls + rpn_reg + roi_cls + roi_reg,
        }
    }
}

/// How backbone batch norms obtain their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// Batch statistics, folded into the running estimates.
    Train,
    /// Batch statistics; running estimates untouched.
    BatchOnly,
    /// Stored running estimates.
    Running,
}

pub struct TrainOptions<'a> {
    pub include_reg: bool,
    pub sampling: &'a SamplingConfig,
    /// Use these first-stage proposals instead of the model's own (gradient
    /// checking needs them frozen).
    pub fixed_proposals: Option<&'a [Vec<BBox>]>,
}

pub struct TrainOutput<R> {
    pub losses: LossBreakdown,
    pub grads: Grads<R>,
    /// First-stage proposals per image, before ground truth is appended.
    pub proposals: Vec<Vec<BBox>>,
}

struct Ids {
    conv_w: Vec<usize>,
    conv_b: Vec<usize>,
    gamma: Vec<usize>,
    beta: Vec<usize>,
    mean: Vec<usize>,
    var: Vec<usize>,
    rpn_conv_w: usize,
    rpn_conv_b: usize,
    rpn_cls_w: usize,
    rpn_cls_b: usize,
    rpn_reg_w: usize,
    rpn_reg_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    cls_w: usize,
    cls_b: usize,
    reg_w: usize,
    reg_b: usize,
}

impl Ids {
    fn new<R: Real>(m: &ModelState<R>) -> Result<Self, StateError> {
        let blocks = m.arch().backbone_channels.len();
        let per = |suffix: &str| -> Result<Vec<usize>, StateError> { (0..blocks).map(|i| m.index_of(&format!("backbone.{i}.{suffix}"))).collect() };
        Ok(Self {
            conv_w: per("conv.weight")?,
            conv_b: per("conv.bias")?,
            gamma: per("bn.gamma")?,
            beta: per("bn.beta")?,
            mean: per("bn.running_mean")?,
            var: per("bn.running_var")?,
            rpn_conv_w: m.index_of("rpn.conv.weight")?,
            rpn_conv_b: m.index_of("rpn.conv.bias")?,
            rpn_cls_w: m.index_of("rpn.cls.weight")?,
            rpn_cls_b: m.index_of("rpn.cls.bias")?,
            rpn_reg_w: m.index_of("rpn.reg.weight")?,
            rpn_reg_b: m.index_of("rpn.reg.bias")?,
            fc1_w: m.index_of("roi.fc1.weight")?,
            fc1_b: m.index_of("roi.fc1.bias")?,
            fc2_w: m.index_of("roi.fc2.weight")?,
            fc2_b: m.index_of("roi.fc2.bias")?,
            cls_w: m.index_of("roi.cls.weight")?,
            cls_b: m.index_of("roi.cls.bias")?,
            reg_w: m.index_of("roi.reg.weight")?,
            reg_b: m.index_of("roi.reg.bias")?,
        })
    }
}

struct BlockCache<R> {
    input: Tensor<R>,
    bn: BnCache<R>,
    act: Tensor<R>,
    pool: Option<Vec<u32>>,
}

pub(crate) struct BackboneOut<R> {
    pub features: Tensor<R>,
    caches: Vec<BlockCache<R>>,
    /// Running estimates after this pass, per block (unchanged in `Running`).
    pub running: Vec<(Vec<R>, Vec<R>)>,
    /// Batch statistics per block (empty in `Running`).
    pub batch_stats: Vec<(Vec<R>, Vec<R>)>,
}

fn check_images<R: Real>(arch: &ArchDescriptor, images: &Tensor<R>) -> Result<usize, DetectorError> {
    let (n, c, h, w) = images.dims4("detector input")?;
    if c != arch.input_channels || h != arch.input_size || w != arch.input_size {
        return Err(DetectorError::Input(format!(
            "expected [N, {}, {}, {}], got {:?}",
            arch.input_channels,
            arch.input_size,
            arch.input_size,
            images.shape()
        )));
    }
    Ok(n)
}

pub(crate) fn backbone_forward<R: Real>(
    model: &ModelState<R>,
    images: &Tensor<R>,
    mode: StatsMode,
    keep_cache: bool,
) -> Result<BackboneOut<R>, DetectorError> {
    let ids = Ids::new(model)?;
    backbone_with_ids(model, &ids, images, mode, keep_cache)
}

fn backbone_with_ids<R: Real>(
    model: &ModelState<R>,
    ids: &Ids,
    images: &Tensor<R>,
    mode: StatsMode,
    keep_cache: bool,
) -> Result<BackboneOut<R>, DetectorError> {
    let arch = model.arch();
    check_images(arch, images)?;
    let t = model.tensors();
    let blocks = arch.backbone_channels.len();
    let mut x = images.clone();
    let mut caches = Vec::new();
    let mut running = Vec::with_capacity(blocks);
    let mut batch_stats = Vec::new();
    for i in 0..blocks {
        let y = conv2d_forward(&x, &t[ids.conv_w[i]], &t[ids.conv_b[i]], 1, 1)?;
        let mut rm = t[ids.mean[i]].data().to_vec();
        let mut rv = t[ids.var[i]].data().to_vec();
        let bn_mode = if mode == StatsMode::Running { BnMode::Eval } else { BnMode::Train };
        let view = BnView {
            gamma: t[ids.gamma[i]].data(),
            beta: t[ids.beta[i]].data(),
            running_mean: &mut rm,
            running_var: &mut rv,
            momentum: arch.bn_momentum,
            eps: arch.bn_eps,
        };
        let (mut z, cache) = bn_forward(&y, view, bn_mode)?;
        drop(y);
        relu_inplace(&mut z);
        if let Some((m, v)) = cache.batch_stats() {
            batch_stats.push((m.to_vec(), v.to_vec()));
        }
        running.push((rm, rv));
        let (next, pool) = if i + 1 < blocks {
            let (p, arg) = maxpool2_forward(&z)?;
            (p, Some(arg))
        } else if keep_cache {
            (z.clone(), None)
        } else {
            (std::mem::replace(&mut z, Tensor::zeros(&[0])), None)
        };
        if keep_cache {
            caches.push(BlockCache {
                input: x,
                bn: cache,
                act: z,
                pool,
            });
        }
        x = next;
    }
    Ok(BackboneOut {
        features: x,
        caches,
        running,
        batch_stats,
    })
}

struct RpnOut<R> {
    hidden: Tensor<R>,
    cls: Tensor<R>,
    reg: Tensor<R>,
}

fn rpn_forward<R: Real>(model: &ModelState<R>, ids: &Ids, features: &Tensor<R>) -> Result<RpnOut<R>, DetectorError> {
    let t = model.tensors();
    let mut hidden = conv2d_forward(features, &t[ids.rpn_conv_w], &t[ids.rpn_conv_b], 1, 1)?;
    relu_inplace(&mut hidden);
    let cls = conv2d_forward(&hidden, &t[ids.rpn_cls_w], &t[ids.rpn_cls_b], 1, 0)?;
    let reg = conv2d_forward(&hidden, &t[ids.rpn_reg_w], &t[ids.rpn_reg_b], 1, 0)?;
    Ok(RpnOut { hidden, cls, reg })
}

/// Flat offsets of anchor `a`'s (bg, fg) logits and its 4 deltas.
#[derive(Clone, Copy)]
struct AnchorIndexer {
    a: usize,
    f: usize,
}

impl AnchorIndexer {
    fn cls(&self, n: usize, anchor: usize, t: usize) -> usize {
        let (cell, k) = (anchor / self.a, anchor % self.a);
        ((n * 2 * self.a + 2 * k + t) * self.f * self.f) + cell
    }

    fn reg(&self, n: usize, anchor: usize, d: usize) -> usize {
        let (cell, k) = (anchor / self.a, anchor % self.a);
        ((n * 4 * self.a + 4 * k + d) * self.f * self.f) + cell
    }
}

#[allow(clippy::too_many_arguments)]
fn propose<R: Real>(
    rpn: &RpnOut<R>,
    idx: AnchorIndexer,
    n: usize,
    anchors: &[BBox],
    image_size: f32,
    pre_nms: usize,
    post_nms: usize,
    nms_iou: f32,
    min_size: f32,
) -> Vec<BBox> {
    let cls = rpn.cls.data();
    let reg = rpn.reg.data();
    let mut scored: Vec<(f32, usize)> = (0..anchors.len())
        .filter_map(|a| {
            let d = (cls[idx.cls(n, a, 0)] - cls[idx.cls(n, a, 1)]).to_f64();
            let p = 1.0 / (1.0 + d.exp());
            p.is_finite().then_some((p as f32, a))
        })
        .collect();
    let order = |x: &(f32, usize), y: &(f32, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));
    if scored.len() > pre_nms && pre_nms > 0 {
        scored.select_nth_unstable_by(pre_nms - 1, order);
    }
    scored.truncate(pre_nms);
    scored.sort_unstable_by(order);
    let candidates: Vec<Detection> = scored
        .into_iter()
        .filter_map(|(score, a)| {
            let deltas = [0, 1, 2, 3].map(|d| reg[idx.reg(n, a, d)].to_f64() as f32);
            if deltas.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let b = decode_deltas(deltas, &anchors[a]).clip(image_size, image_size)?;
            (b.width() >= min_size && b.height() >= min_size).then_some(Detection { bbox: b, class_id: 0, score })
        })
        .collect();
    nms(&candidates, nms_iou).into_iter().take(post_nms).map(|d| d.bbox).collect()
}

fn check_targets(arch: &ArchDescriptor, targets: &[Vec<GroundTruth>]) -> Result<(), DetectorError> {
    for (i, list) in targets.iter().enumerate() {
        for g in list {
            if !g.bbox.is_valid() {
                return Err(DetectorError::Target(format!("image {i}: degenerate box {:?}", g.bbox)));
            }
            if g.class_id >= arch.num_classes {
                return Err(DetectorError::Target(format!("image {i}: class {} >= {}", g.class_id, arch.num_classes)));
            }
        }
    }
    Ok(())
}

fn sample_split(pos: &[usize], neg: &[usize], batch: usize, pos_fraction: f32, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let pick = |pool: &[usize], k: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        let mut out: Vec<usize> = sample(rng, pool.len(), k.min(pool.len())).into_iter().map(|i| pool[i]).collect();
        out.sort_unstable();
        out
    };
    let want_pos = ((batch as f32) * pos_fraction).floor() as usize;
    let p = pick(pos, want_pos, rng);
    let q = pick(neg, batch - p.len(), rng);
    (p, q)
}

struct RoiSample {
    image: usize,
    bbox: BBox,
    label: usize,
    target: [f32; 4],
}

/// Pooled `[R, C·P·P]` features and the source index of each pooled value
/// (into the whole feature tensor).
fn pool_rois<R: Real>(features: &Tensor<R>, rois: &[(usize, BBox)], arch: &ArchDescriptor) -> (Tensor<R>, Vec<u32>) {
    let (c, f, p) = (arch.feature_channels(), arch.feature_size(), arch.roi_pool_size);
    let stride = arch.feature_stride() as f32;
    let width = c * p * p;
    let mut pooled = Tensor::zeros(&[rois.len(), width]);
    let mut arg = vec![0u32; rois.len() * width];
    for (r, &(img, b)) in rois.iter().enumerate() {
        let fb = BBox::new(b.x1 / stride, b.y1 / stride, b.x2 / stride, b.y2 / stride);
        let dst = &mut pooled.data_mut()[r * width..(r + 1) * width];
        let a = &mut arg[r * width..(r + 1) * width];
        roi_pool_into(features.outer(img), c, f, f, &fb, p, dst, a);
        let base = (img * c * f * f) as u32;
        a.iter_mut().for_each(|v| *v += base);
    }
    (pooled, arg)
}

struct RoiHeadOut<R> {
    h1: Tensor<R>,
    h2: Tensor<R>,
    cls: Tensor<R>,
    reg: Tensor<R>,
}

fn roi_head_forward<R: Real>(model: &ModelState<R>, ids: &Ids, pooled: &Tensor<R>) -> Result<RoiHeadOut<R>, DetectorError> {
    let t = model.tensors();
    let mut h1 = linear_forward(pooled, &t[ids.fc1_w], &t[ids.fc1_b])?;
    relu_inplace(&mut h1);
    let mut h2 = linear_forward(&h1, &t[ids.fc2_w], &t[ids.fc2_b])?;
    relu_inplace(&mut h2);
    let cls = linear_forward(&h2, &t[ids.cls_w], &t[ids.cls_b])?;
    let reg = linear_forward(&h2, &t[ids.reg_w], &t[ids.reg_b])?;
    Ok(RoiHeadOut { h1, h2, cls, reg })
}

/// Training forward + backward over one batch with the four-term loss.
///
/// Batch norms run in [`StatsMode::Train`], so `model`'s running
/// statistics advance. Regression terms and their gradients are skipped
/// when `include_reg` is false.
pub fn forward_train<R: Real>(
    model: &mut ModelState<R>,
    images: &Tensor<R>,
    targets: &[Vec<GroundTruth>],
    opts: &TrainOptions<'_>,
    rng: &mut impl Rng,
) -> Result<TrainOutput<R>, DetectorError> {
    let arch = model.arch().clone();
    let n = check_images(&arch, images)?;
    if targets.len() != n {
        return Err(DetectorError::Target(format!("{} target lists for {n} images", targets.len())));
    }
    check_targets(&arch, targets)?;
    let s = opts.sampling;
    let ids = Ids::new(model)?;
    let anchors = generate_anchors(&arch);
    let idx = AnchorIndexer {
        a: arch.anchors_per_cell(),
        f: arch.feature_size(),
    };
    let image_size = arch.input_size as f32;

    let bb = backbone_with_ids(model, &ids, images, StatsMode::Train, true)?;
    let rpn = rpn_forward(model, &ids, &bb.features)?;

    // First stage: anchor sampling and targets.
    let mut rpn_rows: Vec<(usize, usize, usize)> = Vec::new(); // (image, anchor, label)
    let mut rpn_reg_rows: Vec<(usize, usize, [f32; 4])> = Vec::new();
    for (img, gts) in targets.iter().enumerate() {
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let labels = match_anchors(&anchors, &gt_boxes, s.rpn_pos_iou, s.rpn_neg_iou);
        let pos: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| matches!(l, AnchorLabel::Positive(_))).map(|(i, _)| i).collect();
        let neg: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| **l == AnchorLabel::Negative).map(|(i, _)| i).collect();
        let (p, q) = sample_split(&pos, &neg, s.rpn_batch, s.rpn_pos_fraction, rng);
        for &a in &p {
            if let AnchorLabel::Positive(g) = labels[a] {
                rpn_rows.push((img, a, 1));
                rpn_reg_rows.push((img, a, encode_deltas(&gt_boxes[g], &anchors[a])));
            }
        }
        rpn_rows.extend(q.iter().map(|&a| (img, a, 0)));
    }

    let mut d_cls = Tensor::zeros(rpn.cls.shape());
    let mut d_reg = Tensor::zeros(rpn.reg.shape());
    let rpn_cls_loss = if rpn_rows.is_empty() {
        R::ZERO
    } else {
        let logits: Vec<R> = rpn_rows
            .iter()
            .flat_map(|&(img, a, _)| [rpn.cls.data()[idx.cls(img, a, 0)], rpn.cls.data()[idx.cls(img, a, 1)]])
            .collect();
        let labels: Vec<usize> = rpn_rows.iter().map(|r| r.2).collect();
        let (loss, g) = softmax_cross_entropy(&Tensor::from_vec(&[rpn_rows.len(), 2], logits)?, &labels)?;
        for (row, &(img, a, _)) in rpn_rows.iter().enumerate() {
            d_cls.data_mut()[idx.cls(img, a, 0)] += g.data()[2 * row];
            d_cls.data_mut()[idx.cls(img, a, 1)] += g.data()[2 * row + 1];
        }
        loss
    };
    let rpn_reg_loss = if opts.include_reg && !rpn_reg_rows.is_empty() {
        let pred: Vec<R> = rpn_reg_rows.iter().flat_map(|&(img, a, _)| (0..4).map(move |d| (img, a, d))).map(|(img, a, d)| rpn.reg.data()[idx.reg(img, a, d)]).collect();
        let target: Vec<R> = rpn_reg_rows.iter().flat_map(|r| r.2).map(|v| R::from_f64(v as f64)).collect();
        let (loss, g) = smooth_l1(&pred, &target, rpn_rows.len())?;
        for (row, &(img, a, _)) in rpn_reg_rows.iter().enumerate() {
            for d in 0..4 {
                d_reg.data_mut()[idx.reg(img, a, d)] += g[4 * row + d];
            }
        }
        loss
    } else {
        R::ZERO
    };

    // Second stage: proposals (no gradient), sampling, ROI head.
    let proposals: Vec<Vec<BBox>> = match opts.fixed_proposals {
        Some(p) => {
            if p.len() != n {
                return Err(DetectorError::Input(format!("{} proposal lists for {n} images", p.len())));
            }
            p.to_vec()
        }
        None => (0..n)
            .map(|img| propose(&rpn, idx, img, &anchors, image_size, s.pre_nms_train, s.post_nms_train, s.proposal_nms_iou, s.min_proposal_size))
            .collect(),
    };
    let mut rois: Vec<RoiSample> = Vec::new();
    for (img, gts) in targets.iter().enumerate() {
        let mut cands = proposals[img].clone();
        cands.extend(gts.iter().map(|g| g.bbox));
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut best = Vec::with_capacity(cands.len());
        for (ci, c) in cands.iter().enumerate() {
            let mut m = (0.0f32, 0usize);
            for (gi, g) in gts.iter().enumerate() {
                let v = iou(c, &g.bbox);
                if v > m.0 {
                    m = (v, gi);
                }
            }
            best.push(m);
            if !gts.is_empty() && m.0 >= s.roi_fg_iou {
                pos.push(ci);
            } else {
                neg.push(ci);
            }
        }
        let (p, q) = sample_split(&pos, &neg, s.roi_batch, s.roi_pos_fraction, rng);
        for &ci in &p {
            let g = &gts[best[ci].1];
            let raw = encode_deltas(&g.bbox, &cands[ci]);
            let target = [0, 1, 2, 3].map(|d| raw[d] * ROI_DELTA_WEIGHTS[d]);
            rois.push(RoiSample {
                image: img,
                bbox: cands[ci],
                label: g.class_id + 1,
                target,
            });
        }
        rois.extend(q.iter().map(|&ci| RoiSample {
            image: img,
            bbox: cands[ci],
            label: 0,
            target: [0.0; 4],
        }));
    }

    let t = model.tensors();
    let mut grads = Grads::zeros_like(model);
    let mut d_features = Tensor::zeros(bb.features.shape());
    let (mut roi_cls_loss, mut roi_reg_loss) = (R::ZERO, R::ZERO);
    if !rois.is_empty() {
        let boxes: Vec<(usize, BBox)> = rois.iter().map(|r| (r.image, r.bbox)).collect();
        let (pooled, pool_arg) = pool_rois(&bb.features, &boxes, &arch);
        let head = roi_head_forward(model, &ids, &pooled)?;
        let labels: Vec<usize> = rois.iter().map(|r| r.label).collect();
        let (cls_loss, d_logits) = softmax_cross_entropy(&head.cls, &labels)?;
        roi_cls_loss = cls_loss;
        let k = arch.num_classes;
        let mut d_head_reg = Tensor::zeros(head.reg.shape());
        let positives: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].label > 0).collect();
        if opts.include_reg && !positives.is_empty() {
            let slot = |i: usize| (rois[i].label - 1) * 4;
            let pred: Vec<R> = positives.iter().flat_map(|&i| (0..4).map(move |d| (i, d))).map(|(i, d)| head.reg.data()[i * 4 * k + slot(i) + d]).collect();
            let target: Vec<R> = positives.iter().flat_map(|&i| rois[i].target).map(|v| R::from_f64(v as f64)).collect();
            let (loss, g) = smooth_l1(&pred, &target, rois.len())?;
            roi_reg_loss = loss;
            for (row, &i) in positives.iter().enumerate() {
                for d in 0..4 {
                    d_head_reg.data_mut()[i * 4 * k + slot(i) + d] = g[4 * row + d];
                }
            }
        }
        let gc = linear_backward(&d_logits, &head.h2, &t[ids.cls_w])?;
        let mut d_h2 = gc.input;
        *grads.slot(ids.cls_w) = gc.weight;
        *grads.slot(ids.cls_b) = gc.bias;
        if opts.include_reg {
            let gr = linear_backward(&d_head_reg, &head.h2, &t[ids.reg_w])?;
            d_h2.add_assign(&gr.input)?;
            *grads.slot(ids.reg_w) = gr.weight;
            *grads.slot(ids.reg_b) = gr.bias;
        }
        let d_h2 = relu_backward(&d_h2, &head.h2)?;
        let g2 = linear_backward(&d_h2, &head.h1, &t[ids.fc2_w])?;
        *grads.slot(ids.fc2_w) = g2.weight;
        *grads.slot(ids.fc2_b) = g2.bias;
        let d_h1 = relu_backward(&g2.input, &head.h1)?;
        let g1 = linear_backward(&d_h1, &pooled, &t[ids.fc1_w])?;
        *grads.slot(ids.fc1_w) = g1.weight;
        *grads.slot(ids.fc1_b) = g1.bias;
        let df = d_features.data_mut();
        for (&g, &src) in g1.input.data().iter().zip(&pool_arg) {
            df[src as usize] += g;
        }
    }

    // RPN head backward.
    let gcls = conv2d_backward_opt(&d_cls, &rpn.hidden, &t[ids.rpn_cls_w], 1, 0, true)?;
    let mut d_hidden = gcls.input;
    *grads.slot(ids.rpn_cls_w) = gcls.kernel;
    *grads.slot(ids.rpn_cls_b) = gcls.bias;
    if opts.include_reg {
        let greg = conv2d_backward_opt(&d_reg, &rpn.hidden, &t[ids.rpn_reg_w], 1, 0, true)?;
        d_hidden.add_assign(&greg.input)?;
        *grads.slot(ids.rpn_reg_w) = greg.kernel;
        *grads.slot(ids.rpn_reg_b) = greg.bias;
    }
    let d_hidden = relu_backward(&d_hidden, &rpn.hidden)?;
    let gconv = conv2d_backward_opt(&d_hidden, &bb.features, &t[ids.rpn_conv_w], 1, 1, true)?;
    d_features.add_assign(&gconv.input)?;
    *grads.slot(ids.rpn_conv_w) = gconv.kernel;
    *grads.slot(ids.rpn_conv_b) = gconv.bias;

    // Backbone backward.
    let mut upstream = d_features;
    for (i, cache) in bb.caches.iter().enumerate().rev() {
        let d_act = match &cache.pool {
            Some(arg) => maxpool2_backward(&upstream, arg, cache.act.shape())?,
            None => upstream,
        };
        let d_bn_out = relu_backward(&d_act, &cache.act)?;
        let gbn = bn_backward(&d_bn_out, &cache.bn, t[ids.gamma[i]].data())?;
        *grads.slot(ids.gamma[i]) = Tensor::from_vec(&[gbn.gamma.len()], gbn.gamma)?;
        *grads.slot(ids.beta[i]) = Tensor::from_vec(&[gbn.beta.len()], gbn.beta)?;
        let gconv = conv2d_backward_opt(&gbn.input, &cache.input, &t[ids.conv_w[i]], 1, 1, i > 0)?;
        *grads.slot(ids.conv_w[i]) = gconv.kernel;
        *grads.slot(ids.conv_b[i]) = gconv.bias;
        upstream = gconv.input;
    }

    let losses = LossBreakdown::new(rpn_cls_loss.to_f64(), rpn_reg_loss.to_f64(), roi_cls_loss.to_f64(), roi_reg_loss.to_f64());
    if !losses.total.is_finite() {
        return Err(DetectorError::NonFinite(format!("loss {losses:?}")));
    }
    if let Err((name, i)) = grads.check_finite() {
        return Err(DetectorError::NonFinite(format!("gradient `{name}`[{i}]")));
    }
    let tensors = model.tensors_mut();
    for (i, (rm, rv)) in bb.running.into_iter().enumerate() {
        tensors[ids.mean[i]].data_mut().copy_from_slice(&rm);
        tensors[ids.var[i]].data_mut().copy_from_slice(&rv);
    }
    Ok(TrainOutput { losses, grads, proposals })
}

/// Batched inference. Uses running statistics unless `stats` says otherwise
/// (`Train` is treated as `BatchOnly`: inference never mutates the model).
pub fn detect_batch<R: Real>(
    model: &ModelState<R>,
    images: &Tensor<R>,
    cfg: &InferenceConfig,
    stats: StatsMode,
) -> Result<Vec<Vec<Detection>>, DetectorError> {
    let arch = model.arch();
    let n = check_images(arch, images)?;
    let ids = Ids::new(model)?;
    let mode = if stats == StatsMode::Running { StatsMode::Running } else { StatsMode::BatchOnly };
    let bb = backbone_with_ids(model, &ids, images, mode, false)?;
    let rpn = rpn_forward(model, &ids, &bb.features)?;
    let anchors = generate_anchors(arch);
    let idx = AnchorIndexer {
        a: arch.anchors_per_cell(),
        f: arch.feature_size(),
    };
    let size = arch.input_size as f32;
    let mut rois: Vec<(usize, BBox)> = Vec::new();
    for img in 0..n {
        let props = propose(&rpn, idx, img, &anchors, size, cfg.pre_nms, cfg.rpn_top, cfg.proposal_nms_iou, 1.0);
        rois.extend(props.into_iter().map(|b| (img, b)));
    }
    let mut out = vec![Vec::new(); n];
    if rois.is_empty() {
        return Ok(out);
    }
    let (pooled, _) = pool_rois(&bb.features, &rois, arch);
    let head = roi_head_forward(model, &ids, &pooled)?;
    let probs = softmax(&head.cls)?;
    let k = arch.num_classes;
    let mut raw: Vec<Vec<Detection>> = vec![Vec::new(); n];
    for (r, &(img, prop)) in rois.iter().enumerate() {
        for c in 0..k {
            let score = probs.data()[r * (k + 1) + c + 1].to_f64() as f32;
            if !(score >= cfg.score_floor) || !score.is_finite() {
                continue;
            }
            let deltas = [0, 1, 2, 3].map(|d| head.reg.data()[r * 4 * k + 4 * c + d].to_f64() as f32 / ROI_DELTA_WEIGHTS[d]);
            if deltas.iter().any(|v| !v.is_finite()) {
                continue;
            }
            if let Some(b) = decode_deltas(deltas, &prop).clip(size, size) {
                raw[img].push(Detection {
                    bbox: b,
                    class_id: c,
                    score: score.min(1.0),
                });
            }
        }
    }
    for (img, dets) in raw.into_iter().enumerate() {
        let mut kept = nms(&dets, cfg.nms_iou);
        kept.truncate(cfg.max_dets);
        out[img] = kept;
    }
    Ok(out)
}

/// Detections for one `[3,H,W]` or `[1,3,H,W]` image with running statistics.
pub fn forward_inference<R: Real>(
    model: &ModelState<R>,
    image: &Tensor<R>,
    score_floor: f32,
    nms_iou: f32,
    max_dets: usize,
) -> Result<Vec<Detection>, DetectorError> {
    let batch = match image.shape() {
        &[c, h, w] => image.clone().reshape(&[1, c, h, w])?,
        _ => image.clone(),
    };
    let cfg = InferenceConfig {
        score_floor,
        nms_iou,
        max_dets,
        ..InferenceConfig::default()
    };
    Ok(detect_batch(model, &batch, &cfg, StatsMode::Running)?.pop().unwrap_or_default())
}
