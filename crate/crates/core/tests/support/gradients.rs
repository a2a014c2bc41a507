//! Analytic backward passes against 64-bit central differences. Every
//! check panics with the offending entry on mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfod::batchnorm::{bn_backward, bn_forward, BnMode, BnState};
use sfod::boxes::{BBox, GroundTruth};
use sfod::detector::{forward_train, roi_pool, ArchDescriptor, ModelState, ParamKind, SamplingConfig, TrainOptions};
use sfod::ops::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    smooth_l1, softmax_cross_entropy,
};
use sfod::Tensor;

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const H: f64 = 1e-5;
pub const REL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn assert_close(what: &str, analytic: f64, numeric: f64) {
    let scale = analytic.abs().max(numeric.abs()).max(1e-4);
    assert!((analytic - numeric).abs() <= REL * scale, "{what}: analytic {analytic} numeric {numeric}");
}

/// Checks every entry of `grad` against `f(perturbed input)`.
fn check(what: &str, x: &Tensor<f64>, grad: &[f64], f: impl Fn(&Tensor<f64>) -> f64) {
    assert_eq!(x.len(), grad.len(), "{what}: gradient length");
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let up = f(&p);
        p.data_mut()[i] -= 2.0 * H;
        let down = f(&p);
        assert_close(&format!("{what}[{i}]"), grad[i], (up - down) / (2.0 * H));
    }
}

pub fn conv2d(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (stride, pad, k) in [(1, 1, 3), (2, 0, 3), (1, 0, 1)] {
        let x = random(&[2, 3, 6, 5], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        let up = random(y.shape(), &mut rng);
        let g = conv2d_backward(&up, &x, &w, stride, pad).unwrap();
        let tag = format!("conv s{stride} p{pad} k{k} seed {seed}");
        check(&format!("{tag} input"), &x, g.input.data(), |x| dot(&conv2d_forward(x, &w, &b, stride, pad).unwrap(), &up));
        check(&format!("{tag} kernel"), &w, g.kernel.data(), |w| dot(&conv2d_forward(&x, w, &b, stride, pad).unwrap(), &up));
        check(&format!("{tag} bias"), &b, g.bias.data(), |b| dot(&conv2d_forward(&x, &w, b, stride, pad).unwrap(), &up));
    }
}

fn bn_train(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> (Tensor<f64>, sfod::batchnorm::BnCache<f64>) {
    let mut st = BnState::<f64>::new(gamma.len());
    st.gamma = gamma.to_vec();
    st.beta = beta.to_vec();
    bn_forward(x, st.view(), BnMode::Train).unwrap()
}

pub fn batchnorm_train(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[3, 4, 3, 2], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    let (y, cache) = bn_train(&x, gamma.data(), beta.data());
    let up = random(y.shape(), &mut rng);
    let g = bn_backward(&up, &cache, gamma.data()).unwrap();
    check(&format!("bn input seed {seed}"), &x, g.input.data(), |x| dot(&bn_train(x, gamma.data(), beta.data()).0, &up));
    check(&format!("bn gamma seed {seed}"), &gamma, &g.gamma, |gm| dot(&bn_train(&x, gm.data(), beta.data()).0, &up));
    check(&format!("bn beta seed {seed}"), &beta, &g.beta, |bt| dot(&bn_train(&x, gamma.data(), bt.data()).0, &up));
}

pub fn linear(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[5, 7], &mut rng);
    let w = random(&[3, 7], &mut rng);
    let b = random(&[3], &mut rng);
    let up = random(&[5, 3], &mut rng);
    let g = linear_backward(&up, &x, &w).unwrap();
    check("linear input", &x, g.input.data(), |x| dot(&linear_forward(x, &w, &b).unwrap(), &up));
    check("linear weight", &w, g.weight.data(), |w| dot(&linear_forward(&x, w, &b).unwrap(), &up));
    check("linear bias", &b, g.bias.data(), |b| dot(&linear_forward(&x, &w, b).unwrap(), &up));
}

/// Inputs kept away from the kink so a finite step never crosses it.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
    t
}

pub fn relu(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&[2, 3, 4, 4], &mut rng);
    let up = random(x.shape(), &mut rng);
    let g = relu_backward(&up, &relu_forward(&x)).unwrap();
    check("relu", &x, g.data(), |x| dot(&relu_forward(x), &up));
}

pub fn maxpool(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Distinct values spaced well beyond the step size keep argmax stable.
    let n = 2 * 3 * 6 * 6;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 3, 6, 6], vals).unwrap();
    let (y, arg) = maxpool2_forward(&x).unwrap();
    let up = random(y.shape(), &mut rng);
    let g = maxpool2_backward(&up, &arg, x.shape()).unwrap();
    check("maxpool", &x, g.data(), |x| dot(&maxpool2_forward(x).unwrap().0, &up));
}

pub fn roi_pool_routes_to_argmax(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * 7 * 7;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 7, 7], vals).unwrap();
    let roi = BBox::new(0.7, 1.2, 6.1, 5.5);
    let (y, arg) = roi_pool(&x, &roi, 3).unwrap();
    let up = random(y.shape(), &mut rng);
    let mut grad = vec![0.0; n];
    for (i, &a) in arg.iter().enumerate() {
        grad[a as usize] += up.data()[i];
    }
    check("roi_pool", &x, &grad, |x| dot(&roi_pool(x, &roi, 3).unwrap().0, &up));
}

pub fn softmax_cross_entropy_loss(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random(&[6, 4], &mut rng).map(|v| 3.0 * v);
    let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &targets).unwrap();
    check("cross entropy", &logits, g.data(), |l| softmax_cross_entropy(l, &targets).unwrap().0);
}

pub fn smooth_l1_loss(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random(&[12], &mut rng).map(|v| 3.0 * v);
    let target = random(&[12], &mut rng);
    // Keep |pred - target| away from the transition at 1.
    let pred = Tensor::from_vec(
        &[12],
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| if ((p - t).abs() - 1.0).abs() < 0.05 { p + 0.1 } else { p })
            .collect(),
    )
    .unwrap();
    let (_, g) = smooth_l1(pred.data(), target.data(), 5).unwrap();
    check("smooth l1", &pred, &g, |p| smooth_l1(p.data(), target.data(), 5).unwrap().0);
}

fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor {
        input_size: 32,
        backbone_channels: vec![3, 4, 4],
        rpn_channels: 4,
        anchor_scales: vec![8.0, 16.0],
        anchor_aspects: vec![1.0],
        roi_hidden: 8,
        roi_pool_size: 2,
        ..ArchDescriptor::default()
    }
}

/// Spot check of 20 detector parameters through the full training loss,
/// with proposals fixed so the sampled sets do not move with the weights.
pub fn detector_total_loss() {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ModelState::<f64>::init(&arch, &mut rng).unwrap();
    let images = random(&[2, 3, 32, 32], &mut rng).map(|v| 0.5 + 0.5 * v);
    let targets = vec![
        vec![
            GroundTruth { bbox: BBox::new(4.0, 5.0, 17.0, 16.0), class_id: 0 },
            GroundTruth { bbox: BBox::new(18.0, 14.0, 30.0, 29.0), class_id: 2 },
        ],
        vec![GroundTruth { bbox: BBox::new(8.0, 2.0, 22.0, 20.0), class_id: 1 }],
    ];
    let proposals = vec![
        vec![BBox::new(3.0, 4.0, 18.0, 17.0), BBox::new(19.0, 13.0, 29.0, 30.0), BBox::new(0.0, 20.0, 10.0, 31.0), BBox::new(10.0, 0.0, 26.0, 12.0)],
        vec![BBox::new(7.0, 3.0, 21.0, 21.0), BBox::new(20.0, 20.0, 31.0, 31.0), BBox::new(1.0, 1.0, 9.0, 12.0)],
    ];
    let sampling = SamplingConfig::default();
    let opts = TrainOptions { include_reg: true, sampling: &sampling, fixed_proposals: Some(&proposals) };
    let loss = |m: &ModelState<f64>| {
        let mut m = m.clone();
        forward_train(&mut m, &images, &targets, &opts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().losses.total
    };
    let mut m = model.clone();
    let out = forward_train(&mut m, &images, &targets, &opts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(out.losses.rpn_reg > 0.0 && out.losses.roi_reg > 0.0);

    let trainable: Vec<usize> = (0..model.len()).filter(|&i| model.kinds()[i] != ParamKind::BnStat).collect();
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-6;
    let mut checked = 0;
    while checked < 20 {
        let ti = trainable[pick.gen_range(0..trainable.len())];
        let j = pick.gen_range(0..model.tensors()[ti].len());
        let analytic = out.grads.tensors()[ti].data()[j];
        let mut p = model.clone();
        p.tensors_mut()[ti].data_mut()[j] += h;
        let up = loss(&p);
        p.tensors_mut()[ti].data_mut()[j] -= 2.0 * h;
        let down = loss(&p);
        assert_close(&format!("{}[{j}]", model.names()[ti]), analytic, (up - down) / (2.0 * h));
        checked += 1;
    }
}

/// Every layer-level check over all seeds.
pub fn all_layers() {
    for seed in SEEDS {
        conv2d(seed);
        batchnorm_train(seed);
        linear(seed);
        relu(seed);
        maxpool(seed);
        roi_pool_routes_to_argmax(seed);
        softmax_cross_entropy_loss(seed);
        smooth_l1_loss(seed);
    }
}
