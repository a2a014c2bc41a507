use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfod::boxes::{BBox, GroundTruth};
use sfod::detector::{forward_train, ArchDescriptor, ModelState, SamplingConfig, TrainOptions};
use sfod::optim::Sgd;
use sfod::Tensor;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let mut arch = ArchDescriptor::default();
    if args.len() >= 4 {
        arch.backbone_channels = args[..4].to_vec();
        arch.rpn_channels = args[3];
    }
    if args.len() >= 5 {
        arch.roi_hidden = args[4];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ModelState::<f32>::init(&arch, &mut rng).unwrap();
    let mut opt = Sgd::new(0.01, 0.9);
    let sampling = SamplingConfig::default();
    let s = arch.input_size;
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(40);
    let start = Instant::now();
    for step in 0..steps {
        let mut data = vec![0.2f32; 4 * 3 * s * s];
        let mut targets = Vec::new();
        for n in 0..4 {
            let mut gts = Vec::new();
            for _ in 0..3 {
                let w = rng.gen_range(12..40) as f32;
                let x = rng.gen_range(0.0..s as f32 - w);
                let y = rng.gen_range(0.0..s as f32 - w);
                let c = rng.gen_range(0..3usize);
                for yy in y as usize..(y + w) as usize {
                    for xx in x as usize..(x + w) as usize {
                        data[((n * 3 + c) * s + yy) * s + xx] = 0.9;
                    }
                }
                gts.push(GroundTruth { bbox: BBox::new(x, y, x + w, y + w), class_id: c });
            }
            targets.push(gts);
        }
        let images = Tensor::from_vec(&[4, 3, s, s], data).unwrap();
        let opts = TrainOptions { include_reg: true, sampling: &sampling, fixed_proposals: None };
        let out = forward_train(&mut model, &images, &targets, &opts, &mut rng).unwrap();
        opt.step(&mut model, &out.grads).unwrap();
        if step % 10 == 0 {
            println!("step {step}: {:?}", out.losses);
        }
    }
    println!("{:.1} ms/step", start.elapsed().as_secs_f64() * 1000.0 / steps as f64);
}
