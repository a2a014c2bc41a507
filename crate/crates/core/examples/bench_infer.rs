use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfod::adabn::stack;
use sfod::detector::{detect_batch, ArchDescriptor, InferenceConfig, ModelState, StatsMode};
use sfod::synth::DataSpec;

fn main() {
    let arch = ArchDescriptor { backbone_channels: vec![8, 16, 32, 32], rpn_channels: 32, roi_hidden: 128, ..ArchDescriptor::default() };
    let model = ModelState::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let spec = DataSpec { target_test: 64, ..DataSpec::default() };
    let scenes = spec.generate_split(3, 0);
    let imgs: Vec<_> = scenes.iter().map(|s| &s.image).collect();
    let cfg = InferenceConfig::default();
    for bs in [4, 16] {
        let t = Instant::now();
        let mut dets = 0;
        for chunk in imgs.chunks(bs) {
            dets += detect_batch(&model, &stack(chunk), &cfg, StatsMode::Running).unwrap().iter().map(Vec::len).sum::<usize>();
        }
        println!("batch {bs}: {:.2} ms/img ({dets} dets)", t.elapsed().as_secs_f64() * 1e3 / imgs.len() as f64);
    }
}
