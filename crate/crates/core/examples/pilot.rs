use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfod::adabn::{batches_of, collect_target_statistics};
use sfod::detector::{ArchDescriptor, InferenceConfig, ModelState};
use sfod::synth::{DataSpec, Shift};
use sfod::train::{evaluate, train_source, SourceConfig};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let ch: Vec<usize> = env("CH", "8,16,32,32".to_string()).split(',').map(|v| v.parse().unwrap()).collect();
    let arch = ArchDescriptor { rpn_channels: *ch.last().unwrap(), backbone_channels: ch, roi_hidden: env("HID", 128), ..ArchDescriptor::default() };
    let mut spec = DataSpec::default();
    spec.target.shift = Shift::Fog { strength: env("FOG", 0.7), haze: [0.8; 3] };
    let t = Instant::now();
    let src_train = spec.generate_split(0, 0);
    let src_test = spec.generate_split(1, 0);
    let tgt_train = spec.generate_split(2, 0);
    let tgt_test = spec.generate_split(3, 0);
    println!("data {:.1}s", t.elapsed().as_secs_f64());
    let steps = env("STEPS", 2000usize);
    let cfg = SourceConfig { steps, lr: env("LR", 0.01), decay_step: Some(steps * 3 / 4), ..SourceConfig::default() };
    let mut model = ModelState::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let inf = InferenceConfig::default();
    let t = Instant::now();
    let mut acc = 0.0;
    train_source(&mut model, &src_train, &cfg, |step, l, m| {
        acc += l.total;
        if step % 250 == 0 {
            let e = evaluate(m, &src_test, &inf).unwrap();
            println!("step {step} loss {:.3} src_test map {:.3} ({:.0}s)", acc / 250.0, e.map, t.elapsed().as_secs_f64());
            acc = 0.0;
        }
    })
    .unwrap();
    let s = evaluate(&model, &src_test, &inf).unwrap();
    let g = evaluate(&model, &tgt_test, &inf).unwrap();
    let imgs: Vec<_> = tgt_train.iter().map(|s| &s.image).collect();
    let ada = collect_target_statistics(&model, batches_of(&imgs, 4)).unwrap();
    let a = evaluate(&ada, &tgt_test, &inf).unwrap();
    println!("source->source {:.3} {:?}", s.map, s.per_class_ap);
    println!("source->target {:.3} {:?}", g.map, g.per_class_ap);
    println!("adabn->target  {:.3} {:?}", a.map, a.per_class_ap);
    let path = std::env::var("SAVE").ok();
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_vec(&model.tensors().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>()).unwrap()).unwrap();
    }
}
