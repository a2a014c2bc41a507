use sfod::synth::{write_dataset, DataSpec};

fn main() {
    let out = std::env::args().nth(1).expect("out dir");
    let spec = DataSpec { source_train: 4, source_test: 0, target_train: 4, target_test: 0, ..DataSpec::default() };
    for split in [0, 2] {
        let scenes = spec.generate_split(split, 0);
        write_dataset(&scenes, &std::path::Path::new(&out).join(split.to_string()), serde_json::Value::Null).unwrap();
    }
}
