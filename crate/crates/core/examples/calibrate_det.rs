//! Scratch: detector hyperparameter probing.

use std::time::Instant;

use lenspatch::data::{generate_synthetic, synthetic_class_names, SyntheticConfig};
use lenspatch::detector::{train_toy_detector, DetectorArch, DetectorTrainConfig};
use lenspatch::evaluation::dataset_average_precision;

fn main() {
    let pool = generate_synthetic(&SyntheticConfig {
        scenes: 500,
        seed: 11,
        source: "synth".into(),
        ..Default::default()
    });
    let test = generate_synthetic(&SyntheticConfig {
        scenes: 160,
        seed: 12,
        source: "synthtest".into(),
        ..Default::default()
    });
    let spec = lenspatch::data::SplitSpec {
        train_frac: 0.9,
        val_frac: 0.1,
        test_sources: Default::default(),
        seed: 3,
    };
    let (train, _val, _) = lenspatch::data::split_dataset(&pool, &spec).unwrap();

    for (epochs, lambda_box, lambda_noobj, lr) in [
        (20usize, 2.0, 0.3, 1e-3),
        (25, 2.0, 0.3, 1e-3),
        (30, 2.0, 0.3, 1e-3),
    ] {
        let arch = DetectorArch::new(64, 64, synthetic_class_names());
        let cfg = DetectorTrainConfig {
            epochs,
            lambda_box,
            lambda_noobj,
            lr,
            ap_floor: 0.0,
            ..Default::default()
        };
        let t = Instant::now();
        let det = train_toy_detector(&train, &test, arch, &cfg).unwrap();
        let aps = dataset_average_precision(&det, &test, None, 0.5).unwrap();
        println!(
            "epochs {epochs} lb {lambda_box} ln {lambda_noobj} lr {lr}: APs {:?} in {:.1?}",
            aps.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            t.elapsed()
        );
    }
}
