//! Scratch: criterion-6 sweep trend verification.

use std::time::Instant;

use lenspatch::data::{generate_synthetic, split_dataset, synthetic_class_names, SplitSpec,
    SyntheticConfig};
use lenspatch::detector::{train_toy_detector, DetectorArch, DetectorTrainConfig};
use lenspatch::evaluation::{run_sweep, EvalConfig, SweepAxis};
use lenspatch::losses::PrintableColors;
use lenspatch::optimizer::{AttackContext, OptimizerConfig};
use lenspatch::patch::ManualParams;

fn main() {
    let t0 = Instant::now();
    let mut pool = generate_synthetic(&SyntheticConfig {
        scenes: 500,
        seed: 11,
        source: "synth".into(),
        ..Default::default()
    });
    let test_data = generate_synthetic(&SyntheticConfig {
        scenes: 160,
        seed: 12,
        source: "synthtest".into(),
        ..Default::default()
    });
    pool.records.extend(test_data.records.iter().cloned());
    let spec = SplitSpec {
        train_frac: 0.9,
        val_frac: 0.1,
        test_sources: std::iter::once("synthtest".to_string()).collect(),
        seed: 3,
    };
    let (train, val, test) = split_dataset(&pool, &spec).unwrap();
    let arch = DetectorArch::new(64, 64, synthetic_class_names());
    let detector =
        train_toy_detector(&train, &test, arch, &DetectorTrainConfig::default()).unwrap();
    println!("[{:.1?}] detector ready", t0.elapsed());

    let printable = PrintableColors::default_set();
    let ctx = AttackContext {
        detector: &detector,
        manual: ManualParams::default(),
        target_class: 0,
        printable: &printable,
    };
    let opt_cfg = OptimizerConfig {
        epochs: 12,
        ..Default::default()
    };
    let eval_cfg = EvalConfig::default();

    let rows = run_sweep(
        SweepAxis::NShapes,
        &[3.0, 8.0],
        &train,
        &val,
        &test,
        &ctx,
        &opt_cfg,
        &eval_cfg,
    )
    .unwrap();
    for r in &rows {
        println!("n={}: target {:.4} untargeted {:.4}", r.value, r.target_ap, r.untargeted_ap);
    }
    let rows = run_sweep(
        SweepAxis::AlphaMax,
        &[0.1, 0.5],
        &train,
        &val,
        &test,
        &ctx,
        &opt_cfg,
        &eval_cfg,
    )
    .unwrap();
    for r in &rows {
        println!(
            "alpha={}: target {:.4} untargeted {:.4}",
            r.value, r.target_ap, r.untargeted_ap
        );
    }
    println!("total {:.1?}", t0.elapsed());
}
