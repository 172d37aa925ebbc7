//! Scratch calibration run for desk-scale experiment sizing.

use std::time::Instant;

use lenspatch::data::{generate_synthetic, synthetic_class_names, SyntheticConfig};
use lenspatch::detector::{train_toy_detector, DetectorArch, DetectorTrainConfig};
use lenspatch::evaluation::{
    dataset_average_precision, evaluate_condition, make_baseline_patch, BaselineKind,
    BaselinePatch, EvalConfig,
};
use lenspatch::losses::PrintableColors;
use lenspatch::optimizer::{optimize_patch, AttackContext, OptimizerConfig};
use lenspatch::patch::ManualParams;

fn main() {
    let t0 = Instant::now();
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
    let (train, val) = {
        let spec = lenspatch::data::SplitSpec {
            train_frac: 0.9,
            val_frac: 0.1,
            test_sources: std::iter::once("synthtest".to_string()).collect(),
            seed: 3,
        };
        let mut all = pool.clone();
        all.records.extend(test.records.iter().cloned());
        let (tr, va, _te) = lenspatch::data::split_dataset(&all, &spec).unwrap();
        (tr, va)
    };
    println!(
        "[{:.1?}] data: train {} val {} test {}",
        t0.elapsed(),
        train.len(),
        val.len(),
        test.len()
    );

    let arch = DetectorArch::new(64, 64, synthetic_class_names());
    let det_cfg = DetectorTrainConfig::default();
    let t1 = Instant::now();
    let detector = match train_toy_detector(&train, &test, arch, &det_cfg) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("detector training failed: {e}");
            std::process::exit(1);
        }
    };
    println!("[{:.1?}] detector trained in {:.1?}", t0.elapsed(), t1.elapsed());
    let aps = dataset_average_precision(&detector, &test, None, 0.5).unwrap();
    println!("clean test APs: {aps:?}");

    let printable = PrintableColors::default_set();
    let manual = ManualParams::default();
    let ctx = AttackContext {
        detector: &detector,
        manual,
        target_class: 0,
        printable: &printable,
    };
    let opt_cfg = OptimizerConfig::default();
    let t2 = Instant::now();
    let (params, history) = optimize_patch(&train, &val, &ctx, &opt_cfg).unwrap();
    println!("[{:.1?}] attack optimized in {:.1?}", t0.elapsed(), t2.elapsed());
    for e in &history.epochs {
        println!(
            "  epoch {:2}: total {:.4} tc {:.4} iou {:.4} uc {:.4} nps {:.4} | val tAP {:.3} uAP {:.3}",
            e.epoch, e.train.total, e.train.target_conf, e.train.iou, e.train.untargeted_conf,
            e.train.nps, e.val_target_ap, e.val_untargeted_ap
        );
    }

    let eval_cfg = EvalConfig::default();
    let clean = evaluate_condition(&detector, &test, "CLEAN", None, &eval_cfg).unwrap();
    let patch = evaluate_condition(
        &detector,
        &test,
        "PATCH",
        Some(&BaselinePatch::Shapes(params.clone())),
        &eval_cfg,
    )
    .unwrap();
    let random = evaluate_condition(
        &detector,
        &test,
        "RANDOM",
        Some(&make_baseline_patch(BaselineKind::Random, manual, 99)),
        &eval_cfg,
    )
    .unwrap();
    println!(
        "CLEAN : target AP {:.4} untargeted AP {:.4}",
        clean.target_ap, clean.untargeted_ap
    );
    println!(
        "PATCH : target AP {:.4} untargeted AP {:.4} (drop {:.1} pts, untargeted ratio {:.3})",
        patch.target_ap,
        patch.untargeted_ap,
        100.0 * (clean.target_ap - patch.target_ap),
        patch.untargeted_ap / clean.untargeted_ap
    );
    println!(
        "RANDOM: target AP {:.4} untargeted AP {:.4} (drop {:.1} pts)",
        random.target_ap,
        random.untargeted_ap,
        100.0 * (clean.target_ap - random.target_ap)
    );
    println!("total {:.1?}", t0.elapsed());
}
