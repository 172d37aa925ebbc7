//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Run with `cargo test -p lenspatch-cli --test
//! acceptance -- --nocapture` to see the per-criterion lines.

use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lenspatch::data::{generate_synthetic, split_dataset, synthetic_class_names, Dataset,
    SplitSpec, SyntheticConfig};
use lenspatch::detector::{train_toy_detector, DetectorAdapter, DetectorArch,
    DetectorTrainConfig, DifferentiableDetector, GridDetector};
use lenspatch::evaluation::{
    average_precision, evaluate_condition, fooling_rate, make_baseline_patch, match_detections,
    run_sweep, BaselineKind, BaselinePatch, EvalConfig, SweepAxis,
};
use lenspatch::image_io::{PatchImage, SceneImage};
use lenspatch::losses::{
    attack_loss_with_grad, clean_untargeted_confs, nps_loss, total_loss, untargeted_conf_loss,
    AttackLossConfig, LossWeights, PrintableColors,
};
use lenspatch::optimizer::{optimize_patch, AttackContext, OptimizerConfig};
use lenspatch::patch::{init_free_params, ManualParams, PatchParams, ShapeParams,
    PARAMS_PER_SHAPE};
use lenspatch::render::{
    alpha_at_distance, alpha_blend, render_and_apply, render_and_apply_cached, render_backward,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shared desk-scale world: synthetic datasets plus a trained detector.
struct World {
    train: Dataset,
    val: Dataset,
    test: Dataset,
    detector: GridDetector,
    clean_aps: Vec<f64>,
}

static WORLD: OnceLock<World> = OnceLock::new();

fn world() -> &'static World {
    WORLD.get_or_init(|| {
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
        let (train, val, test) = split_dataset(&pool, &spec).expect("split");
        let arch = DetectorArch::new(64, 64, synthetic_class_names());
        let detector = train_toy_detector(&train, &test, arch, &DetectorTrainConfig::default())
            .expect("detector reaches the clean AP floor");
        let clean_aps =
            lenspatch::evaluation::dataset_average_precision(&detector, &test, None, 0.5)
                .expect("clean eval");
        World {
            train,
            val,
            test,
            detector,
            clean_aps,
        }
    })
}

fn assert_runtime(name: &str, elapsed: Duration, bound: Duration) {
    assert!(
        elapsed <= bound,
        "{name} took {elapsed:.1?}, bound {bound:.1?}"
    );
}

/// Criterion 1: closed-form renderer fixtures at double precision.
#[test]
fn criterion_1_renderer_closed_form() {
    let start = Instant::now();
    let manual = ManualParams::default(); // alpha_max 0.4, s 0.9, beta 2.5

    // Opacity profile at d in {0, 0.25, 1} against exact scalar arithmetic.
    assert!((alpha_at_distance(0.0, &manual) - 0.4).abs() < 1e-12);
    // 0.25^2.5 = 0.03125 exactly in binary floating point.
    let oracle_quarter = 0.4 * (1.0 - 0.9 * 0.03125);
    assert!((alpha_at_distance(0.25, &manual) - oracle_quarter).abs() < 1e-12);
    assert!((oracle_quarter - 0.38875).abs() < 1e-12);
    let oracle_edge = 0.4 * (1.0 - 0.9);
    assert!((alpha_at_distance(1.0, &manual) - oracle_edge).abs() < 1e-12);

    // Blending identity (alpha = 0) and opaque (alpha = 1) cases are exact.
    let scene = SceneImage::filled(16, 12, [0.37, 0.81, 0.24]);
    let transparent = PatchImage::transparent(16, 12);
    assert_eq!(alpha_blend(&scene, &transparent).unwrap(), scene);
    let opaque = PatchImage::uniform(16, 12, [0.6, 0.1, 0.9], 1.0);
    let blended = alpha_blend(&scene, &opaque).unwrap();
    for px in 0..16 * 12 {
        assert_eq!(blended.data()[px], 0.6);
        assert_eq!(blended.data()[16 * 12 + px], 0.1);
        assert_eq!(blended.data()[2 * 16 * 12 + px], 0.9);
    }

    let elapsed = start.elapsed();
    assert_runtime("criterion 1", elapsed, Duration::from_secs(1));
    println!("[acceptance] C1 PASS: renderer closed-form suite exact to 1e-12 ({elapsed:.2?})");
}

/// Interior random patch parameters that keep finite-difference probes away
/// from the projection bounds.
fn interior_params(manual: ManualParams, seed: u64) -> PatchParams {
    let mut params = init_free_params(manual, seed);
    for s in &mut params.shapes {
        s.center_x = s.center_x.clamp(-0.8, 0.8);
        s.center_y = s.center_y.clamp(-0.8, 0.8);
        s.radius = s
            .radius
            .clamp(manual.r_min + 0.02, manual.r_max - 0.02);
        s.shear_x = s.shear_x.clamp(-0.7, 0.7);
        s.shear_y = s.shear_y.clamp(-0.7, 0.7);
        for c in &mut s.color {
            *c = c.clamp(0.1, 0.9);
        }
    }
    params
}

/// Central finite difference with a kink guard: estimates at steps h and h/2
/// must agree, otherwise the coordinate sits on a clamp/max switch and is
/// reported as non-smooth.
fn fd_checked(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> Option<f64> {
    let eval = |delta: f64| {
        let mut v = x.to_vec();
        v[k] += delta;
        f(&v)
    };
    let fd_h = (eval(h) - eval(-h)) / (2.0 * h);
    let fd_h2 = (eval(h / 2.0) - eval(-h / 2.0)) / h;
    let denom = fd_h.abs().max(fd_h2.abs()).max(1e-4);
    if (fd_h - fd_h2).abs() / denom > 5e-4 {
        return None; // non-smooth point
    }
    Some(fd_h2)
}

/// Criterion 2: analytic gradients against central finite differences for
/// (a) weighted sums of rendered output and (b) the full attack loss through
/// the toy detector, on >= 20 random configurations each.
#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let w = world();
    let step = 1e-5;
    let tol = 1e-3;

    // (a) render_and_apply output sums.
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let mut accepted_a = 0;
    let mut seed = 0u64;
    while accepted_a < 20 {
        seed += 1;
        assert!(seed < 200, "could not find 20 smooth render configs");
        let manual = ManualParams {
            alpha_max: rng.gen_range(0.2..0.9),
            s: rng.gen_range(0.5..0.95),
            beta: rng.gen_range(1.5..3.0),
            r_min: 0.05,
            r_max: 0.4,
            n_shapes: 2,
        };
        let params = interior_params(manual, 7000 + seed);
        let mut scene = SceneImage::zeros(32, 32);
        for v in scene.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let weights: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, cache) = render_and_apply_cached(&params, &scene).unwrap();
        let analytic = render_backward(&params, &scene, &cache, &weights);
        let flat = params.to_flat();
        let f = |v: &[f64]| -> f64 {
            let mut p = params.clone();
            p.set_from_flat(v);
            render_and_apply(&p, &scene)
                .unwrap()
                .data()
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut config_ok = true;
        for (k_shape, g) in analytic.iter().enumerate() {
            for (o, a) in g.to_flat().iter().enumerate() {
                let k = k_shape * PARAMS_PER_SHAPE + o;
                match fd_checked(&f, &flat, k, step) {
                    None => {
                        config_ok = false;
                        break;
                    }
                    Some(fd) => {
                        let denom = a.abs().max(fd.abs()).max(1e-4);
                        assert!(
                            (a - fd).abs() / denom < tol,
                            "render grad mismatch: shape {k_shape} field {o}: {a} vs fd {fd}"
                        );
                    }
                }
            }
            if !config_ok {
                break;
            }
        }
        if config_ok {
            accepted_a += 1;
        }
    }

    // (b) total attack loss through the trained toy detector.
    let printable = PrintableColors::default_set();
    let loss_cfg = AttackLossConfig {
        target_class: 0,
        weights: LossWeights::paper_defaults(),
        relevance_floor: 0.1,
    };
    let mut accepted_b = 0;
    let mut attempt = 0u64;
    while accepted_b < 20 {
        attempt += 1;
        assert!(attempt < 200, "could not find 20 smooth loss configs");
        let rec = &w.train.records[(attempt as usize * 13) % w.train.len()];
        let manual = ManualParams {
            n_shapes: 2,
            ..Default::default()
        };
        let params = interior_params(manual, 9000 + attempt);
        let clean_grid = w.detector.detect_raw(&rec.image).unwrap();
        let clean_confs = clean_untargeted_confs(&clean_grid, &rec.boxes, 0);

        // Analytic gradient through detector and renderer.
        let (patched, render_cache) = render_and_apply_cached(&params, &rec.image).unwrap();
        let (grid, det_cache) = w.detector.forward_cached(&patched).unwrap();
        let (_, grid_grad, color_grad) = attack_loss_with_grad(
            &grid,
            &clean_confs,
            &rec.boxes,
            &params,
            &printable,
            &loss_cfg,
        );
        let d_image = w.detector.backward_to_input(&det_cache, &grid_grad);
        let shape_grads = render_backward(&params, &rec.image, &render_cache, &d_image);
        let mut analytic = vec![0.0; params.shapes.len() * PARAMS_PER_SHAPE];
        for (k, g) in shape_grads.iter().enumerate() {
            for (o, v) in g.to_flat().into_iter().enumerate() {
                analytic[k * PARAMS_PER_SHAPE + o] = v;
            }
            for c in 0..3 {
                analytic[k * PARAMS_PER_SHAPE + 5 + c] += color_grad[k][c];
            }
        }

        let flat = params.to_flat();
        let f = |v: &[f64]| -> f64 {
            let mut p = params.clone();
            p.set_from_flat(v);
            let patched = render_and_apply(&p, &rec.image).unwrap();
            let grid = w.detector.detect_raw(&patched).unwrap();
            let (breakdown, _, _) = attack_loss_with_grad(
                &grid,
                &clean_confs,
                &rec.boxes,
                &p,
                &printable,
                &loss_cfg,
            );
            breakdown.total
        };
        let mut config_ok = true;
        for k in 0..flat.len() {
            match fd_checked(&f, &flat, k, step) {
                None => {
                    config_ok = false;
                    break;
                }
                Some(fd) => {
                    let denom = analytic[k].abs().max(fd.abs()).max(1e-4);
                    assert!(
                        (analytic[k] - fd).abs() / denom < tol,
                        "loss grad mismatch at param {k}: {} vs fd {fd}",
                        analytic[k]
                    );
                }
            }
        }
        if config_ok {
            accepted_b += 1;
        }
    }

    let elapsed = start.elapsed();
    assert_runtime("criterion 2", elapsed, Duration::from_secs(120));
    println!(
        "[acceptance] C2 PASS: {accepted_a} render + {accepted_b} loss configs matched finite \
         differences at rel 1e-3 ({elapsed:.2?})"
    );
}

/// Brute-force AP oracle: enumerate every distinct confidence as threshold,
/// compute exact precision/recall by counting, integrate the interpolated
/// envelope by direct scanning.
fn ap_oracle(dets: &[(f64, bool)], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for &t in &thresholds {
        let kept: Vec<_> = dets.iter().filter(|d| d.0 >= t).collect();
        let tp = kept.iter().filter(|d| d.1).count();
        curve.push((tp as f64 / total_gt as f64, tp as f64 / kept.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, _) in &curve {
        if r <= prev_r {
            continue;
        }
        let p = curve
            .iter()
            .filter(|(rr, _)| *rr >= r)
            .map(|(_, pp)| *pp)
            .fold(0.0, f64::max);
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// Criterion 3: average_precision equals brute-force threshold enumeration
/// to 1e-9 on 200 randomized instances.
#[test]
fn criterion_3_ap_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut max_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(0..=50);
        let total_gt = rng.gen_range(0..=20);
        let mut tp_left = total_gt;
        let dets: Vec<(f64, bool)> = (0..n)
            .map(|k| {
                let conf = rng.gen_range(0.0..1.0) + k as f64 * 1e-9;
                let tp = tp_left > 0 && rng.gen_bool(0.5);
                if tp {
                    tp_left -= 1;
                }
                (conf, tp)
            })
            .collect();
        let (ap, _) = average_precision(&dets, total_gt);
        let oracle = ap_oracle(&dets, total_gt);
        max_err = max_err.max((ap - oracle).abs());
        assert!(
            (ap - oracle).abs() < 1e-9,
            "ap {ap} vs oracle {oracle} on {dets:?} gt={total_gt}"
        );
    }
    let elapsed = start.elapsed();
    assert_runtime("criterion 3", elapsed, Duration::from_secs(30));
    println!(
        "[acceptance] C3 PASS: 200 randomized AP instances matched the brute-force oracle \
         (max err {max_err:.2e}, {elapsed:.2?})"
    );
}

/// Criterion 4: loss arithmetic fixtures with the reported weights.
#[test]
fn criterion_4_loss_arithmetic() {
    // Weighted total with the grid-search optimum on components
    // (0.5, 0.2, 0.1, 0.0): 0.74*0.5 + 0.15*0.2 + 0.1*0.1 + 0.01*0 = 0.41.
    let weights = LossWeights::paper_defaults();
    let b = total_loss(0.5, 0.2, 0.1, 0.0, &weights).unwrap();
    assert!((b.total - 0.41).abs() < 1e-12, "total {}", b.total);

    // Untargeted confidence example: clean {car 0.9, person 0.8} vs patched
    // {car 0.7, person 0.8} over M = 2 classes -> 0.1.
    use lenspatch::bbox::BBox;
    use lenspatch::data::GtBox;
    use lenspatch::detector::{CandidateBox, DetectionGrid};
    let mk_grid = |car: f64, person: f64| DetectionGrid {
        candidates: vec![CandidateBox {
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
            objectness: 1.0,
            class_scores: vec![0.0, car, person],
        }],
        image_width: 64,
        image_height: 64,
        class_names: vec!["octagon".into(), "car".into(), "person".into()],
    };
    let truth = [
        GtBox {
            class_id: 1,
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
        },
        GtBox {
            class_id: 2,
            bbox: BBox::new(10.0, 10.0, 18.0, 18.0),
        },
    ];
    let v = untargeted_conf_loss(&mk_grid(0.9, 0.8), &mk_grid(0.7, 0.8), &truth, 0);
    assert!((v - 0.1).abs() < 1e-12, "untargeted {v}");

    // Printability fixtures.
    let set = PrintableColors {
        colors: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    };
    let patch_of = |colors: &[[f64; 3]]| PatchParams {
        manual: ManualParams {
            n_shapes: colors.len(),
            ..Default::default()
        },
        shapes: colors
            .iter()
            .map(|c| ShapeParams {
                center_x: 0.0,
                center_y: 0.0,
                radius: 0.1,
                shear_x: 0.0,
                shear_y: 0.0,
                color: *c,
            })
            .collect(),
    };
    assert_eq!(
        nps_loss(&patch_of(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), &set).unwrap(),
        0.0
    );
    let v = nps_loss(&patch_of(&[[0.5, 0.0, 0.0]]), &set).unwrap();
    assert!((v - 0.5).abs() < 1e-12);
    let two = PrintableColors {
        colors: vec![[0.0, 0.0, 0.0]],
    };
    let v = nps_loss(&patch_of(&[[0.3, 0.0, 0.0], [0.0, 0.3, 0.0]]), &two).unwrap();
    assert!((v - 0.6).abs() < 1e-12);

    println!("[acceptance] C4 PASS: loss arithmetic fixtures exact at f64 resolution");
}

/// Criterion 5: desk-scale end-to-end attack. Eight shapes at opacity 0.4
/// must cut held-out target AP by >= 30 points versus CLEAN, keep untargeted
/// AP at >= 0.75 of clean, and beat the RANDOM baseline's reduction by >= 10
/// points.
#[test]
fn criterion_5_desk_scale_attack() {
    let start = Instant::now();
    let w = world();
    assert!(w.train.len() + w.val.len() + w.test.len() >= 500 + 160);
    assert!(w.train.class_names.len() >= 3);
    for (name, ap) in w.train.class_names.iter().zip(&w.clean_aps) {
        assert!(*ap >= 0.9, "clean AP for {name} is {ap}");
    }

    let printable = PrintableColors::default_set();
    let manual = ManualParams::default(); // 8 shapes, alpha_max 0.4
    let ctx = AttackContext {
        detector: &w.detector,
        manual,
        target_class: 0,
        printable: &printable,
    };
    let opt_cfg = OptimizerConfig::default();
    let (params, history) = optimize_patch(&w.train, &w.val, &ctx, &opt_cfg).unwrap();
    assert!(history
        .epochs
        .iter()
        .all(|e| e.train.total.is_finite()));

    let eval_cfg = EvalConfig::default();
    let clean = evaluate_condition(&w.detector, &w.test, "CLEAN", None, &eval_cfg).unwrap();
    let patch = evaluate_condition(
        &w.detector,
        &w.test,
        "PATCH",
        Some(&BaselinePatch::Shapes(params)),
        &eval_cfg,
    )
    .unwrap();
    let random = evaluate_condition(
        &w.detector,
        &w.test,
        "RANDOM",
        Some(&make_baseline_patch(BaselineKind::Random, manual, 99)),
        &eval_cfg,
    )
    .unwrap();

    let patch_drop = clean.target_ap - patch.target_ap;
    let random_drop = clean.target_ap - random.target_ap;
    let untargeted_ratio = patch.untargeted_ap / clean.untargeted_ap;

    assert!(
        patch_drop >= 0.30,
        "target AP drop {patch_drop:.4} (clean {:.4} -> patch {:.4})",
        clean.target_ap,
        patch.target_ap
    );
    assert!(
        untargeted_ratio >= 0.75,
        "untargeted ratio {untargeted_ratio:.4} (clean {:.4} -> patch {:.4})",
        clean.untargeted_ap,
        patch.untargeted_ap
    );
    assert!(
        patch_drop - random_drop >= 0.10,
        "PATCH drop {patch_drop:.4} vs RANDOM drop {random_drop:.4}"
    );

    // CLEAN fooling stays below 1 - clean AP floor on the test split.
    assert!(clean.target_fooling.unwrap() < 0.1);

    let elapsed = start.elapsed();
    assert_runtime("criterion 5", elapsed, Duration::from_secs(30 * 60));
    println!(
        "[acceptance] C5 PASS: target AP {:.3} -> {:.3} (drop {:.1} pts), untargeted ratio \
         {:.3}, RANDOM drop {:.1} pts ({elapsed:.1?})",
        clean.target_ap,
        patch.target_ap,
        100.0 * patch_drop,
        untargeted_ratio,
        100.0 * random_drop
    );
}

/// Criterion 6: sweep monotonic trends over the shape count and the opacity
/// ceiling; both target and untargeted AP must be non-increasing along each
/// axis.
#[test]
fn criterion_6_sweep_trends() {
    let start = Instant::now();
    let w = world();
    let printable = PrintableColors::default_set();
    let ctx = AttackContext {
        detector: &w.detector,
        manual: ManualParams::default(),
        target_class: 0,
        printable: &printable,
    };
    let opt_cfg = OptimizerConfig {
        epochs: (OptimizerConfig::default().epochs as f64 * 0.4).round() as usize,
        ..Default::default()
    };
    let eval_cfg = EvalConfig::default();

    let n_rows = run_sweep(
        SweepAxis::NShapes,
        &[3.0, 8.0],
        &w.train,
        &w.val,
        &w.test,
        &ctx,
        &opt_cfg,
        &eval_cfg,
    )
    .unwrap();
    assert_eq!(n_rows.len(), 2);
    assert!(
        n_rows[1].target_ap <= n_rows[0].target_ap,
        "target AP rose along n: {:?}",
        n_rows
    );
    assert!(
        n_rows[1].untargeted_ap <= n_rows[0].untargeted_ap,
        "untargeted AP rose along n: {:?}",
        n_rows
    );

    let a_rows = run_sweep(
        SweepAxis::AlphaMax,
        &[0.1, 0.5],
        &w.train,
        &w.val,
        &w.test,
        &ctx,
        &opt_cfg,
        &eval_cfg,
    )
    .unwrap();
    assert_eq!(a_rows.len(), 2);
    assert!(
        a_rows[1].target_ap <= a_rows[0].target_ap,
        "target AP rose along alpha_max: {:?}",
        a_rows
    );
    assert!(
        a_rows[1].untargeted_ap <= a_rows[0].untargeted_ap,
        "untargeted AP rose along alpha_max: {:?}",
        a_rows
    );

    let elapsed = start.elapsed();
    assert_runtime("criterion 6", elapsed, Duration::from_secs(2 * 60 * 60));
    println!(
        "[acceptance] C6 PASS: n sweep target {:.3}->{:.3} untargeted {:.3}->{:.3}; alpha sweep \
         target {:.3}->{:.3} untargeted {:.3}->{:.3} ({elapsed:.1?})",
        n_rows[0].target_ap,
        n_rows[1].target_ap,
        n_rows[0].untargeted_ap,
        n_rows[1].untargeted_ap,
        a_rows[0].target_ap,
        a_rows[1].target_ap,
        a_rows[0].untargeted_ap,
        a_rows[1].untargeted_ap
    );
}

/// Criterion 7: the train command is byte-deterministic for a fixed
/// config + seed.
#[test]
fn criterion_7_cmd_train_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "gen.scenes = 24\n\
         gen.test_scenes = 6\n\
         gen.seed = 21\n\
         gen.dir = data\n\
         data.manifests = data/synth.manifest, data/synthtest.manifest\n\
         detector.epochs = 2\n\
         detector.ap_floor = 0.0\n\
         manual.n_shapes = 4\n\
         optimizer.epochs = 2\n\
         optimizer.batch_size = 8\n\
         out.dir = out\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_lenspatch");
    let run = |args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .expect("spawn");
        assert!(
            out.status.success(),
            "{:?}: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let cfg = cfg_path.to_str().unwrap();
    run(&["--config", cfg, "gen-data"]);
    run(&["--config", cfg, "train-detector"]);

    run(&["--config", cfg, "--out", "out1", "train", "--seed", "7"]);
    run(&["--config", cfg, "--out", "out2", "train", "--seed", "7"]);
    let a = std::fs::read(dir.path().join("out1/patch.toml")).unwrap();
    let b = std::fs::read(dir.path().join("out2/patch.toml")).unwrap();
    assert_eq!(a, b, "patch files differ between identical runs");
    let ha = std::fs::read(dir.path().join("out1/history.csv")).unwrap();
    let hb = std::fs::read(dir.path().join("out2/history.csv")).unwrap();
    assert_eq!(ha, hb, "history files differ between identical runs");
    println!("[acceptance] C7 PASS: cmd_train byte-identical across reruns");
}

/// Criterion 8: fooling-rate fixtures and equivalence with 1 - recall at the
/// 0.4 decode threshold.
#[test]
fn criterion_8_fooling_rate_metric() {
    use lenspatch::bbox::BBox;
    use lenspatch::data::GtBox;
    use lenspatch::detector::Detection;

    let gt = |x: f64, y: f64| GtBox {
        class_id: 0,
        bbox: BBox::new(x, y, x + 8.0, y + 8.0),
    };
    let det = |x: f64, y: f64, conf: f64| Detection {
        bbox: BBox::new(x, y, x + 8.0, y + 8.0),
        class_id: 0,
        confidence: conf,
    };

    let truth = vec![
        vec![gt(0.0, 0.0), gt(20.0, 0.0)],
        vec![gt(0.0, 20.0), gt(20.0, 20.0), gt(40.0, 20.0)],
    ];
    let all = vec![
        vec![det(0.0, 0.0, 0.9), det(20.0, 0.0, 0.8)],
        vec![det(0.0, 20.0, 0.7), det(20.0, 20.0, 0.6), det(40.0, 20.0, 0.5)],
    ];
    assert_eq!(fooling_rate(&all, &truth, &[0], 1, 0.5), Some(0.0));
    let none = vec![Vec::new(), Vec::new()];
    assert_eq!(fooling_rate(&none, &truth, &[0], 1, 0.5), Some(1.0));
    let partial = vec![
        vec![det(0.0, 0.0, 0.9)],
        vec![det(0.0, 20.0, 0.7), det(20.0, 20.0, 0.6)],
    ];
    let rate = fooling_rate(&partial, &truth, &[0], 1, 0.5).unwrap();
    assert!((rate - 0.4).abs() < 1e-12);

    // Randomized consistency with 1 - recall at the 0.4 threshold.
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for _ in 0..100 {
        let n_images = rng.gen_range(1..8);
        let mut truth = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..n_images {
            let n_gt = rng.gen_range(1..5);
            let mut t = Vec::new();
            let mut d = Vec::new();
            for k in 0..n_gt {
                let x = k as f64 * 14.0;
                t.push(gt(x, 0.0));
                if rng.gen_bool(0.6) {
                    // Above-threshold detection close to the object.
                    d.push(det(x + rng.gen_range(-1.5..1.5), 0.0, rng.gen_range(0.41..1.0)));
                }
                if rng.gen_bool(0.3) {
                    // A far-away false positive.
                    d.push(det(x, 30.0, rng.gen_range(0.41..1.0)));
                }
            }
            truth.push(t);
            dets.push(d);
        }
        let rate = fooling_rate(&dets, &truth, &[0], 1, 0.5).unwrap();
        let mut tp = 0usize;
        let mut total = 0usize;
        for (d, t) in dets.iter().zip(&truth) {
            let m = match_detections(d, t, 1, 0.5);
            tp += m.detections.iter().filter(|x| x.tp).count();
            total += t.len();
        }
        let recall = tp as f64 / total as f64;
        assert!(
            (rate - (1.0 - recall)).abs() < 1e-9,
            "fooling {rate} vs 1-recall {}",
            1.0 - recall
        );
    }
    println!("[acceptance] C8 PASS: fooling-rate fixtures exact and consistent with 1-recall");
}
