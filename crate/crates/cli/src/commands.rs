//! Command implementations tying the pipeline together.

use std::path::Path;

use lenspatch::data::{
    generate_synthetic, load_manifest, self_label, split_dataset, synthetic_class_names,
    write_dataset, Dataset, SyntheticConfig,
};
use lenspatch::detector::{train_toy_detector, DetectorArch, DetectorTrainConfig, GridDetector};
use lenspatch::error::{Error, Result};
use lenspatch::evaluation::{
    evaluate_condition, make_baseline_patch, run_sweep, sweep_table, BaselineKind, BaselinePatch,
    EvalConfig, EvalReport, SweepAxis,
};
use lenspatch::losses::PrintableColors;
use lenspatch::optimizer::{
    grid_search_table, grid_search_weights, optimize_patch, AttackContext,
};
use lenspatch::patch::PatchParams;
use lenspatch::render::composite_shapes;

use crate::config::RunConfig;
use crate::plot::{condition_color, plot_pr_curves, Curve};

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn source_tag(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Merge every configured manifest into one dataset; each manifest's source
/// tag is its file stem.
fn load_full_dataset(cfg: &RunConfig, class_names: &[String]) -> Result<Dataset> {
    if cfg.data_manifests.is_empty() {
        return Err(Error::EmptyInput("data.manifests"));
    }
    let mut merged: Option<Dataset> = None;
    for path in &cfg.data_manifests {
        let manifest = load_manifest(path, class_names, &source_tag(path))?;
        let part = manifest.load_images()?;
        merged = Some(match merged {
            None => part,
            Some(mut all) => {
                all.records.extend(part.records);
                all
            }
        });
    }
    Ok(merged.expect("at least one manifest"))
}

fn load_detector(cfg: &RunConfig) -> Result<GridDetector> {
    GridDetector::load(&cfg.detector_checkpoint)
}

fn load_printable(cfg: &RunConfig) -> Result<PrintableColors> {
    match &cfg.nps_colors {
        Some(path) => PrintableColors::load(path),
        None => Ok(PrintableColors::default_set()),
    }
}

fn target_class_id(detector: &GridDetector, cfg: &RunConfig) -> Result<usize> {
    detector
        .arch
        .class_names
        .iter()
        .position(|c| *c == cfg.eval_target_class)
        .ok_or_else(|| Error::InvalidParam {
            field: "eval.target_class",
            message: format!(
                "class `{}` not among detector classes {:?}",
                cfg.eval_target_class, detector.arch.class_names
            ),
        })
}

fn eval_config(detector: &GridDetector, cfg: &RunConfig) -> Result<EvalConfig> {
    Ok(EvalConfig {
        target_class: target_class_id(detector, cfg)?,
        conf_threshold: cfg.eval_conf_threshold,
        match_iou: cfg.eval_match_iou,
        nms_iou: cfg.eval_nms_iou,
    })
}

/// Generate the synthetic pool and the held-out test set, writing PNGs plus
/// one manifest per source tag.
pub fn cmd_gen_data(cfg: &RunConfig, seed_override: Option<u64>) -> Result<()> {
    let seed = seed_override.unwrap_or(cfg.gen_seed);
    let pool = generate_synthetic(&SyntheticConfig {
        scenes: cfg.gen_scenes,
        width: cfg.gen_width,
        height: cfg.gen_height,
        seed,
        source: cfg.gen_source.clone(),
        min_objects: 1,
        max_objects: 4,
    });
    let test = generate_synthetic(&SyntheticConfig {
        scenes: cfg.gen_test_scenes,
        width: cfg.gen_width,
        height: cfg.gen_height,
        seed: seed.wrapping_add(1),
        source: format!("{}test", cfg.gen_source),
        min_objects: 1,
        max_objects: 4,
    });
    let pool_manifest = write_dataset(&pool, &cfg.gen_dir, &cfg.gen_source)?;
    let test_manifest = write_dataset(&test, &cfg.gen_dir, &format!("{}test", cfg.gen_source))?;
    println!(
        "generated {} pool scenes -> {}",
        pool.len(),
        pool_manifest.display()
    );
    println!(
        "generated {} test scenes -> {}",
        test.len(),
        test_manifest.display()
    );
    Ok(())
}

/// Train the toy detector on the train split and checkpoint it.
pub fn cmd_train_detector(cfg: &RunConfig, seed_override: Option<u64>) -> Result<()> {
    let class_names = synthetic_class_names();
    let data = load_full_dataset(cfg, &class_names)?;
    let (train, val, test) = split_dataset(&data, &cfg.split_spec())?;
    let holdout = if test.is_empty() { &val } else { &test };
    let arch = DetectorArch::new(cfg.gen_width, cfg.gen_height, class_names);
    let train_cfg = DetectorTrainConfig {
        epochs: cfg.detector_epochs,
        batch_size: cfg.detector_batch_size,
        lr: cfg.detector_lr,
        seed: seed_override.unwrap_or(cfg.detector_seed),
        lambda_box: cfg.detector_lambda_box,
        lambda_noobj: cfg.detector_lambda_noobj,
        ap_floor: cfg.detector_ap_floor,
    };
    let detector = train_toy_detector(&train, holdout, arch, &train_cfg)?;
    if let Some(parent) = cfg.detector_checkpoint.parent() {
        ensure_out_dir(parent)?;
    }
    detector.save(&cfg.detector_checkpoint)?;
    let aps =
        lenspatch::evaluation::dataset_average_precision(&detector, holdout, None, cfg.eval_match_iou)?;
    println!("detector saved -> {}", cfg.detector_checkpoint.display());
    for (name, ap) in detector.arch.class_names.iter().zip(&aps) {
        println!("clean AP {name}: {ap:.4}");
    }
    Ok(())
}

/// Annotate a manifest's images with the detector's own decoded detections.
pub fn cmd_self_label(cfg: &RunConfig, manifest: &Path, out_manifest: &Path) -> Result<()> {
    let detector = load_detector(cfg)?;
    let parsed = load_manifest(
        manifest,
        &detector.arch.class_names.to_vec(),
        &source_tag(manifest),
    )?;
    let dataset = parsed.load_images()?;
    let labeled = self_label(&dataset, &detector, cfg.eval_conf_threshold)?;
    let dir = out_manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    ensure_out_dir(dir)?;
    let written = write_dataset(&labeled, dir, &source_tag(out_manifest))?;
    let added: usize = labeled
        .records
        .iter()
        .zip(&dataset.records)
        .map(|(l, o)| l.boxes.len() - o.boxes.len())
        .sum();
    println!("self-labeled {} boxes -> {}", added, written.display());
    Ok(())
}

/// Optimize a patch and write the saved-patch document plus the per-epoch
/// history table.
pub fn cmd_train(cfg: &RunConfig, seed_override: Option<u64>) -> Result<()> {
    let detector = load_detector(cfg)?;
    let data = load_full_dataset(cfg, &detector.arch.class_names.to_vec())?;
    let (train, val, _test) = split_dataset(&data, &cfg.split_spec())?;
    let printable = load_printable(cfg)?;
    let ctx = AttackContext {
        detector: &detector,
        manual: cfg.manual_params(),
        target_class: target_class_id(&detector, cfg)?,
        printable: &printable,
    };
    let mut opt_cfg = cfg.optimizer_config()?;
    if let Some(seed) = seed_override {
        opt_cfg.seed = seed;
    }
    let (params, history) = optimize_patch(&train, &val, &ctx, &opt_cfg)?;

    ensure_out_dir(&cfg.out_dir)?;
    let patch_path = cfg.out_dir.join("patch.toml");
    params.save(&patch_path)?;
    write_text(&cfg.out_dir.join("history.csv"), &history.to_csv())?;

    if let Some(last) = history.epochs.last() {
        println!(
            "final losses: total {:.4} (target {:.4}, iou {:.4}, untargeted {:.4}, nps {:.4})",
            last.train.total,
            last.train.target_conf,
            last.train.iou,
            last.train.untargeted_conf,
            last.train.nps
        );
    }
    let best = history
        .epochs
        .iter()
        .map(|e| (e.val_target_ap, e.val_untargeted_ap))
        .fold((f64::INFINITY, 0.0), |acc, v| if v.0 < acc.0 { v } else { acc });
    println!(
        "clean val APs: target {:.4}, untargeted {:.4}",
        history.clean_val_target_ap, history.clean_val_untargeted_ap
    );
    println!("best val APs: target {:.4}, untargeted {:.4}", best.0, best.1);
    println!("patch -> {}", patch_path.display());
    Ok(())
}

fn condition_patch(
    name: &str,
    optimized: Option<&PatchParams>,
    cfg: &RunConfig,
) -> Result<Option<BaselinePatch>> {
    let manual = optimized.map(|p| p.manual).unwrap_or_else(|| cfg.manual_params());
    match name {
        "CLEAN" => Ok(None),
        "PATCH" => {
            let params = optimized.ok_or_else(|| Error::Invalid(
                "condition PATCH requires --patch".into(),
            ))?;
            Ok(Some(BaselinePatch::Shapes(params.clone())))
        }
        "RANDOM" => Ok(Some(make_baseline_patch(
            BaselineKind::Random,
            manual,
            cfg.eval_random_seed,
        ))),
        "RED" => Ok(Some(make_baseline_patch(BaselineKind::Red, manual, 0))),
        "CYAN" => Ok(Some(make_baseline_patch(BaselineKind::Cyan, manual, 0))),
        other => Err(Error::InvalidParam {
            field: "conditions",
            message: format!(
                "unknown condition `{other}` (expected CLEAN, PATCH, RANDOM, RED, CYAN)"
            ),
        }),
    }
}

/// Evaluate a saved patch against the requested conditions on the held-out
/// test split, writing one report per condition, PR tables per class, and
/// the combined PR plots.
pub fn cmd_eval(
    cfg: &RunConfig,
    patch_path: Option<&Path>,
    conditions_override: Option<Vec<String>>,
) -> Result<()> {
    let detector = load_detector(cfg)?;
    let data = load_full_dataset(cfg, &detector.arch.class_names.to_vec())?;
    let (_train, _val, test) = split_dataset(&data, &cfg.split_spec())?;
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let optimized = match patch_path {
        Some(p) => Some(PatchParams::load(p)?),
        None => None,
    };
    let eval_cfg = eval_config(&detector, cfg)?;
    let conditions = conditions_override.unwrap_or_else(|| cfg.eval_conditions.clone());

    ensure_out_dir(&cfg.out_dir)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for name in &conditions {
        let patch = condition_patch(name, optimized.as_ref(), cfg)?;
        let report = evaluate_condition(&detector, &test, name, patch.as_ref(), &eval_cfg)?;
        write_text(
            &cfg.out_dir.join(format!("eval_{name}.txt")),
            &report.to_text(),
        )?;
        for (class_id, class) in report.classes.iter().enumerate() {
            write_text(
                &cfg.out_dir
                    .join(format!("pr_{}_{}.csv", name, class.name)),
                &report.pr_csv(class_id),
            )?;
        }
        println!(
            "{name}: target AP {:.4}, untargeted AP {:.4}",
            report.target_ap, report.untargeted_ap
        );
        reports.push(report);
    }

    // Combined plots per class group.
    let target_curves: Vec<Curve> = reports
        .iter()
        .map(|r| Curve {
            label: r.condition.clone(),
            color: condition_color(&r.condition),
            points: &r.classes[r.target_class].pr,
        })
        .collect();
    plot_pr_curves(
        &cfg.out_dir.join("pr_target.png"),
        "TARGET CLASS",
        &target_curves,
    )?;
    let untargeted_curves: Vec<Curve> = reports
        .iter()
        .map(|r| Curve {
            label: r.condition.clone(),
            color: condition_color(&r.condition),
            points: &r.untargeted_pooled_pr,
        })
        .collect();
    plot_pr_curves(
        &cfg.out_dir.join("pr_untargeted.png"),
        "UNTARGETED CLASSES",
        &untargeted_curves,
    )?;
    println!("reports and plots -> {}", cfg.out_dir.display());
    Ok(())
}

/// Sweep one manual parameter: a full optimize-then-evaluate run per value.
pub fn cmd_sweep(
    cfg: &RunConfig,
    axis_override: Option<String>,
    values_override: Option<Vec<f64>>,
) -> Result<()> {
    let detector = load_detector(cfg)?;
    let data = load_full_dataset(cfg, &detector.arch.class_names.to_vec())?;
    let (train, val, test) = split_dataset(&data, &cfg.split_spec())?;
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let printable = load_printable(cfg)?;
    let ctx = AttackContext {
        detector: &detector,
        manual: cfg.manual_params(),
        target_class: target_class_id(&detector, cfg)?,
        printable: &printable,
    };
    let axis: SweepAxis = axis_override
        .as_deref()
        .unwrap_or(&cfg.sweep_axis)
        .parse()?;
    let values = values_override.unwrap_or_else(|| cfg.sweep_values.clone());
    let mut opt_cfg = cfg.optimizer_config()?;
    opt_cfg.epochs =
        ((opt_cfg.epochs as f64 * cfg.sweep_epoch_fraction).round() as usize).max(1);
    let eval_cfg = eval_config(&detector, cfg)?;
    let rows = run_sweep(axis, &values, &train, &val, &test, &ctx, &opt_cfg, &eval_cfg)?;
    let table = sweep_table(axis, &rows);
    print!("{table}");
    ensure_out_dir(&cfg.out_dir)?;
    let name = match axis {
        SweepAxis::NShapes => "sweep_n_shapes.csv",
        SweepAxis::AlphaMax => "sweep_alpha_max.csv",
    };
    write_text(&cfg.out_dir.join(name), &table)?;
    Ok(())
}

/// Grid search over loss-weight tuples with shortened runs.
pub fn cmd_grid_search(cfg: &RunConfig) -> Result<()> {
    let detector = load_detector(cfg)?;
    let data = load_full_dataset(cfg, &detector.arch.class_names.to_vec())?;
    let (train, val, _test) = split_dataset(&data, &cfg.split_spec())?;
    let printable = load_printable(cfg)?;
    let ctx = AttackContext {
        detector: &detector,
        manual: cfg.manual_params(),
        target_class: target_class_id(&detector, cfg)?,
        printable: &printable,
    };
    let opt_cfg = cfg.optimizer_config()?;
    let (best, rows) = grid_search_weights(
        &cfg.grid_tuples,
        &train,
        &val,
        &ctx,
        &opt_cfg,
        cfg.grid_epoch_fraction,
    )?;
    let table = grid_search_table(&rows);
    print!("{table}");
    let w = best.as_array();
    println!("selected weights: {},{},{},{}", w[0], w[1], w[2], w[3]);
    ensure_out_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("grid_search.csv"), &table)?;
    Ok(())
}

/// Render a saved patch to an RGBA raster for inspection.
pub fn cmd_render(
    cfg: &RunConfig,
    patch_path: &Path,
    width: Option<usize>,
    height: Option<usize>,
) -> Result<()> {
    let params = PatchParams::load(patch_path)?;
    let w = width.unwrap_or(cfg.gen_width);
    let h = height.unwrap_or(cfg.gen_height);
    let layer = composite_shapes(&params, w, h)?;
    ensure_out_dir(&cfg.out_dir)?;
    let out = cfg.out_dir.join("patch_preview.png");
    layer.save_png(&out)?;
    println!("rendered {w}x{h} preview -> {}", out.display());
    Ok(())
}

/// Export a print-ready raster: shapes re-evaluated analytically per pixel
/// at the target dpi, plus the canonical parameter descriptor alongside.
pub fn cmd_export(
    cfg: &RunConfig,
    patch_path: &Path,
    dpi: Option<f64>,
    width_in: Option<f64>,
    height_in: Option<f64>,
) -> Result<()> {
    let params = PatchParams::load(patch_path)?;
    let dpi = dpi.unwrap_or(cfg.export_dpi);
    let width_in = width_in.unwrap_or(cfg.export_width_in);
    let height_in = height_in.unwrap_or(cfg.export_height_in);
    if dpi <= 0.0 || width_in <= 0.0 || height_in <= 0.0 {
        return Err(Error::InvalidParam {
            field: "export",
            message: "dpi and physical size must be positive".into(),
        });
    }
    let w = (dpi * width_in).round() as usize;
    let h = (dpi * height_in).round() as usize;
    let raster = composite_shapes(&params, w, h)?;
    ensure_out_dir(&cfg.out_dir)?;
    let png = cfg.out_dir.join("patch_print.png");
    raster.save_png(&png)?;
    let descriptor = cfg.out_dir.join("patch_print.toml");
    params.save(&descriptor)?;
    println!(
        "exported {w}x{h} raster at {dpi} dpi ({width_in}x{height_in} in) -> {}",
        png.display()
    );
    println!("descriptor -> {}", descriptor.display());
    Ok(())
}
