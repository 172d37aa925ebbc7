//! End-to-end tests of the command-line surface: config handling, exit
//! codes, and the export/render artifact contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lenspatch")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn lenspatch")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Minimal config over a tiny generated dataset.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("run.cfg");
    write(
        &cfg,
        "gen.scenes = 10\n\
         gen.test_scenes = 4\n\
         gen.seed = 21\n\
         gen.dir = data\n\
         data.manifests = data/synth.manifest, data/synthtest.manifest\n\
         detector.epochs = 1\n\
         detector.ap_floor = 0.0\n\
         manual.n_shapes = 2\n\
         optimizer.epochs = 1\n\
         optimizer.batch_size = 4\n\
         out.dir = out\n",
    );
    cfg
}

fn prepare_data_and_detector(dir: &Path, cfg: &Path) {
    let out = run(&["--config", cfg.to_str().unwrap(), "gen-data"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["--config", cfg.to_str().unwrap(), "train-detector"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_flag_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "optimizer.epochs = 3\noptimzer.seed = 4\n");
    let out = run(&["--config", cfg.to_str().unwrap(), "train"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("optimzer.seed"), "stderr: {err}");
}

#[test]
fn missing_detector_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["--config", cfg.to_str().unwrap(), "gen-data"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["--config", cfg.to_str().unwrap(), "train"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("detector.ckpt"), "stderr: {err}");
}

#[test]
fn unknown_eval_condition_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    prepare_data_and_detector(dir.path(), &cfg);
    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "eval",
            "--conditions",
            "CLEAN,PLAID",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PLAID"));
}

#[test]
fn train_produces_artifacts_and_eval_consumes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    prepare_data_and_detector(dir.path(), &cfg);

    let out = run(&["--config", cfg.to_str().unwrap(), "train"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let patch = dir.path().join("out/patch.toml");
    let history = dir.path().join("out/history.csv");
    assert!(patch.exists());
    assert!(history.exists());
    let head = std::fs::read_to_string(&history).unwrap();
    assert!(head.starts_with(
        "epoch,target_conf,iou,untargeted_conf,nps,total,val_target_ap,val_untargeted_ap"
    ));

    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "eval",
            "--patch",
            patch.to_str().unwrap(),
            "--conditions",
            "CLEAN,PATCH",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/eval_CLEAN.txt").exists());
    assert!(dir.path().join("out/eval_PATCH.txt").exists());
    assert!(dir.path().join("out/pr_CLEAN_octagon.csv").exists());
    assert!(dir.path().join("out/pr_target.png").exists());
    assert!(dir.path().join("out/pr_untargeted.png").exists());

    // CLEAN-only evaluation writes only the CLEAN report.
    let solo = dir.path().join("solo");
    std::fs::create_dir_all(&solo).unwrap();
    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            solo.to_str().unwrap(),
            "eval",
            "--conditions",
            "CLEAN",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(solo.join("eval_CLEAN.txt").exists());
    assert!(!solo.join("eval_PATCH.txt").exists());
}

#[test]
fn export_dimensions_and_descriptor_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    // Hand-written patch document.
    let patch_toml = "\
[manual]
alpha_max = 0.4
s = 0.9
beta = 2.5
r_min = 0.03
r_max = 0.25
n_shapes = 1

[[shapes]]
center_x = 0.25
center_y = -0.5
radius = 0.2
shear_x = 0.1
shear_y = -0.3
color = [0.9, 0.2, 0.1]
";
    let patch_path = dir.path().join("patch.toml");
    write(&patch_path, patch_toml);

    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "export",
            "--patch",
            patch_path.to_str().unwrap(),
            "--dpi",
            "300",
            "--width-in",
            "0.6",
            "--height-in",
            "0.33",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // 300 dpi * 0.6 in x 300 dpi * 0.33 in = 180 x 99 pixels.
    let png = image::open(dir.path().join("out/patch_print.png")).unwrap();
    assert_eq!((png.width(), png.height()), (180, 99));

    // Descriptor re-imports to identical parameters.
    let original = lenspatch::patch::PatchParams::from_toml(patch_toml).unwrap();
    let reexported =
        lenspatch::patch::PatchParams::load(&dir.path().join("out/patch_print.toml")).unwrap();
    assert_eq!(original, reexported);

    // Exported alpha never exceeds alpha_max (within 8-bit quantization).
    let rgba = png.to_rgba8();
    let max_alpha = rgba.pixels().map(|p| p.0[3]).max().unwrap();
    assert!(max_alpha as f64 / 255.0 <= 0.4 + 0.5 / 255.0);
}

#[test]
fn render_writes_preview_at_requested_dims() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let patch_path = dir.path().join("patch.toml");
    let params = lenspatch::patch::init_free_params(
        lenspatch::patch::ManualParams {
            n_shapes: 3,
            ..Default::default()
        },
        5,
    );
    params.save(&patch_path).unwrap();
    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "render",
            "--patch",
            patch_path.to_str().unwrap(),
            "--width",
            "48",
            "--height",
            "32",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let png = image::open(dir.path().join("out/patch_preview.png")).unwrap();
    assert_eq!((png.width(), png.height()), (48, 32));
}

#[test]
fn self_label_adds_boxes_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    prepare_data_and_detector(dir.path(), &cfg);
    let manifest = dir.path().join("data/synthtest.manifest");
    let once = dir.path().join("labeled/once.manifest");
    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "self-label",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out-manifest",
            once.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let twice = dir.path().join("labeled2/twice.manifest");
    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "self-label",
            "--manifest",
            once.to_str().unwrap(),
            "--out-manifest",
            twice.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Second pass adds nothing: same boxes per record.
    let first = std::fs::read_to_string(&once).unwrap();
    let second = std::fs::read_to_string(&twice).unwrap();
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| l.split_once(';').map(|(_, rest)| rest.to_string()).unwrap_or_default())
            .collect()
    };
    assert_eq!(strip(&first), strip(&second));
}
