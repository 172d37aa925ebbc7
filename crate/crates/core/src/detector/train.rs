//! Training loop for the toy grid detector on labeled synthetic scenes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::nn::{bce_grad, bce_with_logit, sigmoid, Adam, FeatMap};
use super::{DetectorArch, GridDetector, CH_CLS, CH_OBJ, CH_TH, CH_TW, CH_TX, CH_TY};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::dataset_average_precision;

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the box regression terms at assigned cells.
    pub lambda_box: f64,
    /// Weight of the objectness term at unassigned cells.
    pub lambda_noobj: f64,
    /// Required clean per-class AP on the held-out split.
    pub ap_floor: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 16,
            lr: 1e-3,
            seed: 5,
            lambda_box: 2.0,
            lambda_noobj: 0.3,
            ap_floor: 0.9,
        }
    }
}

/// Per-cell assignment targets for one image.
struct CellTargets {
    /// (cell index, fx, fy, tw, th, class_id)
    positives: Vec<(usize, f64, f64, f64, f64, usize)>,
}

fn build_targets(arch: &DetectorArch, boxes: &[crate::data::GtBox]) -> CellTargets {
    let (gw, gh) = (arch.grid_w(), arch.grid_h());
    let stride_x = arch.input_width as f64 / gw as f64;
    let stride_y = arch.input_height as f64 / gh as f64;
    let mut taken = vec![false; gw * gh];
    let mut positives = Vec::new();
    for b in boxes {
        let cx = (b.bbox.x_min + b.bbox.x_max) / 2.0;
        let cy = (b.bbox.y_min + b.bbox.y_max) / 2.0;
        let gx = ((cx / stride_x) as usize).min(gw - 1);
        let gy = ((cy / stride_y) as usize).min(gh - 1);
        let cell = gy * gw + gx;
        if taken[cell] {
            continue; // first box wins a contested cell
        }
        taken[cell] = true;
        let fx = cx / stride_x - gx as f64;
        let fy = cy / stride_y - gy as f64;
        let tw = (b.bbox.width() / arch.anchor_w).ln();
        let th = (b.bbox.height() / arch.anchor_h).ln();
        positives.push((cell, fx, fy, tw, th, b.class_id));
    }
    CellTargets { positives }
}

/// Detection training loss on the raw head output and its gradient.
fn loss_and_grad(
    arch: &DetectorArch,
    raw: &FeatMap,
    targets: &CellTargets,
    cfg: &DetectorTrainConfig,
) -> (f64, FeatMap) {
    let (gw, gh) = (arch.grid_w(), arch.grid_h());
    let n_classes = arch.num_classes();
    let mut d_raw = FeatMap::zeros(raw.c, raw.h, raw.w);
    let mut loss = 0.0;

    let mut is_positive = vec![false; gw * gh];
    for &(cell, ..) in &targets.positives {
        is_positive[cell] = true;
    }

    for cell in 0..gw * gh {
        let (gy, gx) = (cell / gw, cell % gw);
        let t_obj = raw.get(CH_OBJ, gy, gx);
        if !is_positive[cell] {
            loss += cfg.lambda_noobj * bce_with_logit(t_obj, 0.0);
            d_raw.set(CH_OBJ, gy, gx, cfg.lambda_noobj * bce_grad(t_obj, 0.0));
        }
    }

    for &(cell, fx, fy, tw_t, th_t, class_id) in &targets.positives {
        let (gy, gx) = (cell / gw, cell % gw);

        let t_obj = raw.get(CH_OBJ, gy, gx);
        loss += bce_with_logit(t_obj, 1.0);
        d_raw.set(CH_OBJ, gy, gx, bce_grad(t_obj, 1.0));

        for c in 0..n_classes {
            let target = if c == class_id { 1.0 } else { 0.0 };
            let t_cls = raw.get(CH_CLS + c, gy, gx);
            loss += bce_with_logit(t_cls, target);
            d_raw.set(CH_CLS + c, gy, gx, bce_grad(t_cls, target));
        }

        // Box terms: squared error on the sigmoided center fraction and on
        // the log-size logits directly.
        for (ch, frac) in [(CH_TX, fx), (CH_TY, fy)] {
            let t = raw.get(ch, gy, gx);
            let s = sigmoid(t);
            loss += cfg.lambda_box * (s - frac) * (s - frac);
            d_raw.set(ch, gy, gx, cfg.lambda_box * 2.0 * (s - frac) * s * (1.0 - s));
        }
        for (ch, target) in [(CH_TW, tw_t), (CH_TH, th_t)] {
            let t = raw.get(ch, gy, gx);
            loss += cfg.lambda_box * (t - target) * (t - target);
            d_raw.set(ch, gy, gx, cfg.lambda_box * 2.0 * (t - target));
        }
    }
    (loss, d_raw)
}

/// Train a grid detector on labeled scenes. Deterministic per seed; errors
/// if any class's clean AP on the held-out split stays below the floor.
pub fn train_toy_detector(
    train: &Dataset,
    holdout: &Dataset,
    arch: DetectorArch,
    cfg: &DetectorTrainConfig,
) -> Result<GridDetector> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if arch.num_classes() < 2 {
        return Err(Error::InvalidParam {
            field: "class_names",
            message: "need at least 2 classes".into(),
        });
    }
    let mut detector = GridDetector::new(arch, cfg.seed)?;
    let targets: Vec<CellTargets> = train
        .records
        .iter()
        .map(|r| build_targets(&detector.arch, &r.boxes))
        .collect();

    let mut params = detector.flat_params();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train.records.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Forward/backward per image in parallel, then reduce gradients
            // in batch order for a deterministic sum.
            let results: Vec<(f64, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&idx| {
                    let rec = &train.records[idx];
                    let cache = detector.forward_raw(&rec.image).expect("dims checked");
                    let (loss, d_raw) =
                        loss_and_grad(&detector.arch, &cache.raw, &targets[idx], cfg);
                    let mut grads = detector.grad_buffers();
                    detector.backward_raw(&cache, &d_raw, Some(&mut grads));
                    (loss, grads)
                })
                .collect();

            let scale = 1.0 / batch.len() as f64;
            let mut flat_grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (loss, grads) in &results {
                batch_loss += loss;
                let mut off = 0;
                for layer in grads {
                    for (dst, g) in flat_grad[off..off + layer.len()].iter_mut().zip(layer) {
                        *dst += g * scale;
                    }
                    off += layer.len();
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.step(&mut params, &flat_grad, &|_| cfg.lr);
            detector.set_flat_params(&params);
        }
    }

    // Clean AP floor on the held-out split.
    if !holdout.is_empty() {
        let aps = dataset_average_precision(&detector, holdout, None, 0.5)?;
        for (class_id, ap) in aps.iter().enumerate() {
            if *ap < cfg.ap_floor {
                return Err(Error::ApFloor {
                    floor: cfg.ap_floor,
                    detail: format!(
                        "class `{}` reached AP {:.4} (all: {:?})",
                        detector.arch.class_names[class_id], ap, aps
                    ),
                });
            }
        }
    }
    Ok(detector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, synthetic_class_names, SyntheticConfig};

    fn small_data(scenes: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            scenes,
            seed,
            ..Default::default()
        })
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let empty = Dataset {
            class_names: synthetic_class_names(),
            records: Vec::new(),
        };
        let arch = DetectorArch::new(64, 64, synthetic_class_names());
        let cfg = DetectorTrainConfig::default();
        assert!(matches!(
            train_toy_detector(&empty, &empty, arch, &cfg),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data(12, 3);
        let holdout = Dataset {
            class_names: data.class_names.clone(),
            records: Vec::new(),
        };
        let arch = DetectorArch::new(64, 64, synthetic_class_names());
        let cfg = DetectorTrainConfig {
            epochs: 2,
            ap_floor: 0.0,
            ..Default::default()
        };
        let a = train_toy_detector(&data, &holdout, arch.clone(), &cfg).unwrap();
        let b = train_toy_detector(&data, &holdout, arch, &cfg).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let data = small_data(2, 8);
        let arch = DetectorArch::new(64, 64, synthetic_class_names());
        let det = GridDetector::new(arch, 4).unwrap();
        let cfg = DetectorTrainConfig::default();
        let rec = &data.records[0];
        let targets = build_targets(&det.arch, &rec.boxes);

        let cache = det.forward_raw(&rec.image).unwrap();
        let (_, d_raw) = loss_and_grad(&det.arch, &cache.raw, &targets, &cfg);

        let h = 1e-6;
        for idx in (0..cache.raw.data.len()).step_by(13) {
            let mut hi = cache.raw.clone();
            let mut lo = cache.raw.clone();
            hi.data[idx] += h;
            lo.data[idx] -= h;
            let (lh, _) = loss_and_grad(&det.arch, &hi, &targets, &cfg);
            let (ll, _) = loss_and_grad(&det.arch, &lo, &targets, &cfg);
            let fd = (lh - ll) / (2.0 * h);
            assert!(
                (fd - d_raw.data[idx]).abs() < 1e-5,
                "raw {idx}: analytic {} vs fd {fd}",
                d_raw.data[idx]
            );
        }
    }
}
