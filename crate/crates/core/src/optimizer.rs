//! End-to-end patch optimization: render the patch over each training scene,
//! differentiate the weighted attack loss through the detector back to the
//! shape parameters, update with adaptive moment estimates, and project onto
//! the feasible box after every step. Also hosts the loss-weight grid search.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::detector::nn::Adam;
use crate::detector::{DetectorAdapter, DifferentiableDetector, GridDetector};
use crate::error::{Error, Result};
use crate::evaluation::dataset_average_precision;
use crate::losses::{
    attack_loss_with_grad, clean_untargeted_confs, AttackLossConfig, LossBreakdown, LossWeights,
    PrintableColors,
};
use crate::patch::{
    init_free_params, project_free_params, ManualParams, PatchParams, PARAMS_PER_SHAPE,
};
use crate::render::{render_and_apply_cached, render_backward};

/// Optimization hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Learning rate for centers, shears, and colors.
    pub lr_main: f64,
    /// Learning rate for the radius group.
    pub lr_radius: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Decode threshold used for validation metrics.
    pub conf_threshold: f64,
    /// Relevance floor of the IoU loss.
    pub relevance_floor: f64,
    /// Model selection keeps epochs whose validation untargeted AP is at
    /// least this fraction of the clean value.
    pub untargeted_floor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_main: 5e-3,
            lr_radius: 8e-4,
            epochs: 30,
            batch_size: 16,
            seed: 7,
            weights: LossWeights::paper_defaults(),
            conf_threshold: 0.4,
            relevance_floor: 0.1,
            untargeted_floor: 0.8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_main <= 0.0 || self.lr_radius <= 0.0 {
            return Err(Error::InvalidParam {
                field: "learning rates",
                message: "must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam {
                field: "batch_size",
                message: "must be at least 1".into(),
            });
        }
        self.weights.validate()
    }
}

/// Loss means and validation metrics recorded after each epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_target_ap: f64,
    pub val_untargeted_ap: f64,
}

/// One record per completed epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    /// Clean validation APs the floor is measured against.
    pub clean_val_target_ap: f64,
    pub clean_val_untargeted_ap: f64,
}

impl TrainingHistory {
    /// Comma-separated export: epoch, each loss component, total, val APs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,target_conf,iou,untargeted_conf,nps,total,val_target_ap,val_untargeted_ap\n",
        );
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.train.target_conf,
                e.train.iou,
                e.train.untargeted_conf,
                e.train.nps,
                e.train.total,
                e.val_target_ap,
                e.val_untargeted_ap
            );
        }
        out
    }
}

/// Everything the attack needs besides the datasets: the white-box detector,
/// the frozen manual parameters, the target class, and the printable set.
pub struct AttackContext<'a> {
    pub detector: &'a GridDetector,
    pub manual: ManualParams,
    pub target_class: usize,
    pub printable: &'a PrintableColors,
}

/// Per-image quantities that do not depend on the patch.
struct CleanSideCache {
    /// (untargeted class, clean max confidence) pairs per image.
    confs: Vec<Vec<(usize, f64)>>,
}

fn precompute_clean_side(ctx: &AttackContext, data: &Dataset) -> Result<CleanSideCache> {
    let confs = data
        .records
        .par_iter()
        .map(|rec| {
            let grid = ctx.detector.detect_raw(&rec.image)?;
            Ok(clean_untargeted_confs(&grid, &rec.boxes, ctx.target_class))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CleanSideCache { confs })
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut acc = LossBreakdown::default();
    for b in items {
        acc.target_conf += b.target_conf;
        acc.iou += b.iou;
        acc.untargeted_conf += b.untargeted_conf;
        acc.nps += b.nps;
        acc.total += b.total;
    }
    acc.target_conf /= n;
    acc.iou /= n;
    acc.untargeted_conf /= n;
    acc.nps /= n;
    acc.total /= n;
    acc
}

fn val_aps(ctx: &AttackContext, val: &Dataset, params: Option<&PatchParams>) -> Result<(f64, f64)> {
    use crate::evaluation::BaselinePatch;
    let patch = params.map(|p| BaselinePatch::Shapes(p.clone()));
    let aps = dataset_average_precision(ctx.detector, val, patch.as_ref(), 0.5)?;
    let target = aps[ctx.target_class];
    let untargeted: Vec<f64> = aps
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != ctx.target_class && val.count_class(*c) > 0)
        .map(|(_, ap)| *ap)
        .collect();
    let untargeted_mean = if untargeted.is_empty() {
        1.0
    } else {
        untargeted.iter().sum::<f64>() / untargeted.len() as f64
    };
    Ok((target, untargeted_mean))
}

/// Optimize the free parameters against the training split.
///
/// Batches pair a cached clean pass with a patched forward/backward pass on
/// the same images. Only the shape parameters move; they are projected onto
/// their bounds after every update. Returns the parameters of the best
/// validation epoch — lowest target-class AP subject to the untargeted AP
/// floor (the most-preserving epoch when nothing meets the floor) — plus the
/// per-epoch history. Deterministic per seed.
pub fn optimize_patch(
    train: &Dataset,
    val: &Dataset,
    ctx: &AttackContext,
    cfg: &OptimizerConfig,
) -> Result<(PatchParams, TrainingHistory)> {
    cfg.validate()?;
    crate::patch::validate_manual(ctx.manual)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut params = init_free_params(ctx.manual, cfg.seed);
    let mut history = TrainingHistory::default();
    if cfg.epochs == 0 {
        return Ok((params, history));
    }

    let clean_side = precompute_clean_side(ctx, train)?;
    let (clean_val_target, clean_val_untargeted) = val_aps(ctx, val, None)?;
    history.clean_val_target_ap = clean_val_target;
    history.clean_val_untargeted_ap = clean_val_untargeted;
    let floor = cfg.untargeted_floor * clean_val_untargeted;

    let loss_cfg = AttackLossConfig {
        target_class: ctx.target_class,
        weights: cfg.weights,
        relevance_floor: cfg.relevance_floor,
    };

    let n_params = params.shapes.len() * PARAMS_PER_SHAPE;
    let mut adam = Adam::new(n_params);
    let lr = |idx: usize| {
        if idx % PARAMS_PER_SHAPE == 2 {
            cfg.lr_radius
        } else {
            cfg.lr_main
        }
    };

    let mut best: Option<(PatchParams, f64, f64)> = None;
    let mut order: Vec<usize> = (0..train.records.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x517C_C1B7));
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(LossBreakdown, Vec<f64>)> = batch
                .par_iter()
                .map(|&idx| {
                    let rec = &train.records[idx];
                    let (patched, render_cache) = render_and_apply_cached(&params, &rec.image)?;
                    let (grid, det_cache) = ctx.detector.forward_cached(&patched)?;
                    let (breakdown, grid_grad, color_grad) = attack_loss_with_grad(
                        &grid,
                        &clean_side.confs[idx],
                        &rec.boxes,
                        &params,
                        ctx.printable,
                        &loss_cfg,
                    );
                    let d_image = ctx.detector.backward_to_input(&det_cache, &grid_grad);
                    let shape_grads = render_backward(&params, &rec.image, &render_cache, &d_image);
                    let mut flat = vec![0.0; n_params];
                    for (k, g) in shape_grads.iter().enumerate() {
                        let base = k * PARAMS_PER_SHAPE;
                        for (o, v) in g.to_flat().into_iter().enumerate() {
                            flat[base + o] = v;
                        }
                        for c in 0..3 {
                            flat[base + 5 + c] += color_grad[k][c];
                        }
                    }
                    Ok((breakdown, flat))
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; n_params];
            for (breakdown, flat) in &results {
                if !breakdown.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_losses.push(*breakdown);
                for (dst, g) in grad.iter_mut().zip(flat) {
                    *dst += g * scale;
                }
            }

            let mut flat_params = params.to_flat();
            adam.step(&mut flat_params, &grad, &lr);
            params.set_from_flat(&flat_params);
            params = project_free_params(params);
        }

        let (val_target_ap, val_untargeted_ap) = val_aps(ctx, val, Some(&params))?;
        history.epochs.push(EpochStats {
            epoch,
            train: mean_breakdown(&epoch_losses),
            val_target_ap,
            val_untargeted_ap,
        });

        let candidate = (params.clone(), val_target_ap, val_untargeted_ap);
        best = Some(match best.take() {
            None => candidate,
            Some(current) => select_better(current, candidate, floor),
        });
    }

    let (best_params, ..) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}

/// Pick the better of two (params, target AP, untargeted AP) candidates:
/// prefer those meeting the untargeted floor, then the lower target AP;
/// when neither meets the floor, the higher untargeted AP. Earlier epochs
/// win ties.
fn select_better(
    current: (PatchParams, f64, f64),
    candidate: (PatchParams, f64, f64),
    floor: f64,
) -> (PatchParams, f64, f64) {
    let cur_ok = current.2 >= floor;
    let cand_ok = candidate.2 >= floor;
    match (cur_ok, cand_ok) {
        (true, false) => current,
        (false, true) => candidate,
        (true, true) => {
            if candidate.1 < current.1 {
                candidate
            } else {
                current
            }
        }
        (false, false) => {
            if candidate.2 > current.2 {
                candidate
            } else {
                current
            }
        }
    }
}

/// One grid-search entry: the candidate weights and the validation metrics
/// of its shortened run.
#[derive(Debug, Clone)]
pub struct GridSearchRow {
    pub weights: LossWeights,
    pub val_target_ap: f64,
    pub val_untargeted_ap: f64,
    pub meets_floor: bool,
}

/// Format the grid-search summary as a comma-separated table.
pub fn grid_search_table(rows: &[GridSearchRow]) -> String {
    let mut out =
        String::from("w_target_conf,w_iou,w_untargeted,w_nps,val_target_ap,val_untargeted_ap,meets_floor\n");
    for r in rows {
        let w = r.weights.as_array();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            w[0], w[1], w[2], w[3], r.val_target_ap, r.val_untargeted_ap, r.meets_floor
        );
    }
    out
}

/// The default candidate tuples: the reported optimum plus variants with
/// the target-confidence and IoU weights zeroed.
pub fn default_weight_grid() -> Vec<[f64; 4]> {
    vec![
        [0.74, 0.15, 0.10, 0.01],
        [0.00, 0.89, 0.10, 0.01],
        [0.89, 0.00, 0.10, 0.01],
        [0.45, 0.44, 0.10, 0.01],
    ]
}

/// Run a shortened optimization per weight tuple and select the tuple
/// minimizing validation target-class AP subject to the untargeted floor.
/// Tuples are normalized to sum one before use.
pub fn grid_search_weights(
    tuples: &[[f64; 4]],
    train: &Dataset,
    val: &Dataset,
    ctx: &AttackContext,
    base_cfg: &OptimizerConfig,
    epoch_fraction: f64,
) -> Result<(LossWeights, Vec<GridSearchRow>)> {
    if tuples.is_empty() {
        return Err(Error::EmptyInput("weight grid"));
    }
    let short_epochs = ((base_cfg.epochs as f64 * epoch_fraction).round() as usize).max(1);
    let (_, clean_untargeted) = val_aps(ctx, val, None)?;
    let floor = base_cfg.untargeted_floor * clean_untargeted;

    let mut rows = Vec::with_capacity(tuples.len());
    for tuple in tuples {
        let weights = LossWeights::normalized(*tuple)?;
        let cfg = OptimizerConfig {
            weights,
            epochs: short_epochs,
            ..base_cfg.clone()
        };
        let (params, _) = optimize_patch(train, val, ctx, &cfg)?;
        let (val_target_ap, val_untargeted_ap) = val_aps(ctx, val, Some(&params))?;
        rows.push(GridSearchRow {
            weights,
            val_target_ap,
            val_untargeted_ap,
            meets_floor: val_untargeted_ap >= floor,
        });
    }

    let best = rows
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            // Feasible rows first, then lowest target AP; among infeasible
            // rows the highest untargeted AP.
            match (a.meets_floor, b.meets_floor) {
                (true, false) => std::cmp::Ordering::Less,
                (false, true) => std::cmp::Ordering::Greater,
                (true, true) => a
                    .val_target_ap
                    .partial_cmp(&b.val_target_ap)
                    .unwrap_or(std::cmp::Ordering::Equal),
                (false, false) => b
                    .val_untargeted_ap
                    .partial_cmp(&a.val_untargeted_ap)
                    .unwrap_or(std::cmp::Ordering::Equal),
            }
        })
        .map(|(i, _)| i)
        .expect("non-empty grid");
    Ok((rows[best].weights, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, synthetic_class_names, SyntheticConfig};
    use crate::detector::{train_toy_detector, DetectorArch, DetectorTrainConfig};

    fn tiny_world() -> (Dataset, Dataset, GridDetector) {
        let data = generate_synthetic(&SyntheticConfig {
            scenes: 24,
            seed: 40,
            ..Default::default()
        });
        let val = generate_synthetic(&SyntheticConfig {
            scenes: 8,
            seed: 41,
            ..Default::default()
        });
        let arch = DetectorArch::new(64, 64, synthetic_class_names());
        let cfg = DetectorTrainConfig {
            epochs: 3,
            ap_floor: 0.0,
            ..Default::default()
        };
        let det = train_toy_detector(&data, &val, arch, &cfg).unwrap();
        (data, val, det)
    }

    #[test]
    fn zero_epochs_returns_init_unchanged() {
        let (train, val, det) = tiny_world();
        let printable = PrintableColors::default_set();
        let ctx = AttackContext {
            detector: &det,
            manual: ManualParams {
                n_shapes: 2,
                ..Default::default()
            },
            target_class: 0,
            printable: &printable,
        };
        let cfg = OptimizerConfig {
            epochs: 0,
            ..Default::default()
        };
        let (params, history) = optimize_patch(&train, &val, &ctx, &cfg).unwrap();
        assert_eq!(params, init_free_params(ctx.manual, cfg.seed));
        assert!(history.epochs.is_empty());
    }

    #[test]
    fn optimization_is_deterministic() {
        let (train, val, det) = tiny_world();
        let printable = PrintableColors::default_set();
        let ctx = AttackContext {
            detector: &det,
            manual: ManualParams {
                n_shapes: 2,
                ..Default::default()
            },
            target_class: 0,
            printable: &printable,
        };
        let cfg = OptimizerConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let (p1, h1) = optimize_patch(&train, &val, &ctx, &cfg).unwrap();
        let (p2, h2) = optimize_patch(&train, &val, &ctx, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(h1.epochs.len(), 2);
        assert!(h1.epochs.iter().all(|e| e.train.total.is_finite()));
    }

    #[test]
    fn params_stay_in_bounds_after_training() {
        let (train, val, det) = tiny_world();
        let printable = PrintableColors::default_set();
        let ctx = AttackContext {
            detector: &det,
            manual: ManualParams {
                n_shapes: 3,
                ..Default::default()
            },
            target_class: 0,
            printable: &printable,
        };
        let cfg = OptimizerConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let (params, _) = optimize_patch(&train, &val, &ctx, &cfg).unwrap();
        assert!(crate::patch::params_in_bounds(&params));
    }

    #[test]
    fn nps_only_weights_with_printable_init_keep_colors_fixed() {
        let (train, val, det) = tiny_world();
        let manual = ManualParams {
            n_shapes: 2,
            ..Default::default()
        };
        let seed = 7;
        let init = init_free_params(manual, seed);
        // Printable set containing exactly the initial colors puts the
        // printability term at its minimum: zero gradient everywhere.
        let printable = PrintableColors {
            colors: init.shapes.iter().map(|s| s.color).collect(),
        };
        let ctx = AttackContext {
            detector: &det,
            manual,
            target_class: 0,
            printable: &printable,
        };
        let cfg = OptimizerConfig {
            epochs: 2,
            batch_size: 8,
            seed,
            weights: LossWeights::new(0.0, 0.0, 0.0, 1.0).unwrap(),
            ..Default::default()
        };
        let (params, history) = optimize_patch(&train, &val, &ctx, &cfg).unwrap();
        assert_eq!(params, init, "zero-gradient run must not move parameters");
        assert!(history
            .epochs
            .iter()
            .all(|e| e.train.nps == 0.0 && e.train.total == 0.0));
    }

    #[test]
    fn grid_search_single_tuple_returns_it() {
        let (train, val, det) = tiny_world();
        let printable = PrintableColors::default_set();
        let ctx = AttackContext {
            detector: &det,
            manual: ManualParams {
                n_shapes: 2,
                ..Default::default()
            },
            target_class: 0,
            printable: &printable,
        };
        let cfg = OptimizerConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let (best, rows) =
            grid_search_weights(&[[0.74, 0.15, 0.10, 0.01]], &train, &val, &ctx, &cfg, 0.5)
                .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(best, LossWeights::paper_defaults());
    }

    #[test]
    fn grid_search_rejects_empty_grid() {
        let (train, val, det) = tiny_world();
        let printable = PrintableColors::default_set();
        let ctx = AttackContext {
            detector: &det,
            manual: ManualParams::default(),
            target_class: 0,
            printable: &printable,
        };
        let cfg = OptimizerConfig::default();
        assert!(matches!(
            grid_search_weights(&[], &train, &val, &ctx, &cfg, 0.2),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn default_grid_contains_paper_point_and_zeroed_tuples() {
        let grid = default_weight_grid();
        assert!(grid.contains(&[0.74, 0.15, 0.10, 0.01]));
        assert!(grid.iter().any(|t| t[0] == 0.0));
        assert!(grid.iter().any(|t| t[1] == 0.0));
        for t in &grid {
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_search_prefers_floor_meeting_tuple() {
        let rows = vec![
            GridSearchRow {
                weights: LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap(),
                val_target_ap: 0.05,
                val_untargeted_ap: 0.2,
                meets_floor: false,
            },
            GridSearchRow {
                weights: LossWeights::paper_defaults(),
                val_target_ap: 0.5,
                val_untargeted_ap: 0.9,
                meets_floor: true,
            },
        ];
        // Selection mirrors grid_search_weights' comparator.
        let best = rows
            .iter()
            .min_by(|a, b| match (a.meets_floor, b.meets_floor) {
                (true, false) => std::cmp::Ordering::Less,
                (false, true) => std::cmp::Ordering::Greater,
                _ => a.val_target_ap.partial_cmp(&b.val_target_ap).unwrap(),
            })
            .unwrap();
        assert_eq!(best.weights, LossWeights::paper_defaults());
    }
}
