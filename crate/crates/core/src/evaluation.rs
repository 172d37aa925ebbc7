//! Detection metrics and attack comparisons: greedy matching, PR curves,
//! all-point interpolated average precision, fooling rates, the baseline
//! patches (CLEAN / RANDOM / RED / CYAN), and parameter sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bbox::iou;
use crate::data::{Dataset, GtBox};
use crate::detector::{decode, Detection, DetectorAdapter, GridDetector};
use crate::error::{Error, Result};
use crate::image_io::PatchImage;
use crate::patch::{init_free_params, ManualParams, PatchParams};
use crate::render::{alpha_blend, composite_shapes};

/// Decode threshold used when sweeping a full PR curve.
pub const PR_DECODE_THRESHOLD: f64 = 1e-3;

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetMatch {
    pub tp: bool,
    pub confidence: f64,
    pub class_id: usize,
}

/// Matching of one image's detections against its ground truth.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// One entry per detection, in descending-confidence order.
    pub detections: Vec<DetMatch>,
    /// Unmatched ground-truth count (false negatives) per class.
    pub fn_per_class: Vec<usize>,
}

/// Greedy matching in descending confidence order: a detection is a true
/// positive if its IoU with a still-unmatched same-class ground-truth box
/// reaches the threshold (taking the best-overlapping one); each
/// ground-truth box is matched at most once. Confidence ties are broken
/// lexicographically by box coordinates.
pub fn match_detections(
    dets: &[Detection],
    truth: &[GtBox],
    n_classes: usize,
    iou_thresh: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| dets[a].bbox.lex_cmp(&dets[b].bbox))
            .then(dets[a].class_id.cmp(&dets[b].class_id))
    });
    let mut gt_matched = vec![false; truth.len()];
    let mut detections = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in truth.iter().enumerate() {
            if gt_matched[gi] || gt.class_id != det.class_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        let tp = if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            true
        } else {
            false
        };
        detections.push(DetMatch {
            tp,
            confidence: det.confidence,
            class_id: det.class_id,
        });
    }
    let mut fn_per_class = vec![0usize; n_classes];
    for (gi, gt) in truth.iter().enumerate() {
        if !gt_matched[gi] {
            fn_per_class[gt.class_id] += 1;
        }
    }
    MatchResult {
        detections,
        fn_per_class,
    }
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// All-point interpolated average precision over pooled detections of one
/// class. `dets` pairs each detection's confidence with its TP flag.
///
/// Edge cases: with no ground truth, AP is 1 when there are no detections
/// (nothing to find, nothing false) and 0 otherwise; with ground truth but
/// no detections, AP is 0.
pub fn average_precision(dets: &[(f64, bool)], total_gt: usize) -> (f64, Vec<PrPoint>) {
    if total_gt == 0 {
        return (if dets.is_empty() { 1.0 } else { 0.0 }, Vec::new());
    }
    if dets.is_empty() {
        return (0.0, Vec::new());
    }
    let mut sorted: Vec<(f64, bool)> = dets.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut points = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(_, is_tp) in &sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }

    // Interpolated precision at recall r is the maximum precision at any
    // recall >= r; integrate the envelope over the recall steps.
    let mut envelope = vec![0.0f64; points.len()];
    let mut running = 0.0f64;
    for (k, p) in points.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, p) in points.iter().enumerate() {
        ap += (p.recall - prev_recall) * envelope[k];
        prev_recall = p.recall;
    }
    (ap, points)
}

/// Per-class AP of a detector over a dataset, optionally behind a patch
/// layer shared by every image of equal dimensions.
pub fn dataset_average_precision(
    detector: &GridDetector,
    dataset: &Dataset,
    patch: Option<&BaselinePatch>,
    match_iou: f64,
) -> Result<Vec<f64>> {
    let pooled = pool_matches(detector, dataset, patch, match_iou, PR_DECODE_THRESHOLD, 0.5)?;
    Ok(pooled.per_class_ap(dataset).iter().map(|(ap, _)| *ap).collect())
}

/// Pooled per-class matches over a dataset.
pub struct PooledMatches {
    /// (confidence, tp) per detection, grouped by class.
    pub per_class: Vec<Vec<(f64, bool)>>,
    /// Ground-truth totals per class.
    pub gt_per_class: Vec<usize>,
    /// Per-image detection/match bookkeeping at the decode threshold.
    pub per_image: Vec<MatchResult>,
}

impl PooledMatches {
    pub fn per_class_ap(&self, _dataset: &Dataset) -> Vec<(f64, Vec<PrPoint>)> {
        self.per_class
            .iter()
            .zip(&self.gt_per_class)
            .map(|(dets, &gt)| average_precision(dets, gt))
            .collect()
    }
}

fn render_patch_layers(
    patch: Option<&BaselinePatch>,
    dataset: &Dataset,
) -> Result<HashMap<(usize, usize), PatchImage>> {
    let mut layers = HashMap::new();
    if let Some(p) = patch {
        for rec in &dataset.records {
            let dims = (rec.image.width, rec.image.height);
            if !layers.contains_key(&dims) {
                layers.insert(dims, p.render(dims.0, dims.1)?);
            }
        }
    }
    Ok(layers)
}

/// Run the detector over every scene (optionally patched), decode, and pool
/// class-aware greedy matches.
pub fn pool_matches(
    detector: &GridDetector,
    dataset: &Dataset,
    patch: Option<&BaselinePatch>,
    match_iou: f64,
    decode_threshold: f64,
    nms_iou: f64,
) -> Result<PooledMatches> {
    let n_classes = dataset.class_names.len();
    let layers = render_patch_layers(patch, dataset)?;
    let per_image: Vec<MatchResult> = dataset
        .records
        .par_iter()
        .map(|rec| {
            let grid = match layers.get(&(rec.image.width, rec.image.height)) {
                Some(layer) => {
                    let blended = alpha_blend(&rec.image, layer)?;
                    detector.detect_raw(&blended)?
                }
                None => detector.detect_raw(&rec.image)?,
            };
            let dets = decode(&grid, decode_threshold, nms_iou);
            Ok(match_detections(&dets, &rec.boxes, n_classes, match_iou))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_class = vec![Vec::new(); n_classes];
    let mut gt_per_class = vec![0usize; n_classes];
    for (rec, m) in dataset.records.iter().zip(&per_image) {
        for b in &rec.boxes {
            gt_per_class[b.class_id] += 1;
        }
        for d in &m.detections {
            per_class[d.class_id].push((d.confidence, d.tp));
        }
    }
    Ok(PooledMatches {
        per_class,
        gt_per_class,
        per_image,
    })
}

/// Fraction of ground-truth objects in `class_group` with no matching
/// detection at the decode threshold. `None` when the group has no objects
/// (undefined, distinct from zero).
pub fn fooling_rate(
    dets_per_image: &[Vec<Detection>],
    truth_per_image: &[Vec<GtBox>],
    class_group: &[usize],
    n_classes: usize,
    match_iou: f64,
) -> Option<f64> {
    let mut total = 0usize;
    let mut fooled = 0usize;
    for (dets, truth) in dets_per_image.iter().zip(truth_per_image) {
        let m = match_detections(dets, truth, n_classes, match_iou);
        for &c in class_group {
            fooled += m.fn_per_class[c];
        }
        total += truth
            .iter()
            .filter(|b| class_group.contains(&b.class_id))
            .count();
    }
    if total == 0 {
        None
    } else {
        Some(fooled as f64 / total as f64)
    }
}

/// A patch to evaluate: either a parametric shape set or a full-frame
/// uniform layer (the fully colored baselines).
#[derive(Debug, Clone)]
pub enum BaselinePatch {
    Shapes(PatchParams),
    Uniform { color: [f64; 3], alpha: f64 },
}

impl BaselinePatch {
    pub fn render(&self, width: usize, height: usize) -> Result<PatchImage> {
        match self {
            BaselinePatch::Shapes(params) => composite_shapes(params, width, height),
            BaselinePatch::Uniform { color, alpha } => {
                Ok(PatchImage::uniform(width, height, *color, *alpha))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    Clean,
    Random,
    Red,
    Cyan,
}

/// Build one of the paper's comparison patches: CLEAN is the zero-shape
/// patch, RANDOM draws fresh shape parameters, RED and CYAN are full-frame
/// uniform layers at the manual opacity ceiling.
pub fn make_baseline_patch(kind: BaselineKind, manual: ManualParams, seed: u64) -> BaselinePatch {
    match kind {
        BaselineKind::Clean => BaselinePatch::Shapes(PatchParams::empty(manual)),
        BaselineKind::Random => BaselinePatch::Shapes(init_free_params(manual, seed)),
        BaselineKind::Red => BaselinePatch::Uniform {
            color: [1.0, 0.0, 0.0],
            alpha: manual.alpha_max,
        },
        BaselineKind::Cyan => BaselinePatch::Uniform {
            color: [0.0, 1.0, 1.0],
            alpha: manual.alpha_max,
        },
    }
}

/// Evaluation settings shared by reports and sweeps.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub target_class: usize,
    /// Decode threshold for detection counts and fooling rates.
    pub conf_threshold: f64,
    pub match_iou: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_class: 0,
            conf_threshold: 0.4,
            match_iou: 0.5,
            nms_iou: 0.5,
        }
    }
}

/// Per-class evaluation results.
#[derive(Debug, Clone)]
pub struct ClassEval {
    pub name: String,
    pub ap: f64,
    pub pr: Vec<PrPoint>,
    pub gt_count: usize,
    pub detections_at_threshold: usize,
    pub fooling_rate: Option<f64>,
}

/// Full evaluation of one attack condition over a dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub condition: String,
    pub classes: Vec<ClassEval>,
    pub target_class: usize,
    pub target_ap: f64,
    /// Mean AP over untargeted classes.
    pub untargeted_ap: f64,
    pub target_fooling: Option<f64>,
    pub untargeted_fooling: Option<f64>,
    /// PR curve with detections and ground truth pooled across the
    /// untargeted classes, used for the group plot.
    pub untargeted_pooled_pr: Vec<PrPoint>,
}

/// Evaluate one condition: detector over every (optionally patched) scene,
/// per-class AP/PR, detection counts at the decode threshold, and fooling
/// rates for the target class and the untargeted group.
pub fn evaluate_condition(
    detector: &GridDetector,
    dataset: &Dataset,
    condition: &str,
    patch: Option<&BaselinePatch>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n_classes = dataset.class_names.len();
    if cfg.target_class >= n_classes {
        return Err(Error::InvalidParam {
            field: "target_class",
            message: format!("index {} out of {n_classes} classes", cfg.target_class),
        });
    }
    let pooled = pool_matches(
        detector,
        dataset,
        patch,
        cfg.match_iou,
        PR_DECODE_THRESHOLD,
        cfg.nms_iou,
    )?;

    // Detections and fooling at the operating threshold: reuse the decoded
    // low-threshold set and filter, which commutes with greedy NMS.
    let layers = render_patch_layers(patch, dataset)?;
    let dets_at_threshold: Vec<Vec<Detection>> = dataset
        .records
        .par_iter()
        .map(|rec| {
            let grid = match layers.get(&(rec.image.width, rec.image.height)) {
                Some(layer) => detector.detect_raw(&alpha_blend(&rec.image, layer)?)?,
                None => detector.detect_raw(&rec.image)?,
            };
            Ok(decode(&grid, cfg.conf_threshold, cfg.nms_iou))
        })
        .collect::<Result<Vec<_>>>()?;
    let truth_per_image: Vec<Vec<GtBox>> = dataset
        .records
        .iter()
        .map(|r| r.boxes.clone())
        .collect();

    let aps = pooled.per_class_ap(dataset);
    let untargeted: Vec<usize> = (0..n_classes).filter(|c| *c != cfg.target_class).collect();

    let mut classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let (ap, pr) = aps[c].clone();
        let det_count = dets_at_threshold
            .iter()
            .flat_map(|d| d.iter())
            .filter(|d| d.class_id == c)
            .count();
        let fr = fooling_rate(
            &dets_at_threshold,
            &truth_per_image,
            &[c],
            n_classes,
            cfg.match_iou,
        );
        classes.push(ClassEval {
            name: dataset.class_names[c].clone(),
            ap,
            pr,
            gt_count: pooled.gt_per_class[c],
            detections_at_threshold: det_count,
            fooling_rate: fr,
        });
    }

    let target_ap = classes[cfg.target_class].ap;
    let untargeted_with_gt: Vec<&ClassEval> = untargeted
        .iter()
        .map(|&c| &classes[c])
        .filter(|c| c.gt_count > 0)
        .collect();
    let untargeted_ap = if untargeted_with_gt.is_empty() {
        1.0
    } else {
        untargeted_with_gt.iter().map(|c| c.ap).sum::<f64>() / untargeted_with_gt.len() as f64
    };

    // Pooled untargeted PR curve.
    let mut pooled_dets: Vec<(f64, bool)> = Vec::new();
    let mut pooled_gt = 0usize;
    for &c in &untargeted {
        pooled_dets.extend(&pooled.per_class[c]);
        pooled_gt += pooled.gt_per_class[c];
    }
    let (_, untargeted_pooled_pr) = average_precision(&pooled_dets, pooled_gt);

    let target_fooling = fooling_rate(
        &dets_at_threshold,
        &truth_per_image,
        &[cfg.target_class],
        n_classes,
        cfg.match_iou,
    );
    let untargeted_fooling = fooling_rate(
        &dets_at_threshold,
        &truth_per_image,
        &untargeted,
        n_classes,
        cfg.match_iou,
    );

    Ok(EvalReport {
        condition: condition.to_string(),
        classes,
        target_class: cfg.target_class,
        target_ap,
        untargeted_ap,
        target_fooling,
        untargeted_fooling,
        untargeted_pooled_pr,
    })
}

/// Axis of a manual-parameter sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NShapes,
    AlphaMax,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_shapes" => Ok(SweepAxis::NShapes),
            "alpha_max" => Ok(SweepAxis::AlphaMax),
            other => Err(Error::InvalidParam {
                field: "sweep axis",
                message: format!("expected `n_shapes` or `alpha_max`, got `{other}`"),
            }),
        }
    }
}

/// One sweep row: the manual-parameter value with the held-out APs of the
/// patch optimized under it.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub value: f64,
    pub target_ap: f64,
    pub untargeted_ap: f64,
}

/// Full optimize-then-evaluate run per value of one manual parameter.
/// Rows come back in input order.
pub fn run_sweep(
    axis: SweepAxis,
    values: &[f64],
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    ctx: &crate::optimizer::AttackContext,
    opt_cfg: &crate::optimizer::OptimizerConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("sweep values"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut manual = ctx.manual;
        match axis {
            SweepAxis::NShapes => manual.n_shapes = value.round() as usize,
            SweepAxis::AlphaMax => manual.alpha_max = value,
        }
        let sweep_ctx = crate::optimizer::AttackContext {
            detector: ctx.detector,
            manual,
            target_class: ctx.target_class,
            printable: ctx.printable,
        };
        let (params, _) = crate::optimizer::optimize_patch(train, val, &sweep_ctx, opt_cfg)?;
        let report = evaluate_condition(
            ctx.detector,
            test,
            "PATCH",
            Some(&BaselinePatch::Shapes(params)),
            eval_cfg,
        )?;
        rows.push(SweepRow {
            value,
            target_ap: report.target_ap,
            untargeted_ap: report.untargeted_ap,
        });
    }
    Ok(rows)
}

/// Comma-separated sweep table.
pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let name = match axis {
        SweepAxis::NShapes => "n_shapes",
        SweepAxis::AlphaMax => "alpha_max",
    };
    let mut out = format!("{name},target_ap,untargeted_ap\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.value, r.target_ap, r.untargeted_ap);
    }
    out
}

impl EvalReport {
    /// Structured text serialization: condition header plus per-class rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "condition = {}", self.condition);
        let _ = writeln!(out, "target_class = {}", self.classes[self.target_class].name);
        let _ = writeln!(out, "target_ap = {:.6}", self.target_ap);
        let _ = writeln!(out, "untargeted_ap = {:.6}", self.untargeted_ap);
        let _ = writeln!(out, "target_fooling = {}", fmt_rate(self.target_fooling));
        let _ = writeln!(
            out,
            "untargeted_fooling = {}",
            fmt_rate(self.untargeted_fooling)
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "class {} ap={:.6} gt={} detections={} fooling={}",
                c.name,
                c.ap,
                c.gt_count,
                c.detections_at_threshold,
                fmt_rate(c.fooling_rate)
            );
        }
        out
    }

    /// Two-column `recall,precision` table for one class.
    pub fn pr_csv(&self, class_id: usize) -> String {
        let mut out = String::from("recall,precision\n");
        for p in &self.classes[class_id].pr {
            let _ = writeln!(out, "{:.9},{:.9}", p.recall, p.precision);
        }
        out
    }
}

fn fmt_rate(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "n/a".to_string(),
    }
}
