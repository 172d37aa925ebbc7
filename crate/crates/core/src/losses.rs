//! The four attack loss components and their weighted combination.
//!
//! Components are aggregated as the maximum over the detector's candidate
//! boxes per image; suppressing the strongest candidate is what keeps a
//! detection from surpassing the decode threshold. Gradients with respect
//! to grid quantities are accumulated into a [`GridGrad`] so the detector
//! can pull them back to pixels.

use std::path::Path;

use crate::bbox::iou_with_grad;
use crate::data::GtBox;
use crate::detector::{DetectionGrid, GridGrad};
use crate::error::{Error, Result};
use crate::patch::PatchParams;

/// Weights of the four loss components; they must sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub target_conf: f64,
    pub iou: f64,
    pub untargeted_conf: f64,
    pub nps: f64,
}

impl LossWeights {
    pub fn new(target_conf: f64, iou: f64, untargeted_conf: f64, nps: f64) -> Result<Self> {
        let w = Self {
            target_conf,
            iou,
            untargeted_conf,
            nps,
        };
        w.validate()?;
        Ok(w)
    }

    /// The weight setting reported as optimal by the grid search.
    pub fn paper_defaults() -> Self {
        Self {
            target_conf: 0.74,
            iou: 0.15,
            untargeted_conf: 0.1,
            nps: 0.01,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.target_conf, self.iou, self.untargeted_conf, self.nps]
    }

    pub fn validate(&self) -> Result<()> {
        let arr = self.as_array();
        if arr.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParam {
                field: "weights",
                message: format!("weights must be non-negative, got {arr:?}"),
            });
        }
        let sum: f64 = arr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam {
                field: "weights",
                message: format!("weights must sum to 1, got {sum}"),
            });
        }
        Ok(())
    }

    /// Normalize a raw tuple to sum one.
    pub fn normalized(raw: [f64; 4]) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::InvalidParam {
                field: "weights",
                message: format!("cannot normalize weights {raw:?}"),
            });
        }
        Self::new(raw[0] / sum, raw[1] / sum, raw[2] / sum, raw[3] / sum)
    }
}

/// Values of the four components and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub target_conf: f64,
    pub iou: f64,
    pub untargeted_conf: f64,
    pub nps: f64,
    pub total: f64,
}

/// Combine component values into the weighted total.
pub fn total_loss(
    target_conf: f64,
    iou: f64,
    untargeted_conf: f64,
    nps: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        target_conf,
        iou,
        untargeted_conf,
        nps,
        total: weights.target_conf * target_conf
            + weights.iou * iou
            + weights.untargeted_conf * untargeted_conf
            + weights.nps * nps,
    })
}

/// Maximum candidate confidence product for the target class.
pub fn target_conf_loss(grid: &DetectionGrid, target_class: usize) -> f64 {
    target_conf_inner(grid, target_class, None)
}

fn target_conf_inner(
    grid: &DetectionGrid,
    target_class: usize,
    grad: Option<(&mut GridGrad, f64)>,
) -> f64 {
    let mut best = 0.0;
    let mut best_k = None;
    for (k, cand) in grid.candidates.iter().enumerate() {
        let conf = cand.confidence(target_class);
        if conf > best {
            best = conf;
            best_k = Some(k);
        }
    }
    if let (Some((g, weight)), Some(k)) = (grad, best_k) {
        let cand = &grid.candidates[k];
        g.d_objectness[k] += weight * cand.class_scores[target_class];
        g.d_class_scores[k * grid.num_classes() + target_class] += weight * cand.objectness;
    }
    best
}

/// For each ground-truth target box, the maximum IoU against candidates
/// whose target-class confidence product exceeds the relevance floor; mean
/// over the image's target boxes, zero when it has none.
pub fn iou_loss(
    grid: &DetectionGrid,
    truth: &[GtBox],
    target_class: usize,
    relevance_floor: f64,
) -> f64 {
    iou_loss_inner(grid, truth, target_class, relevance_floor, None)
}

fn iou_loss_inner(
    grid: &DetectionGrid,
    truth: &[GtBox],
    target_class: usize,
    relevance_floor: f64,
    mut grad: Option<(&mut GridGrad, f64)>,
) -> f64 {
    let gt_boxes: Vec<&GtBox> = truth
        .iter()
        .filter(|b| b.class_id == target_class)
        .collect();
    if gt_boxes.is_empty() {
        return 0.0;
    }
    let relevant: Vec<usize> = grid
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.confidence(target_class) > relevance_floor)
        .map(|(k, _)| k)
        .collect();
    let scale = 1.0 / gt_boxes.len() as f64;
    let mut sum = 0.0;
    for gt in &gt_boxes {
        let mut best = 0.0;
        let mut best_k = None;
        for &k in &relevant {
            let v = crate::bbox::iou(&grid.candidates[k].bbox, &gt.bbox);
            if v > best {
                best = v;
                best_k = Some(k);
            }
        }
        sum += best;
        if let (Some((g, weight)), Some(k)) = (grad.as_mut(), best_k) {
            let (_, d_box) = iou_with_grad(&grid.candidates[k].bbox, &gt.bbox);
            for i in 0..4 {
                g.d_bbox[k][i] += *weight * scale * d_box[i];
            }
        }
    }
    sum * scale
}

/// Confidence per class: maximum candidate product, used on both the clean
/// and the patched grid.
pub fn class_confidence(grid: &DetectionGrid, class_id: usize) -> f64 {
    grid.max_confidence(class_id)
}

/// Clean-side confidences of the untargeted classes present in the image's
/// ground truth; precompute these once per image since the clean pass does
/// not depend on the patch.
pub fn clean_untargeted_confs(
    clean_grid: &DetectionGrid,
    truth: &[GtBox],
    target_class: usize,
) -> Vec<(usize, f64)> {
    let mut classes: Vec<usize> = truth
        .iter()
        .map(|b| b.class_id)
        .filter(|c| *c != target_class)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| (c, class_confidence(clean_grid, c)))
        .collect()
}

/// Mean absolute confidence change of the untargeted classes present in the
/// clean image; zero when the image contains only the target class.
pub fn untargeted_conf_loss(
    clean_grid: &DetectionGrid,
    patched_grid: &DetectionGrid,
    truth: &[GtBox],
    target_class: usize,
) -> f64 {
    let cached = clean_untargeted_confs(clean_grid, truth, target_class);
    untargeted_conf_inner(&cached, patched_grid, None)
}

fn untargeted_conf_inner(
    clean_confs: &[(usize, f64)],
    patched: &DetectionGrid,
    mut grad: Option<(&mut GridGrad, f64)>,
) -> f64 {
    if clean_confs.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / clean_confs.len() as f64;
    let mut sum = 0.0;
    for &(class_id, clean_conf) in clean_confs {
        let mut best = 0.0;
        let mut best_k = None;
        for (k, cand) in patched.candidates.iter().enumerate() {
            let conf = cand.confidence(class_id);
            if conf > best {
                best = conf;
                best_k = Some(k);
            }
        }
        sum += (clean_conf - best).abs();
        if let (Some((g, weight)), Some(k)) = (grad.as_mut(), best_k) {
            // d|clean - patched| / d(patched) = sign(patched - clean)
            let sign = (best - clean_conf).signum();
            if sign != 0.0 {
                let cand = &patched.candidates[k];
                let w = *weight * scale * sign;
                g.d_objectness[k] += w * cand.class_scores[class_id];
                g.d_class_scores[k * patched.num_classes() + class_id] += w * cand.objectness;
            }
        }
    }
    sum * scale
}

/// A set of printer-reproducible RGB colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintableColors {
    pub colors: Vec<[f64; 3]>,
}

impl PrintableColors {
    /// Parse the "r g b" per-line format; `#` comments allowed.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut colors = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = trimmed
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: origin.to_path_buf(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            if vals.len() != 3 || vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected three channel values in [0,1], got `{trimmed}`"),
                });
            }
            colors.push([vals[0], vals[1], vals[2]]);
        }
        if colors.is_empty() {
            return Err(Error::EmptyInput("printable color set"));
        }
        Ok(Self { colors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    /// The bundled 30-color fixture.
    pub fn default_set() -> Self {
        Self::parse(
            include_str!("../fixtures/printable_colors.txt"),
            Path::new("<builtin>"),
        )
        .expect("bundled color set parses")
    }
}

/// Non-printability score: sum over shape colors of the Euclidean distance
/// to the nearest printable color.
pub fn nps_loss(params: &PatchParams, printable: &PrintableColors) -> Result<f64> {
    if printable.colors.is_empty() {
        return Err(Error::EmptyInput("printable color set"));
    }
    Ok(nps_inner(params, printable, None))
}

fn nps_inner(
    params: &PatchParams,
    printable: &PrintableColors,
    mut grad: Option<&mut [[f64; 3]]>,
) -> f64 {
    let mut sum = 0.0;
    for (k, shape) in params.shapes.iter().enumerate() {
        let mut best_dist = f64::INFINITY;
        let mut best_color = [0.0; 3];
        for p in &printable.colors {
            let d2: f64 = shape
                .color
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = d2.sqrt();
            if d < best_dist {
                best_dist = d;
                best_color = *p;
            }
        }
        sum += best_dist;
        if let Some(g) = grad.as_mut() {
            if best_dist > 1e-12 {
                for c in 0..3 {
                    g[k][c] += (shape.color[c] - best_color[c]) / best_dist;
                }
            }
        }
    }
    sum
}

/// Configuration of the combined attack loss.
#[derive(Debug, Clone, Copy)]
pub struct AttackLossConfig {
    pub target_class: usize,
    pub weights: LossWeights,
    /// Candidates below this target-class confidence product are excluded
    /// from the IoU maximum.
    pub relevance_floor: f64,
}

/// Evaluate the full weighted loss for one image and accumulate gradients:
/// grid-side into a [`GridGrad`], color-side (from the printability term)
/// into per-shape RGB gradients.
pub fn attack_loss_with_grad(
    patched: &DetectionGrid,
    clean_confs: &[(usize, f64)],
    truth: &[GtBox],
    params: &PatchParams,
    printable: &PrintableColors,
    cfg: &AttackLossConfig,
) -> (LossBreakdown, GridGrad, Vec<[f64; 3]>) {
    let mut grid_grad = GridGrad::zeros(patched.candidates.len(), patched.num_classes());
    let mut color_grad = vec![[0.0; 3]; params.shapes.len()];
    let w = cfg.weights;

    let target_conf =
        target_conf_inner(patched, cfg.target_class, Some((&mut grid_grad, w.target_conf)));
    let iou = iou_loss_inner(
        patched,
        truth,
        cfg.target_class,
        cfg.relevance_floor,
        Some((&mut grid_grad, w.iou)),
    );
    let untargeted = untargeted_conf_inner(
        clean_confs,
        patched,
        Some((&mut grid_grad, w.untargeted_conf)),
    );
    let nps = if w.nps > 0.0 || !params.shapes.is_empty() {
        let mut scaled = vec![[0.0; 3]; params.shapes.len()];
        let v = nps_inner(params, printable, Some(&mut scaled));
        for (dst, src) in color_grad.iter_mut().zip(&scaled) {
            for c in 0..3 {
                dst[c] += w.nps * src[c];
            }
        }
        v
    } else {
        0.0
    };

    let breakdown = total_loss(target_conf, iou, untargeted, nps, &w).expect("weights validated");
    (breakdown, grid_grad, color_grad)
}
