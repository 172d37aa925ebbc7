//! Axis-aligned bounding boxes and overlap math shared by the detector,
//! losses, and evaluation.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates, corners (x_min, y_min)-(x_max, y_max).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    /// Lexicographic ordering on (x_min, y_min, x_max, y_max), used as a
    /// deterministic tie-breaker wherever boxes are sorted.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        let a = [self.x_min, self.y_min, self.x_max, self.y_max];
        let b = [other.x_min, other.y_min, other.x_max, other.y_max];
        for (x, y) in a.iter().zip(b.iter()) {
            match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(ord) => return ord,
            }
        }
        std::cmp::Ordering::Equal
    }
}

/// Intersection over union of two boxes. Zero when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU plus its partial derivatives with respect to the four coordinates of
/// box `a` (box `b` held fixed). Piecewise-smooth; at corner/edge ties the
/// one-sided derivative of the active branch is returned.
pub fn iou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let ix_hi = a.x_max.min(b.x_max);
    let ix_lo = a.x_min.max(b.x_min);
    let iy_hi = a.y_max.min(b.y_max);
    let iy_lo = a.y_min.max(b.y_min);
    let iw = (ix_hi - ix_lo).max(0.0);
    let ih = (iy_hi - iy_lo).max(0.0);
    let inter = iw * ih;
    let area_a = a.area();
    let union = area_a + b.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;

    // d(inter)/d(a coords): only the active min/max side moves the overlap.
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if a.x_min > b.x_min {
            d_inter[0] = -ih;
        }
        if a.y_min > b.y_min {
            d_inter[1] = -iw;
        }
        if a.x_max < b.x_max {
            d_inter[2] = ih;
        }
        if a.y_max < b.y_max {
            d_inter[3] = iw;
        }
    }
    let d_area = [-a.height(), -a.width(), a.height(), a.width()];

    let mut grad = [0.0; 4];
    for i in 0..4 {
        // iou = inter / (area_a + area_b - inter)
        let d_union = d_area[i] - d_inter[i];
        grad[i] = (d_inter[i] * union - inter * d_union) / (union * union);
    }
    (iou, grad)
}
