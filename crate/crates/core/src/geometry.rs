//! Axis-aligned boxes in pixel coordinates, the standard centre/size delta
//! parameterisation, IoU and greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest log-scale delta accepted when decoding; keeps `exp` finite.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Corner-form box. A valid box has `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Validation(format!(
                "box ({x1}, {y1}, {x2}, {y2}) needs x1 < x2 and y1 < y2"
            )))
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clamps every coordinate into `[0, width] x [0, height]`; may degenerate.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Deltas `(dx, dy, dw, dh)` taking `reference` onto `target`.
pub fn encode(reference: &BBox, target: &BBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        (tx - rx) / rw,
        (ty - ry) / rh,
        (target.width() / rw).ln(),
        (target.height() / rh).ln(),
    ]
}

/// Inverse of [`encode`]. Not clipped; log-scales are capped at [`MAX_LOG_SCALE`].
pub fn decode(reference: &BBox, delta: [f64; 4]) -> BBox {
    let (cx, cy) = reference.center();
    let (w, h) = (reference.width(), reference.height());
    let ncx = cx + delta[0] * w;
    let ncy = cy + delta[1] * h;
    let nw = w * delta[2].min(MAX_LOG_SCALE).exp();
    let nh = h * delta[3].min(MAX_LOG_SCALE).exp();
    BBox {
        x1: ncx - 0.5 * nw,
        y1: ncy - 0.5 * nh,
        x2: ncx + 0.5 * nw,
        y2: ncy + 0.5 * nh,
    }
}

/// Indices sorted by descending score; ties keep input order.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy NMS. Returns kept indices in descending score order; every kept pair
/// has IoU strictly below `threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: one score per box");
    let order = order_by_score(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) < threshold) {
            keep.push(i);
        }
    }
    keep
}
