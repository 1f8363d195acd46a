//! Box representations, overlap measures and non-maximum suppression.
//!
//! All coordinates are normalized to the image size. Conversions never clip;
//! clipping is the caller's job (dataset ingestion, crop transforms).

use serde::{Deserialize, Serialize};

/// Center/size box, the representation predicted by the regression head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box used for overlap arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCxcywh {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// All components in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl BoxXyxy {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_cxcywh(self) -> BoxCxcywh {
        BoxCxcywh {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box enclosing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Intersection with the unit square.
    pub fn clip_unit(&self) -> Self {
        Self {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (C - U) / C` with `C` the enclosing-box area.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.enclosing(b).area();
    if enclosing <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclosing - union) / enclosing
}

pub fn iou_cxcywh(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    iou(&a.to_xyxy(), &b.to_xyxy())
}

/// `rows x cols` IoU table.
pub fn pairwise_iou(a: &[BoxXyxy], b: &[BoxXyxy]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| iou(x, y)).collect())
        .collect()
}

/// Highest IoU of `b` against any box in `others` (0 when empty).
pub fn max_iou(b: &BoxCxcywh, others: &[BoxCxcywh]) -> f64 {
    let bx = b.to_xyxy();
    others
        .iter()
        .map(|o| iou(&bx, &o.to_xyxy()))
        .fold(0.0, f64::max)
}

/// Greedy non-maximum suppression.
///
/// Keeps the best remaining box and drops every box whose IoU with it exceeds
/// `iou_threshold`. Equal scores are visited in index order. Returned indices
/// are in descending score order.
pub fn nms(boxes: &[BoxXyxy], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
