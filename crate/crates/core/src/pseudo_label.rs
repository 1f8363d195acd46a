//! Multi-view self-labeling of unknown objects.
//!
//! Each training image is seen twice: as-is and through a random crop-resize.
//! Objectness-head predictions from one view become unknown-class pseudo
//! targets for the other view ("swapped" supervision), and selective-search
//! proposals that avoid both annotations and objectness pseudo boxes are
//! added to both views with a known correspondence.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::detector::Prediction;
use crate::error::{Error, Result};
use crate::geometry::{max_iou, nms, BoxCxcywh, BoxXyxy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    Annotated,
    PseudoBinary,
    PseudoSs,
}

/// A ground-truth or pseudo ground-truth object.
///
/// Labels are 1-based: known classes take `1..=n` and unknown objects `n + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub label: usize,
    pub bbox: BoxCxcywh,
    pub source: TargetSource,
}

impl Target {
    pub fn annotated(label: usize, bbox: BoxCxcywh) -> Self {
        Self {
            label,
            bbox,
            source: TargetSource::Annotated,
        }
    }

    /// Zero-based class-head slot.
    pub fn slot(&self) -> usize {
        self.label - 1
    }

    pub fn is_pseudo(&self) -> bool {
        self.source != TargetSource::Annotated
    }
}

/// Crop window `(x0, y0, w, h)` of the original image, in normalized
/// coordinates, that was resized to become the augmented view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

/// Minimum fraction of a box's area that must stay inside the destination
/// view for the box to survive a transform.
pub const MIN_RETENTION: f64 = 0.25;

impl CropTransform {
    pub fn new(x0: f64, y0: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::NonInvertibleTransform { sx: w, sy: h });
        }
        Ok(Self { x0, y0, w, h })
    }

    pub fn identity() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            w: 1.0,
            h: 1.0,
        }
    }

    fn ensure_invertible(&self) -> Result<()> {
        Self::new(self.x0, self.y0, self.w, self.h).map(|_| ())
    }

    /// Maps an original-image box into the augmented view without clipping.
    pub fn apply_raw(&self, b: &BoxCxcywh) -> BoxCxcywh {
        BoxCxcywh::new(
            (b.cx - self.x0) / self.w,
            (b.cy - self.y0) / self.h,
            b.w / self.w,
            b.h / self.h,
        )
    }

    /// Maps a box into the augmented view, clipped to the view. `None` when
    /// less than [`MIN_RETENTION`] of its area remains.
    pub fn apply(&self, b: &BoxCxcywh) -> Option<BoxCxcywh> {
        clip_box(&self.apply_raw(b))
    }

    /// Maps an augmented-view box back into the original image.
    pub fn invert(&self, b: &BoxCxcywh) -> BoxCxcywh {
        BoxCxcywh::new(
            self.x0 + b.cx * self.w,
            self.y0 + b.cy * self.h,
            b.w * self.w,
            b.h * self.h,
        )
    }
}

/// Clips to the unit square, dropping boxes that keep less than
/// [`MIN_RETENTION`] of their area.
pub fn clip_with_retention(b: &BoxXyxy) -> Option<BoxCxcywh> {
    let area = b.area();
    if area <= 0.0 {
        return None;
    }
    let clipped = b.clip_unit();
    if clipped.area() / area < MIN_RETENTION {
        return None;
    }
    Some(clipped.to_cxcywh())
}

/// Like [`clip_with_retention`], returning boxes already inside the image
/// unchanged.
pub fn clip_box(b: &BoxCxcywh) -> Option<BoxCxcywh> {
    let xy = b.to_xyxy();
    if xy.x1 >= 0.0 && xy.y1 >= 0.0 && xy.x2 <= 1.0 && xy.y2 <= 1.0 && b.area() > 0.0 {
        Some(*b)
    } else {
        clip_with_retention(&xy)
    }
}

/// An image, its augmented view and the map between them.
#[derive(Clone, Debug)]
pub struct ViewPair<I> {
    pub image: I,
    pub augmented: I,
    pub transform: CropTransform,
    /// `(index in image annotations, index in augmented annotations)`.
    pub annotation_pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Objectness confidence threshold.
    pub delta: f64,
    /// Maximum objectness pseudo targets per view.
    pub k: usize,
    /// Maximum selective-search pseudo targets per image.
    pub k_ss: usize,
    pub nms_iou: f64,
    /// A pseudo box overlaps a reference box when their IoU exceeds this.
    pub overlap_iou: f64,
    /// Selective-search proposals larger than this fraction of the image are
    /// skipped.
    pub ss_max_area: f64,
    /// Selective-search proposals with a side shorter than this fraction of
    /// the image are skipped.
    pub ss_min_side: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            k: 5,
            k_ss: 5,
            nms_iou: 0.5,
            overlap_iou: 0.05,
            ss_max_area: 0.5,
            ss_min_side: 0.1,
        }
    }
}

fn overlaps(b: &BoxCxcywh, refs: &[BoxCxcywh], thr: f64) -> bool {
    max_iou(b, refs) > thr
}

fn pseudo(label: usize, bbox: BoxCxcywh, source: TargetSource) -> Target {
    Target { label, bbox, source }
}

/// Objectness pseudo proposals: NMS, then score > delta, then no overlap with
/// known boxes, then the top `k` by score. Labeled `unknown_label`.
pub fn select_binary_pseudo(
    preds: &[Prediction],
    known_gt: &[BoxCxcywh],
    cfg: &PseudoLabelConfig,
    unknown_label: usize,
) -> Vec<Target> {
    if cfg.k == 0 || preds.is_empty() {
        return Vec::new();
    }
    let boxes: Vec<BoxXyxy> = preds.iter().map(|p| p.bbox.to_xyxy()).collect();
    let scores: Vec<f64> = preds.iter().map(|p| sigmoid(p.binary_logit)).collect();
    nms(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .filter(|&i| scores[i] > cfg.delta)
        .filter_map(|i| clip_box(&preds[i].bbox))
        .filter(|b| !overlaps(b, known_gt, cfg.overlap_iou))
        .take(cfg.k)
        .map(|b| pseudo(unknown_label, b, TargetSource::PseudoBinary))
        .collect()
}

/// Selective-search proposals that overlap neither known boxes nor objectness
/// pseudo boxes, in ranking order, truncated to `k_ss`.
pub fn supplement_selective_search(
    proposals: &[BoxCxcywh],
    known_gt: &[BoxCxcywh],
    binary_pseudo: &[BoxCxcywh],
    cfg: &PseudoLabelConfig,
    k_ss: usize,
    unknown_label: usize,
) -> Vec<Target> {
    proposals
        .iter()
        .filter(|b| b.area() <= cfg.ss_max_area && b.w.min(b.h) >= cfg.ss_min_side)
        .filter(|b| !overlaps(b, known_gt, cfg.overlap_iou))
        .filter(|b| !overlaps(b, binary_pseudo, cfg.overlap_iou))
        .take(k_ss)
        .map(|&b| pseudo(unknown_label, b, TargetSource::PseudoSs))
        .collect()
}

/// Unified targets for both views.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwappedTargets {
    /// Annotations of I followed by pseudo targets derived from I_aug.
    pub targets: Vec<Target>,
    /// Annotations of I_aug followed by pseudo targets derived from I.
    pub targets_aug: Vec<Target>,
    /// Target rows present in both views: annotated objects and
    /// selective-search pseudo targets, as `(row in targets, row in targets_aug)`.
    pub corresponding: Vec<(usize, usize)>,
}

impl SwappedTargets {
    /// Objectness labels of `targets`: 0 (foreground) for every row.
    pub fn binary_labels(&self) -> Vec<u8> {
        vec![0; self.targets.len()]
    }

    pub fn binary_labels_aug(&self) -> Vec<u8> {
        vec![0; self.targets_aug.len()]
    }
}

fn boxes(ts: &[Target]) -> Vec<BoxCxcywh> {
    ts.iter().map(|t| t.bbox).collect()
}

/// Builds `y_u = [y, y'_aug]` for I and `y_u_aug = [y_aug, y']` for I_aug.
///
/// `ss_proposals` are ranked selective-search boxes computed on I; the
/// kept ones are mapped into I_aug so that both views share them.
#[allow(clippy::too_many_arguments)]
pub fn build_swapped_targets(
    transform: &CropTransform,
    preds: &[Prediction],
    preds_aug: &[Prediction],
    known_gt: &[Target],
    known_gt_aug: &[Target],
    annotation_pairs: &[(usize, usize)],
    ss_proposals: &[BoxCxcywh],
    cfg: &PseudoLabelConfig,
    unknown_label: usize,
) -> Result<SwappedTargets> {
    transform.ensure_invertible()?;
    let known = boxes(known_gt);
    let known_aug = boxes(known_gt_aug);

    // I -> I_aug.
    let from_i: Vec<Target> = select_binary_pseudo(preds, &known, cfg, unknown_label)
        .into_iter()
        .filter_map(|t| transform.apply(&t.bbox).map(|b| Target { bbox: b, ..t }))
        .filter(|t| !overlaps(&t.bbox, &known_aug, cfg.overlap_iou))
        .collect();
    // I_aug -> I.
    let from_aug: Vec<Target> = select_binary_pseudo(preds_aug, &known_aug, cfg, unknown_label)
        .into_iter()
        .filter_map(|t| clip_box(&transform.invert(&t.bbox)).map(|b| Target { bbox: b, ..t }))
        .filter(|t| !overlaps(&t.bbox, &known, cfg.overlap_iou))
        .collect();

    // Objectness pseudo boxes of both views, expressed in I.
    let mut binary_in_i = boxes(&from_aug);
    binary_in_i.extend(from_i.iter().map(|t| transform.invert(&t.bbox)));
    let binary_in_aug = boxes(&from_i);

    let mut ss_pairs = Vec::new();
    if cfg.k_ss > 0 {
        let candidates =
            supplement_selective_search(ss_proposals, &known, &binary_in_i, cfg, usize::MAX, unknown_label);
        for t in candidates {
            if ss_pairs.len() == cfg.k_ss {
                break;
            }
            let Some(b_aug) = transform.apply(&t.bbox) else { continue };
            if overlaps(&b_aug, &known_aug, cfg.overlap_iou) || overlaps(&b_aug, &binary_in_aug, cfg.overlap_iou) {
                continue;
            }
            ss_pairs.push((t, Target { bbox: b_aug, ..t }));
        }
    }

    let mut out = SwappedTargets {
        targets: known_gt.to_vec(),
        targets_aug: known_gt_aug.to_vec(),
        corresponding: annotation_pairs.to_vec(),
    };
    out.targets.extend(from_aug);
    out.targets_aug.extend(from_i);
    for (t, t_aug) in ss_pairs {
        out.corresponding.push((out.targets.len(), out.targets_aug.len()));
        out.targets.push(t);
        out.targets_aug.push(t_aug);
    }
    Ok(out)
}

/// Number of pseudo targets overlapping an annotated target of the same view
/// by more than `overlap_iou`.
pub fn count_overlap_violations(targets: &[Target], overlap_iou: f64) -> usize {
    let annotated: Vec<BoxCxcywh> = targets.iter().filter(|t| !t.is_pseudo()).map(|t| t.bbox).collect();
    targets
        .iter()
        .filter(|t| t.is_pseudo() && overlaps(&t.bbox, &annotated, overlap_iou))
        .count()
}
