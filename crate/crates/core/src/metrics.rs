//! Open-world evaluation: VOC AP@0.5 for known classes, unknown recall,
//! Wilderness Impact and absolute open-set error.
//!
//! Matching follows the VOC protocol everywhere: detections are visited by
//! descending score (ties: lower image id, then lower index); each takes the
//! ground-truth box of highest IoU in its image, and is a true positive only if
//! that IoU is at least 0.5 and the box is still unclaimed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCxcywh, BoxXyxy};

pub const IOU_MATCH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetLabel {
    Known(usize),
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub label: DetLabel,
    pub score: f64,
    pub bbox: BoxCxcywh,
}

/// A ground-truth object with its true class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BoxCxcywh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub recall_level: f64,
    pub score_floor: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            recall_level: 0.8,
            score_floor: 0.05,
        }
    }
}

/// Classes known at evaluation time. Every other class counts as unknown.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub previous: BTreeSet<usize>,
    pub current: BTreeSet<usize>,
}

impl ClassSplit {
    pub fn is_known(&self, class: usize) -> bool {
        self.previous.contains(&class) || self.current.contains(&class)
    }
}

/// Order in which detections are visited.
fn ranked<'a>(dets: impl Iterator<Item = (usize, &'a Detection)>) -> Vec<(usize, &'a Detection)> {
    let mut v: Vec<_> = dets.collect();
    v.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.1.image_id.cmp(&b.1.image_id))
            .then(a.0.cmp(&b.0))
    });
    v
}

/// True-positive flags of `dets` (already ranked) against `gts`, VOC rule.
fn match_flags(dets: &[&Detection], gts: &[&BoxCxcywh], gt_images: &[u64]) -> (Vec<bool>, BTreeSet<usize>) {
    let mut by_image: HashMap<u64, Vec<(usize, BoxXyxy)>> = HashMap::new();
    for (i, (b, &img)) in gts.iter().zip(gt_images).enumerate() {
        by_image.entry(img).or_default().push((i, b.to_xyxy()));
    }
    let mut claimed = BTreeSet::new();
    let flags = dets
        .iter()
        .map(|d| {
            let db = d.bbox.to_xyxy();
            let best = by_image.get(&d.image_id).and_then(|cands| {
                cands
                    .iter()
                    .map(|(i, g)| (*i, iou(&db, g)))
                    .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    })
            });
            match best {
                Some((i, o)) if o >= IOU_MATCH => claimed.insert(i),
                _ => false,
            }
        })
        .collect();
    (flags, claimed)
}

/// All-point interpolated AP from ranked true-positive flags.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// VOC AP@0.5 of one class; `None` when the class has no ground truth.
pub fn voc_ap50(detections: &[Detection], ground_truth: &[GroundTruth], class_id: usize) -> Option<f64> {
    let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| g.class == class_id).collect();
    if gts.is_empty() {
        return None;
    }
    let dets: Vec<&Detection> = ranked(
        detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.label == DetLabel::Known(class_id)),
    )
    .into_iter()
    .map(|x| x.1)
    .collect();
    let boxes: Vec<&BoxCxcywh> = gts.iter().map(|g| &g.bbox).collect();
    let images: Vec<u64> = gts.iter().map(|g| g.image_id).collect();
    let (flags, _) = match_flags(&dets, &boxes, &images);
    Some(average_precision(&flags, gts.len()))
}

/// Fraction of unknown ground-truth boxes claimed by unknown-labeled
/// detections; `None` without unknown ground truth.
pub fn u_recall(detections: &[Detection], unknown_gt: &[GroundTruth]) -> Option<f64> {
    if unknown_gt.is_empty() {
        return None;
    }
    let dets: Vec<&Detection> = ranked(
        detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.label == DetLabel::Unknown),
    )
    .into_iter()
    .map(|x| x.1)
    .collect();
    let boxes: Vec<&BoxCxcywh> = unknown_gt.iter().map(|g| &g.bbox).collect();
    let images: Vec<u64> = unknown_gt.iter().map(|g| g.image_id).collect();
    let (_, claimed) = match_flags(&dets, &boxes, &images);
    Some(claimed.len() as f64 / unknown_gt.len() as f64)
}

fn hits_any(d: &Detection, gts: &[GroundTruth]) -> bool {
    let db = d.bbox.to_xyxy();
    gts.iter()
        .any(|g| g.image_id == d.image_id && iou(&db, &g.bbox.to_xyxy()) >= IOU_MATCH)
}

/// Known-class detections scoring at least `score_floor` whose IoU with some
/// unknown ground-truth box is at least 0.5.
pub fn a_ose(detections: &[Detection], unknown_gt: &[GroundTruth], score_floor: f64) -> usize {
    detections
        .iter()
        .filter(|d| matches!(d.label, DetLabel::Known(_)) && d.score >= score_floor)
        .filter(|d| hits_any(d, unknown_gt))
        .count()
}

/// Counts at the Wilderness Impact operating point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WildernessCounts {
    pub true_positives: usize,
    /// False positives not lying on an unknown object.
    pub closed_false_positives: usize,
    /// False positives lying on an unknown object.
    pub open_false_positives: usize,
}

impl WildernessCounts {
    pub fn p_closed(&self) -> f64 {
        self.true_positives as f64 / (self.true_positives + self.closed_false_positives) as f64
    }

    pub fn p_open(&self) -> f64 {
        self.true_positives as f64
            / (self.true_positives + self.closed_false_positives + self.open_false_positives) as f64
    }

    pub fn wi(&self) -> f64 {
        self.p_closed() / self.p_open() - 1.0
    }
}

/// Walks all known-class detections by rank until pooled known-class recall
/// first reaches `recall_level`. `None` when it never does.
pub fn wilderness_counts(
    detections: &[Detection],
    known_gt: &[GroundTruth],
    unknown_gt: &[GroundTruth],
    recall_level: f64,
) -> Option<WildernessCounts> {
    if known_gt.is_empty() {
        return None;
    }
    let dets = ranked(
        detections
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d.label, DetLabel::Known(_))),
    );
    // True-positive flags per class, in global rank order.
    let mut tp = vec![false; dets.len()];
    let classes: BTreeSet<usize> = dets
        .iter()
        .filter_map(|(_, d)| match d.label {
            DetLabel::Known(c) => Some(c),
            DetLabel::Unknown => None,
        })
        .collect();
    for c in classes {
        let pos: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].1.label == DetLabel::Known(c)).collect();
        let ds: Vec<&Detection> = pos.iter().map(|&i| dets[i].1).collect();
        let gts: Vec<&GroundTruth> = known_gt.iter().filter(|g| g.class == c).collect();
        let boxes: Vec<&BoxCxcywh> = gts.iter().map(|g| &g.bbox).collect();
        let images: Vec<u64> = gts.iter().map(|g| g.image_id).collect();
        let (flags, _) = match_flags(&ds, &boxes, &images);
        for (&i, f) in pos.iter().zip(flags) {
            tp[i] = f;
        }
    }
    let mut counts = WildernessCounts {
        true_positives: 0,
        closed_false_positives: 0,
        open_false_positives: 0,
    };
    for (i, (_, d)) in dets.iter().enumerate() {
        if tp[i] {
            counts.true_positives += 1;
        } else if hits_any(d, unknown_gt) {
            counts.open_false_positives += 1;
        } else {
            counts.closed_false_positives += 1;
        }
        if counts.true_positives as f64 / known_gt.len() as f64 >= recall_level {
            return Some(counts);
        }
    }
    None
}

/// `P_closed / P_open - 1` at the recall operating point.
pub fn wilderness_impact(
    detections: &[Detection],
    known_gt: &[GroundTruth],
    unknown_gt: &[GroundTruth],
    recall_level: f64,
) -> Option<f64> {
    wilderness_counts(detections, known_gt, unknown_gt, recall_level).map(|c| c.wi())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map_previous: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub wi: Option<f64>,
    pub a_ose: usize,
    pub n_known_gt: usize,
    pub n_unknown_gt: usize,
    pub n_detections: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full open-world report for one evaluation split.
pub fn evaluate_split(
    detections: &[Detection],
    gt: &[GroundTruth],
    split: &ClassSplit,
    cfg: &MetricConfig,
) -> Result<EvalReport> {
    if gt.is_empty() && detections.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if !(cfg.recall_level > 0.0 && cfg.recall_level <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "recall level {} outside (0, 1]",
            cfg.recall_level
        )));
    }
    if let Some(d) = detections.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::InvalidArgument(format!("detection score {} outside [0, 1]", d.score)));
    }
    let (known, unknown): (Vec<GroundTruth>, Vec<GroundTruth>) = gt.iter().partition(|g| split.is_known(g.class));

    let per_class_ap: BTreeMap<usize, f64> = split
        .previous
        .iter()
        .chain(&split.current)
        .filter_map(|&c| voc_ap50(detections, &known, c).map(|ap| (c, ap)))
        .collect();
    let map_of = |set: &BTreeSet<usize>| mean(set.iter().filter_map(|c| per_class_ap.get(c).copied()));
    Ok(EvalReport {
        map_previous: map_of(&split.previous),
        map_current: map_of(&split.current),
        map_both: mean(per_class_ap.values().copied()),
        per_class_ap,
        u_recall: u_recall(detections, &unknown),
        wi: wilderness_impact(detections, &known, &unknown, cfg.recall_level),
        a_ose: a_ose(detections, &unknown, cfg.score_floor),
        n_known_gt: known.len(),
        n_unknown_gt: unknown.len(),
        n_detections: detections.len(),
    })
}

impl EvalReport {
    /// Aligned text table with one row per report.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let wi = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        out.push_str("# WI and A-OSE follow the ORE protocol (WI at known recall 0.8).\n");
        let header = ["run", "U-Recall", "Prev mAP", "Curr mAP", "Both mAP", "WI", "A-OSE"];
        let body: Vec<[String; 7]> = rows
            .iter()
            .map(|(name, r)| {
                [
                    name.to_string(),
                    pct(r.u_recall),
                    pct(r.map_previous),
                    pct(r.map_current),
                    pct(r.map_both),
                    wi(r.wi),
                    r.a_ose.to_string(),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..7)
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<&str>| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}", w = widths[i]);
                } else {
                    let _ = write!(s, "  {c:>w$}", w = widths[i]);
                }
            }
            s.push('\n');
            s
        };
        out.push_str(&line(header.to_vec()));
        for r in &body {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: u64, label: DetLabel, score: f64, b: BoxCxcywh) -> Detection {
        Detection {
            image_id,
            label,
            score,
            bbox: b,
        }
    }

    fn gt(image_id: u64, class: usize, b: BoxCxcywh) -> GroundTruth {
        GroundTruth { image_id, class, bbox: b }
    }

    fn at(x: f64) -> BoxCxcywh {
        BoxCxcywh::new(x, 0.5, 0.08, 0.08)
    }

    #[test]
    fn ap_examples() {
        let g = [gt(0, 1, at(0.1)), gt(0, 1, at(0.5))];
        let perfect = [det(0, DetLabel::Known(1), 0.9, at(0.1)), det(0, DetLabel::Known(1), 0.8, at(0.5))];
        assert_eq!(voc_ap50(&perfect, &g, 1), Some(1.0));
        let g1 = [gt(0, 1, at(0.5))];
        let fp_then_tp = [det(0, DetLabel::Known(1), 0.95, at(0.2)), det(0, DetLabel::Known(1), 0.9, at(0.5))];
        assert_eq!(voc_ap50(&fp_then_tp, &g1, 1), Some(0.5));
        assert_eq!(voc_ap50(&perfect, &g, 2), None);
    }

    #[test]
    fn u_recall_examples() {
        let g: Vec<_> = (0..4).map(|i| gt(0, 9, at(0.1 + 0.2 * i as f64))).collect();
        let d: Vec<_> = (0..3).map(|i| det(0, DetLabel::Unknown, 0.5, at(0.1 + 0.2 * i as f64))).collect();
        assert_eq!(u_recall(&d, &g), Some(0.75));
        assert_eq!(u_recall(&[], &g), Some(0.0));
        let all: Vec<_> = g.iter().map(|x| det(0, DetLabel::Unknown, 0.5, x.bbox)).collect();
        assert_eq!(u_recall(&all, &g), Some(1.0));
        assert_eq!(u_recall(&all, &[]), None);
    }

    #[test]
    fn a_ose_examples() {
        let u = [gt(0, 9, at(0.5))];
        let on = det(0, DetLabel::Known(1), 0.7, at(0.5));
        assert_eq!(a_ose(&[on], &[], 0.05), 0);
        assert_eq!(a_ose(&[on], &u, 0.05), 1);
        // IoUs against the unknown box: 1, 1/3 (shift by half a width), 0
        // (other image), 1 but below the floor, 1 but labeled unknown.
        let shifted = BoxCxcywh::new(0.54, 0.5, 0.08, 0.08);
        assert!((crate::geometry::iou_cxcywh(&shifted, &u[0].bbox) - 1.0 / 3.0).abs() < 1e-9);
        let five = [
            on,
            det(0, DetLabel::Known(2), 0.9, shifted),
            det(1, DetLabel::Known(1), 0.9, at(0.5)),
            det(0, DetLabel::Known(2), 0.01, at(0.5)),
            det(0, DetLabel::Unknown, 0.9, at(0.5)),
        ];
        assert_eq!(a_ose(&five, &u, 0.05), 1);
    }

    /// One object per image. False positives outrank every true positive,
    /// so recall 1.0 is first reached at the last detection.
    fn wi_fixture(tp: usize, fpc: usize, fpo: usize) -> (Vec<Detection>, Vec<GroundTruth>, Vec<GroundTruth>) {
        let n = tp + fpc + fpo;
        let (mut dets, mut known, mut unknown) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let id = i as u64;
            if i < fpo {
                unknown.push(gt(id, 9, at(0.5)));
            } else if i >= fpo + fpc {
                known.push(gt(id, 1, at(0.5)));
            }
            dets.push(det(id, DetLabel::Known(1), 0.9 - i as f64 / (2.0 * n as f64), at(0.5)));
        }
        (dets, known, unknown)
    }

    #[test]
    fn wilderness_examples() {
        let (d, k, u) = wi_fixture(36, 4, 5);
        let c = wilderness_counts(&d, &k, &u, 1.0).unwrap();
        assert_eq!((c.true_positives, c.closed_false_positives, c.open_false_positives), (36, 4, 5));
        assert!((c.p_closed() - 0.9).abs() < 1e-12);
        assert!((c.p_open() - 0.8).abs() < 1e-12);
        assert!((c.wi() - 0.125).abs() < 1e-12);

        let (d, k, u) = wi_fixture(8, 1, 1);
        assert!((wilderness_impact(&d, &k, &u, 1.0).unwrap() - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(wilderness_impact(&d, &k, &[], 1.0), Some(0.0));

        let (d, k, _) = wi_fixture(8, 2, 0);
        assert_eq!(wilderness_impact(&d, &k, &[], 0.8), Some(0.0));
        // 8 of 10 known objects detected: recall 0.9 unreachable.
        let mut k2 = k.clone();
        k2.push(gt(100, 1, at(0.5)));
        k2.push(gt(101, 1, at(0.5)));
        assert_eq!(wilderness_impact(&d, &k2, &[], 0.9), None);
    }

    #[test]
    fn perfect_detector_report() {
        let g = vec![gt(0, 1, at(0.1)), gt(0, 2, at(0.4)), gt(1, 3, at(0.7))];
        let d = vec![
            det(0, DetLabel::Known(1), 0.9, at(0.1)),
            det(0, DetLabel::Known(2), 0.9, at(0.4)),
            det(1, DetLabel::Unknown, 0.8, at(0.7)),
        ];
        let split = ClassSplit {
            previous: BTreeSet::new(),
            current: [1, 2].into(),
        };
        let r = evaluate_split(&d, &g, &split, &MetricConfig::default()).unwrap();
        assert_eq!(r.map_previous, None);
        assert_eq!(r.map_current, Some(1.0));
        assert_eq!(r.map_both, Some(1.0));
        assert_eq!(r.u_recall, Some(1.0));
        assert_eq!(r.wi, Some(0.0));
        assert_eq!(r.a_ose, 0);
        assert!(evaluate_split(&[], &[], &split, &MetricConfig::default()).is_err());
        let table = EvalReport::table(&[("perfect", &r)]);
        assert!(table.contains("U-Recall") && table.contains("100.0"));
    }

    #[test]
    fn duplicates_keep_u_recall_and_never_lower_a_ose() {
        let u = [gt(0, 9, at(0.1)), gt(0, 9, at(0.2)), gt(1, 9, at(0.5))];
        let d = vec![
            det(0, DetLabel::Unknown, 0.6, BoxCxcywh::new(0.14, 0.5, 0.08, 0.08)),
            det(0, DetLabel::Unknown, 0.6, at(0.1)),
            det(1, DetLabel::Known(2), 0.3, at(0.5)),
        ];
        let mut doubled = d.clone();
        doubled.extend(d.clone());
        assert_eq!(u_recall(&d, &u), u_recall(&doubled, &u));
        assert!(a_ose(&doubled, &u, 0.05) >= a_ose(&d, &u, 0.05));
    }
}
