//! Differentiable training objectives.
//!
//! Everything here records onto a [`Tape`] and returns a scalar [`Var`].
//! Targets, assignments and masks are constants; only prediction-side
//! quantities carry gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::detector::HeadVars;
use crate::error::{Error, Result};
use crate::geometry::BoxCxcywh;
use crate::matching::Assignment;
use crate::pseudo_label::Target;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Objectness-head focal term.
    pub b_cls: f64,
    /// Cross-view query consistency. The loss is an unnormalized L1 sum over
    /// feature dimensions and pairs, so the default is small.
    pub con: f64,
    pub feat: f64,
    pub cls: f64,
    pub feat_aug: f64,
    pub cls_aug: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            b_cls: 1.0,
            con: 0.003,
            feat: 1.0,
            cls: 1.0,
            feat_aug: 1.0,
            cls_aug: 1.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.b_cls,
            self.con,
            self.feat,
            self.cls,
            self.feat_aug,
            self.cls_aug,
            self.l1,
            self.giou,
            self.focal_gamma,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::InvalidArgument("focal alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Binary `{0,1}` mask over a feature grid, row-major `height x width`.
/// Ones mark cells whose centers fall inside a current known-class box.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl FeatureMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn from_boxes(boxes: &[BoxCxcywh], width: usize, height: usize) -> Self {
        let mut mask = Self::zeros(width, height);
        for b in boxes {
            let xy = b.to_xyxy();
            for row in 0..height {
                let cy = (row as f64 + 0.5) / height as f64;
                if cy < xy.y1 || cy > xy.y2 {
                    continue;
                }
                for col in 0..width {
                    let cx = (col as f64 + 0.5) / width as f64;
                    if cx >= xy.x1 && cx <= xy.x2 {
                        mask.values[row * width + col] = 1;
                    }
                }
            }
        }
        mask
    }

    /// Number of unmasked cells.
    pub fn background_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }
}

/// Summed sigmoid focal loss `-a_t (1 - p_t)^gamma ln p_t` over all entries.
///
/// `labels` holds 0/1 per logit. With `alpha = None` the class balance is
/// dropped (`a_t = 1`).
pub fn sigmoid_focal_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &Tensor,
    alpha: Option<f64>,
    gamma: f64,
) -> Result<Var> {
    if tape.value(logits).shape() != labels.shape() {
        return Err(Error::shape(
            "sigmoid_focal_loss",
            format!("{:?} logits vs {:?} labels", tape.value(logits).shape(), labels.shape()),
        ));
    }
    // s = +1 for positives, -1 for negatives, so p_t = sigmoid(s * x).
    let signs: Vec<f64> = labels.data().iter().map(|&y| if y > 0.5 { 1.0 } else { -1.0 }).collect();
    let weights: Vec<f64> = labels
        .data()
        .iter()
        .map(|&y| match alpha {
            Some(a) if y > 0.5 => a,
            Some(a) => 1.0 - a,
            None => 1.0,
        })
        .collect();
    let shape = labels.shape().to_vec();
    let s = tape.constant(Tensor::new(shape.clone(), signs)?);
    let sx = tape.mul(logits, s)?;
    let log_pt = tape.log_sigmoid(sx);
    let neg_sx = tape.neg(sx);
    let one_minus_pt = tape.sigmoid(neg_sx);
    let modulator = if gamma == 0.0 {
        None
    } else {
        Some(tape.powf(one_minus_pt, gamma))
    };
    let w = tape.constant(Tensor::new(shape, weights)?);
    let weighted = tape.mul(log_pt, w)?;
    let per_entry = match modulator {
        Some(m) => tape.mul(weighted, m)?,
        None => weighted,
    };
    let total = tape.sum(per_entry);
    Ok(tape.neg(total))
}

/// Per-row GIoU between predicted boxes (`M x 4`, cxcywh) and constant targets.
fn giou_rows(tape: &mut Tape, pred: Var, targets: &[BoxCxcywh]) -> Result<Var> {
    let m = targets.len();
    let col = |tape: &mut Tape, j| tape.slice_cols(pred, j, j + 1);
    let (cx, cy, w, h) = (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?);
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let px1 = tape.sub(cx, half_w)?;
    let px2 = tape.add(cx, half_w)?;
    let py1 = tape.sub(cy, half_h)?;
    let py2 = tape.add(cy, half_h)?;

    let txy: Vec<_> = targets.iter().map(|b| b.to_xyxy()).collect();
    let mut constant = |f: &dyn Fn(&crate::geometry::BoxXyxy) -> f64| {
        let v = txy.iter().map(f).collect();
        tape.constant(Tensor::new(vec![m, 1], v).expect("column"))
    };
    let tx1 = constant(&|b| b.x1);
    let ty1 = constant(&|b| b.y1);
    let tx2 = constant(&|b| b.x2);
    let ty2 = constant(&|b| b.y2);
    let t_area = constant(&|b| b.area());

    let ix1 = tape.maximum(px1, tx1)?;
    let iy1 = tape.maximum(py1, ty1)?;
    let ix2 = tape.minimum(px2, tx2)?;
    let iy2 = tape.minimum(py2, ty2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let pw = tape.relu(w);
    let ph = tape.relu(h);
    let p_area = tape.mul(pw, ph)?;
    let sum_area = tape.add(p_area, t_area)?;
    let union = tape.sub(sum_area, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.minimum(px1, tx1)?;
    let ey1 = tape.minimum(py1, ty1)?;
    let ex2 = tape.maximum(px2, tx2)?;
    let ey2 = tape.maximum(py2, ty2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclosing = tape.mul(ew, eh)?;
    let empty = tape.sub(enclosing, union)?;
    let penalty = tape.div(empty, enclosing)?;
    tape.sub(iou, penalty)
}

/// `w_l1 * |b - b_hat|_1 + w_giou * (1 - giou(b, b_hat))`, summed over rows.
pub fn box_loss(tape: &mut Tape, pred: Var, targets: &[BoxCxcywh], w_l1: f64, w_giou: f64) -> Result<Var> {
    let (rows, cols) = tape.value(pred).dims2();
    if rows != targets.len() || cols != 4 {
        return Err(Error::shape(
            "box_loss",
            format!("{rows}x{cols} predictions vs {} targets", targets.len()),
        ));
    }
    let t = Tensor::new(
        vec![rows, 4],
        targets.iter().flat_map(|b| b.to_array()).collect(),
    )?;
    let t = tape.constant(t);
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff);
    let l1 = tape.sum(abs);
    let g = giou_rows(tape, pred, targets)?;
    let g_sum = tape.sum(g);
    // sum(1 - giou) = rows - sum(giou)
    let neg = tape.neg(g_sum);
    let giou_term = tape.add_scalar(neg, rows as f64);
    let a = tape.scale(l1, w_l1);
    let b = tape.scale(giou_term, w_giou);
    tape.add(a, b)
}

/// Individual terms of one Hungarian loss evaluation, already normalized by
/// the target count.
#[derive(Clone, Copy, Debug)]
pub struct HungarianTerms {
    pub total: Var,
    pub class: Var,
    pub boxes: Option<Var>,
    pub binary: Var,
}

/// Dual-matcher Hungarian loss for one image.
///
/// Classification focal loss over every query and class slot (one-hot on
/// `class_assign` matches, zero elsewhere), box loss on the class-matched
/// pairs, and `b_cls` times the objectness focal loss (foreground on
/// `binary_assign` matches). Normalized by `max(1, targets)`.
pub fn hungarian_loss_bin(
    tape: &mut Tape,
    out: &HeadVars,
    targets: &[Target],
    class_assign: &Assignment,
    binary_assign: &Assignment,
    w: &LossWeights,
) -> Result<HungarianTerms> {
    let (n, c) = tape.value(out.class_logits).dims2();
    let check = |a: &Assignment| -> Result<()> {
        for &(t, p) in &a.pairs {
            if t >= targets.len() || p >= n {
                return Err(Error::InvalidArgument(format!(
                    "assignment pair ({t}, {p}) out of range for {} targets and {n} predictions",
                    targets.len()
                )));
            }
        }
        Ok(())
    };
    check(class_assign)?;
    check(binary_assign)?;

    let mut labels = vec![0.0; n * c];
    for &(t, p) in &class_assign.pairs {
        let slot = targets[t].slot();
        if slot >= c {
            return Err(Error::InvalidArgument(format!(
                "target label {} exceeds class head width {c}",
                targets[t].label
            )));
        }
        labels[p * c + slot] = 1.0;
    }
    let alpha = Some(w.focal_alpha);
    let class = sigmoid_focal_loss(tape, out.class_logits, &Tensor::new(vec![n, c], labels)?, alpha, w.focal_gamma)?;

    let mut objectness = vec![0.0; n];
    for &(_, p) in &binary_assign.pairs {
        objectness[p] = 1.0;
    }
    let binary = sigmoid_focal_loss(
        tape,
        out.binary_logits,
        &Tensor::new(vec![n, 1], objectness)?,
        alpha,
        w.focal_gamma,
    )?;

    let boxes = if class_assign.is_empty() {
        None
    } else {
        let preds: Vec<usize> = class_assign.pairs.iter().map(|p| p.1).collect();
        let tboxes: Vec<BoxCxcywh> = class_assign.pairs.iter().map(|p| targets[p.0].bbox).collect();
        let pb = tape.gather_rows(out.boxes, &preds)?;
        Some(box_loss(tape, pb, &tboxes, w.l1, w.giou)?)
    };

    let norm = 1.0 / targets.len().max(1) as f64;
    let class = tape.scale(class, norm);
    let binary = tape.scale(binary, norm);
    let boxes = boxes.map(|b| tape.scale(b, norm));
    let weighted_binary = tape.scale(binary, w.b_cls);
    let mut total = tape.add(class, weighted_binary)?;
    if let Some(b) = boxes {
        total = tape.add(total, b)?;
    }
    Ok(HungarianTerms {
        total,
        class,
        boxes,
        binary,
    })
}

/// Sum of L1 distances between paired query features of two views.
/// `pairs` holds `(query in view I, query in augmented view)`.
pub fn consistency_loss(tape: &mut Tape, q: Var, q_aug: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (_, d) = tape.value(q).dims2();
    let (_, d_aug) = tape.value(q_aug).dims2();
    if d != d_aug {
        return Err(Error::shape("consistency_loss", format!("feature width {d} vs {d_aug}")));
    }
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let qa = tape.gather_rows(q, &a)?;
    let qb = tape.gather_rows(q_aug, &b)?;
    let diff = tape.sub(qa, qb)?;
    let abs = tape.abs(diff);
    Ok(tape.sum(abs))
}

/// `L_hg(I) + L_hg(I_aug) + con * L_con`.
pub fn total_owl_loss(tape: &mut Tape, hg: Var, hg_aug: Var, consistency: Var, w: &LossWeights) -> Result<Var> {
    let sum = tape.add(hg, hg_aug)?;
    let c = tape.scale(consistency, w.con);
    tape.add(sum, c)
}

/// Masked feature distillation:
/// `1/(2N) * sum (1 - mask_ij) * (f_cur - f_pre)^2` with `N` the number of
/// unmasked cells. `f_cur` and `f_pre` are `(height*width) x channels`.
pub fn feat_distill_masked(tape: &mut Tape, f_cur: Var, f_pre: &Tensor, mask: &FeatureMask) -> Result<Var> {
    let (cells, channels) = tape.value(f_cur).dims2();
    if tape.value(f_cur).shape() != f_pre.shape() {
        return Err(Error::shape(
            "feat_distill_masked",
            format!("{:?} vs {:?}", tape.value(f_cur).shape(), f_pre.shape()),
        ));
    }
    if mask.values.len() != cells {
        return Err(Error::shape(
            "feat_distill_masked",
            format!("mask of {} cells vs {cells} feature cells", mask.values.len()),
        ));
    }
    let n = mask.background_count();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let keep: Vec<f64> = mask
        .values
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m == 0 { 1.0 } else { 0.0 }, channels))
        .collect();
    let pre = tape.constant(f_pre.clone());
    let diff = tape.sub(f_cur, pre)?;
    let keep = tape.constant(Tensor::new(vec![cells, channels], keep)?);
    let masked = tape.mul(diff, keep)?;
    let sq = tape.square(masked);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (2.0 * n as f64)))
}

fn check_distributions(name: &str, rows: &Tensor) -> Result<()> {
    let (r, c) = rows.dims2();
    for i in 0..r {
        let row = &rows.data()[i * c..(i + 1) * c];
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} row {i} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `KL(p_pre || p_cur) = sum p_pre (ln p_pre - ln p_cur)`.
pub fn kl_class_distill(tape: &mut Tape, p_cur: Var, p_pre: &Tensor) -> Result<Var> {
    if tape.value(p_cur).shape() != p_pre.shape() {
        return Err(Error::shape(
            "kl_class_distill",
            format!("{:?} vs {:?}", tape.value(p_cur).shape(), p_pre.shape()),
        ));
    }
    check_distributions("p_cur", tape.value(p_cur))?;
    check_distributions("p_pre", p_pre)?;
    let (rows, _) = p_pre.dims2();
    if rows == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let log_pre: Vec<f64> = p_pre.data().iter().map(|&p| p.max(crate::autodiff::LOG_FLOOR).ln()).collect();
    let log_pre = tape.constant(Tensor::new(p_pre.shape().to_vec(), log_pre)?);
    let log_cur = tape.ln(p_cur);
    let diff = tape.sub(log_pre, log_cur)?;
    let pre = tape.constant(p_pre.clone());
    let prod = tape.mul(pre, diff)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Distillation terms for one view; absent when there is no teacher.
#[derive(Clone, Copy, Debug)]
pub struct DistillTerms {
    pub feat: Var,
    pub cls: Var,
}

/// `L_hg + feat * L_feat + cls * L_cls`; without a teacher just `L_hg`.
pub fn total_pretrain_loss(tape: &mut Tape, hg: Var, kd: Option<DistillTerms>, w: &LossWeights) -> Result<Var> {
    let Some(kd) = kd else { return Ok(hg) };
    let f = tape.scale(kd.feat, w.feat);
    let c = tape.scale(kd.cls, w.cls);
    let s = tape.add(hg, f)?;
    tape.add(s, c)
}

/// Open-world stage total plus distillation on both views.
pub fn total_owl_loss_with_kd(
    tape: &mut Tape,
    owl_total: Var,
    kd: DistillTerms,
    kd_aug: DistillTerms,
    w: &LossWeights,
) -> Result<Var> {
    let terms = [
        tape.scale(kd.feat, w.feat),
        tape.scale(kd.cls, w.cls),
        tape.scale(kd_aug.feat, w.feat_aug),
        tape.scale(kd_aug.cls, w.cls_aug),
    ];
    let mut total = owl_total;
    for t in terms {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, sigmoid};
    use crate::pseudo_label::TargetSource;

    fn scalar(t: &Tape, v: Var) -> f64 {
        t.value(v).item()
    }

    #[test]
    fn focal_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let l = sigmoid_focal_loss(&mut t, x, &Tensor::scalar(1.0), Some(0.25), 2.0).unwrap();
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((scalar(&t, l) - expected).abs() < 1e-12);
        assert!((expected - 0.04332).abs() < 1e-5);

        let x = t.constant(Tensor::scalar(20.0));
        let l = sigmoid_focal_loss(&mut t, x, &Tensor::scalar(1.0), Some(0.25), 2.0).unwrap();
        assert!(scalar(&t, l) < 1e-6);
    }

    #[test]
    fn focal_without_modulation_is_bce() {
        let logits = [-2.0, -0.3, 0.0, 0.7, 3.1];
        let labels = [1.0, 0.0, 1.0, 0.0, 1.0];
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![5], logits.to_vec()).unwrap());
        let l = sigmoid_focal_loss(&mut t, x, &Tensor::new(vec![5], labels.to_vec()).unwrap(), None, 0.0).unwrap();
        let bce: f64 = logits
            .iter()
            .zip(labels)
            .map(|(&x, y)| {
                let p = sigmoid(x);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        assert!((scalar(&t, l) - bce).abs() < 1e-9);
    }

    #[test]
    fn box_loss_examples() {
        let mut t = Tape::new();
        let b = BoxCxcywh::new(0.3, 0.6, 0.2, 0.1);
        let p = t.constant(Tensor::new(vec![1, 4], b.to_array().to_vec()).unwrap());
        let l = box_loss(&mut t, p, &[b], 5.0, 2.0).unwrap();
        assert!(scalar(&t, l).abs() < 1e-12);

        let p = t.constant(Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let l = box_loss(&mut t, p, &[BoxCxcywh::new(0.5, 0.5, 1.0, 1.0)], 5.0, 2.0).unwrap();
        assert!((scalar(&t, l) - 6.5).abs() < 1e-12);
    }

    #[test]
    fn box_loss_gradient() {
        let target = [BoxCxcywh::new(0.4, 0.5, 0.3, 0.2), BoxCxcywh::new(0.7, 0.3, 0.1, 0.2)];
        let x = Tensor::new(vec![2, 4], vec![0.45, 0.52, 0.25, 0.3, 0.6, 0.35, 0.2, 0.15]).unwrap();
        let err = finite_difference_check(|t, x| box_loss(t, x, &target, 5.0, 2.0), &x, 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn consistency_examples() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap());
        let qa = t.constant(Tensor::from_rows(&[vec![9.0, 9.0], vec![1.5, 1.0]]).unwrap());
        let l = consistency_loss(&mut t, q, qa, &[(0, 1)]).unwrap();
        assert!((scalar(&t, l) - 1.5).abs() < 1e-12);
        let l = consistency_loss(&mut t, q, q, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let l = consistency_loss(&mut t, q, qa, &[]).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let narrow = t.constant(Tensor::zeros(&[2, 3]));
        assert!(consistency_loss(&mut t, q, narrow, &[(0, 0)]).is_err());
    }

    #[test]
    fn feature_distillation_examples() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let l = feat_distill_masked(&mut t, f, &Tensor::new(vec![1, 1], vec![1.0]).unwrap(), &FeatureMask::zeros(1, 1))
            .unwrap();
        assert!((scalar(&t, l) - 2.0).abs() < 1e-12);

        let all = FeatureMask {
            width: 1,
            height: 1,
            values: vec![1],
        };
        let l = feat_distill_masked(&mut t, f, &Tensor::new(vec![1, 1], vec![1.0]).unwrap(), &all).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        assert!(feat_distill_masked(&mut t, f, &Tensor::zeros(&[2, 1]), &all).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::new();
        let cur = t.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let l = kl_class_distill(&mut t, cur, &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!((scalar(&t, l) - std::f64::consts::LN_2).abs() < 1e-12);
        let l = kl_class_distill(&mut t, cur, &Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
        assert!(scalar(&t, l).abs() < 1e-15);
        let bad = Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap();
        assert!(kl_class_distill(&mut t, cur, &bad).is_err());
    }

    #[test]
    fn mask_covers_cells_inside_boxes() {
        let m = FeatureMask::from_boxes(&[BoxCxcywh::new(0.25, 0.25, 0.5, 0.5)], 4, 4);
        let ones: Vec<usize> = (0..16).filter(|&i| m.values[i] == 1).collect();
        assert_eq!(ones, vec![0, 1, 4, 5]);
        assert_eq!(m.background_count(), 12);
    }

    #[test]
    fn hungarian_rejects_out_of_range_pairs() {
        let mut t = Tape::new();
        let out = HeadVars {
            class_logits: t.constant(Tensor::zeros(&[2, 3])),
            binary_logits: t.constant(Tensor::zeros(&[2, 1])),
            boxes: t.constant(Tensor::full(&[2, 4], 0.5)),
            query_features: t.constant(Tensor::zeros(&[2, 4])),
        };
        let targets = [Target {
            label: 1,
            bbox: BoxCxcywh::new(0.5, 0.5, 0.2, 0.2),
            source: TargetSource::Annotated,
        }];
        let bad = Assignment {
            pairs: vec![(0, 5)],
            total_cost: 0.0,
        };
        let good = Assignment {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        assert!(hungarian_loss_bin(&mut t, &out, &targets, &bad, &good, &LossWeights::default()).is_err());
        assert!(hungarian_loss_bin(&mut t, &out, &targets, &good, &bad, &LossWeights::default()).is_err());
    }
}
