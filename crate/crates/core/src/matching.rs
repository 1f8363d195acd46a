//! Matching costs and optimal bipartite assignment.
//!
//! Two matchers run side by side on every image: one scores predictions with
//! the class-specific head, the other with the class-agnostic objectness head.
//! Both share the box terms and are solved independently.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, LOG_FLOOR};
use crate::detector::Prediction;
use crate::error::{Error, Result};
use crate::geometry::giou;
use crate::pseudo_label::Target;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Dense `targets x predictions` cost table.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("CostMatrix::new", format!("{rows}x{cols} from {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("CostMatrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Injective map from target rows to prediction columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// `(target, prediction)` pairs ordered by target index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// Prediction matched to `target`, if any.
    pub fn prediction_for(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|(t, _)| *t == target).map(|(_, p)| *p)
    }
}

/// Focal-style classification matching cost for probability `p` of the
/// target class: positive focal term minus negative focal term.
pub fn focal_match_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let pos = alpha * (1.0 - p).powf(gamma) * -(p.max(LOG_FLOOR)).ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -((1.0 - p).max(LOG_FLOOR)).ln();
    pos - neg
}

fn box_cost(t: &Target, p: &Prediction, w: &CostWeights) -> f64 {
    w.l1 * t.bbox.l1_distance(&p.bbox) + w.giou * (1.0 - giou(&t.bbox.to_xyxy(), &p.bbox.to_xyxy()))
}

/// Cost of the class-specific matcher.
pub fn class_match_cost(targets: &[Target], preds: &[Prediction], w: &CostWeights) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(targets.len() * preds.len());
    for t in targets {
        let slot = t.slot();
        for p in preds {
            let logit = *p.class_logits.get(slot).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "target label {} exceeds class head width {}",
                    t.label,
                    p.class_logits.len()
                ))
            })?;
            let cls = focal_match_cost(sigmoid(logit), w.alpha, w.gamma);
            data.push(w.class * cls + box_cost(t, p, w));
        }
    }
    CostMatrix::new(targets.len(), preds.len(), data)
}

/// Cost of the objectness matcher. Every row is a foreground target; the
/// binary logit scores foreground.
pub fn binary_match_cost(targets: &[Target], preds: &[Prediction], w: &CostWeights) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(targets.len() * preds.len());
    for t in targets {
        for p in preds {
            let cls = focal_match_cost(sigmoid(p.binary_logit), w.alpha, w.gamma);
            data.push(w.class * cls + box_cost(t, p, w));
        }
    }
    CostMatrix::new(targets.len(), preds.len(), data)
}

/// Minimum-cost assignment of every row to a distinct column.
///
/// Shortest augmenting paths with row/column potentials, O(rows^2 * cols).
/// When several columns tie for the smallest reduced cost a free column is
/// preferred, then the lowest index, so an all-equal matrix yields `(i, i)`.
pub fn hungarian_solve(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::TooManyRows { rows: n, cols: m });
    }
    if n == 0 {
        return Ok(Assignment::default());
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                let better = minv[j] < delta
                    || (minv[j] == delta && j1 != 0 && owner[j1] != 0 && owner[j] == 0);
                if better {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Solves the class-specific and the objectness matchers independently.
pub fn dual_match(
    targets: &[Target],
    preds: &[Prediction],
    w: &CostWeights,
) -> Result<(Assignment, Assignment)> {
    let class = hungarian_solve(&class_match_cost(targets, preds, w)?)?;
    let binary = hungarian_solve(&binary_match_cost(targets, preds, w)?)?;
    Ok((class, binary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxCxcywh;
    use crate::pseudo_label::TargetSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections of rows into columns.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.cols() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
        if cost.rows() == 0 {
            0.0
        } else {
            best
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(0.0..10.0)).collect();
        CostMatrix::new(rows, cols, data).unwrap()
    }

    fn target(label: usize, b: BoxCxcywh) -> Target {
        Target {
            label,
            bbox: b,
            source: TargetSource::Annotated,
        }
    }

    fn pred(logits: Vec<f64>, binary: f64, b: BoxCxcywh) -> Prediction {
        Prediction {
            class_logits: logits,
            binary_logit: binary,
            bbox: b,
            query_feature: vec![],
        }
    }

    #[test]
    fn solver_examples() {
        let a = hungarian_solve(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);

        let zeros = CostMatrix::new(4, 6, vec![0.0; 24]).unwrap();
        let a = hungarian_solve(&zeros).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(a.total_cost, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = random_matrix(5, 7, &mut rng);
        let a = hungarian_solve(&m).unwrap();
        assert_eq!(a.total_cost, brute_force(&m));
    }

    #[test]
    fn rejects_more_rows_than_columns() {
        let m = CostMatrix::new(3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(hungarian_solve(&m), Err(Error::TooManyRows { .. })));
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn row_offset_keeps_an_optimal_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(rows..=6);
            let m = random_matrix(rows, cols, &mut rng);
            let base = hungarian_solve(&m).unwrap();
            let r = rng.random_range(0..rows);
            let c = rng.random_range(-3.0..3.0);
            let mut data = m.data.clone();
            for j in 0..cols {
                data[r * cols + j] += c;
            }
            let shifted = CostMatrix::new(rows, cols, data).unwrap();
            let a = hungarian_solve(&shifted).unwrap();
            assert!((a.total_cost - (base.total_cost + c)).abs() < 1e-9);
            // The new assignment must still be optimal for the original matrix.
            let on_original: f64 = a.pairs.iter().map(|&(i, j)| m.get(i, j)).sum();
            assert!((on_original - brute_force(&m)).abs() < 1e-9);
        }
    }

    #[test]
    fn assignment_is_injective_with_consistent_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let rows = rng.random_range(0..=6);
            let cols = rng.random_range(rows.max(1)..=7);
            let m = random_matrix(rows, cols, &mut rng);
            let a = hungarian_solve(&m).unwrap();
            assert_eq!(a.len(), rows);
            let mut cols_seen: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            cols_seen.sort_unstable();
            cols_seen.dedup();
            assert_eq!(cols_seen.len(), rows);
            let sum: f64 = a.pairs.iter().map(|&(i, j)| m.get(i, j)).sum();
            assert_eq!(sum, a.total_cost);
        }
    }

    #[test]
    fn perfect_prediction_has_minimal_class_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BoxCxcywh::new(0.4, 0.5, 0.2, 0.3);
        let t = [target(2, b)];
        let mut preds = vec![pred(vec![-30.0, 30.0, -30.0], 0.0, b)];
        for _ in 0..50 {
            let logits = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let rb = BoxCxcywh::new(
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
            );
            preds.push(pred(logits, 0.0, rb));
        }
        let c = class_match_cost(&t, &preds, &CostWeights::default()).unwrap();
        for j in 1..preds.len() {
            assert!(c.get(0, 0) < c.get(0, j));
        }
    }

    #[test]
    fn box_terms_vanish_for_identical_boxes() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.3, 0.3);
        let w = CostWeights {
            class: 0.0,
            ..CostWeights::default()
        };
        let c = class_match_cost(&[target(1, b)], &[pred(vec![0.3, -1.0], 0.0, b)], &w).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
    }

    #[test]
    fn class_cost_follows_l1_ordering() {
        let t = [target(1, BoxCxcywh::new(0.5, 0.5, 0.2, 0.2))];
        let near = pred(vec![0.0, 0.0], 0.0, BoxCxcywh::new(0.52, 0.5, 0.2, 0.2));
        let far = pred(vec![0.0, 0.0], 0.0, BoxCxcywh::new(0.58, 0.5, 0.2, 0.2));
        let c = class_match_cost(&t, &[near, far], &CostWeights::default()).unwrap();
        assert!(c.get(0, 0) < c.get(0, 1));
    }

    #[test]
    fn binary_cost_examples() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.3, 0.3);
        let t = [target(1, b)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut preds = vec![pred(vec![0.0], 30.0, b)];
        for _ in 0..30 {
            let rb = BoxCxcywh::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), 0.3, 0.3);
            preds.push(pred(vec![0.0], rng.random_range(-5.0..5.0), rb));
        }
        let c = binary_match_cost(&t, &preds, &CostWeights::default()).unwrap();
        for j in 1..preds.len() {
            assert!(c.get(0, 0) < c.get(0, j));
        }

        // Identical predictions: every column costs the same, lowest index wins.
        let same = vec![pred(vec![0.0], 1.0, b); 3];
        let c = binary_match_cost(&t, &same, &CostWeights::default()).unwrap();
        assert!(c.get(0, 0) == c.get(0, 1) && c.get(0, 1) == c.get(0, 2));
        assert_eq!(hungarian_solve(&c).unwrap().pairs, vec![(0, 0)]);

        // Without box terms the ranking follows objectness alone.
        let w = CostWeights {
            l1: 0.0,
            giou: 0.0,
            ..CostWeights::default()
        };
        let ps = [pred(vec![0.0], -1.0, b), pred(vec![0.0], 2.0, b), pred(vec![0.0], 0.5, b)];
        let c = binary_match_cost(&t, &ps, &w).unwrap();
        assert!(c.get(0, 1) < c.get(0, 2) && c.get(0, 2) < c.get(0, 0));
    }

    #[test]
    fn dual_match_edge_cases() {
        let b = BoxCxcywh::new(0.5, 0.5, 0.3, 0.3);
        let p = [pred(vec![0.0, 0.0], 0.0, b)];
        let (a, s) = dual_match(&[], &p, &CostWeights::default()).unwrap();
        assert!(a.is_empty() && s.is_empty());
        let (a, s) = dual_match(&[target(1, b)], &p, &CostWeights::default()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(s.pairs, vec![(0, 0)]);
    }

    #[test]
    fn dual_match_totals_are_each_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let rbox = |rng: &mut ChaCha8Rng| {
                BoxCxcywh::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                )
            };
            let targets: Vec<_> = (0..3).map(|_| target(rng.random_range(1..=3), rbox(&mut rng))).collect();
            let preds: Vec<_> = (0..6)
                .map(|_| {
                    let l: f64 = rng.random_range(-3.0..3.0);
                    pred(vec![l; 3], l, rbox(&mut rng))
                })
                .collect();
            let w = CostWeights::default();
            let (a, s) = dual_match(&targets, &preds, &w).unwrap();
            let ca = class_match_cost(&targets, &preds, &w).unwrap();
            let cb = binary_match_cost(&targets, &preds, &w).unwrap();
            assert!((a.total_cost - brute_force(&ca)).abs() < 1e-9);
            assert!((s.total_cost - brute_force(&cb)).abs() < 1e-9);
        }
    }
}
