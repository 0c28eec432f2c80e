//! Label assignment for the stride-2 anchor grid: the dynamic IOU-only
//! strategy plus the two static baselines (shrinking box, center Gaussian).
//!
//! Dynamic rule, per ground-truth box m over its preset candidates (anchor
//! points strictly inside the box): P_m = ceil(sum of candidate IOUs with the
//! current predicted boxes), take the top-P_m candidates by IOU. An anchor
//! claimed by several boxes goes to the one with the larger IOU; an exact
//! tie makes it an ignored sample.

use ndarray::Array2;

use crate::geometry::BoundingBox;
use crate::scalar::Real;

/// One anchor point per cell of the H/2 x W/2 output map, at the cell
/// center in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl AnchorGrid {
    pub fn from_output_size(rows: usize, cols: usize) -> Self {
        AnchorGrid {
            rows,
            cols,
            stride: 2,
        }
    }

    pub fn from_input_size(h: usize, w: usize) -> Self {
        AnchorGrid::from_output_size(h / 2, w / 2)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor point of cell (i, j) in input pixels.
    pub fn point<F: Real>(&self, i: usize, j: usize) -> (F, F) {
        let s = F::real(self.stride as f64);
        let half = F::real(0.5);
        (
            (F::real(j as f64) + half) * s,
            (F::real(i as f64) + half) * s,
        )
    }

    pub fn point_flat<F: Real>(&self, idx: usize) -> (F, F) {
        self.point(idx / self.cols, idx % self.cols)
    }

    pub fn iter_points<F: Real>(&self) -> impl Iterator<Item = (usize, (F, F))> + '_ {
        (0..self.len()).map(move |idx| (idx, self.point_flat(idx)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
}

impl AssignmentResult {
    pub fn all_negative(n: usize) -> Self {
        AssignmentResult {
            labels: vec![AnchorLabel::Negative; n],
        }
    }

    pub fn positive_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| match l {
            AnchorLabel::Positive { gt } => Some((i, *gt)),
            _ => None,
        })
    }
}

/// Candidate anchors per ground-truth box: strictly inside the box.
/// Also returns the union of all candidates in ascending anchor order.
pub fn preset_candidates<F: Real>(
    grid: &AnchorGrid,
    gts: &[BoundingBox<F>],
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut per_gt = vec![Vec::new(); gts.len()];
    let mut union = Vec::new();
    for (idx, (x, y)) in grid.iter_points::<F>() {
        let mut inside_any = false;
        for (m, gt) in gts.iter().enumerate() {
            if gt.contains_strict(x, y) {
                per_gt[m].push(idx);
                inside_any = true;
            }
        }
        if inside_any {
            union.push(idx);
        }
    }
    (per_gt, union)
}

/// Dynamic assignment from the model's current predicted boxes (one box per
/// anchor, full grid).
pub fn simota_oc_assign<F: Real>(
    grid: &AnchorGrid,
    gts: &[BoundingBox<F>],
    pred_boxes: &[BoundingBox<F>],
) -> AssignmentResult {
    assert_eq!(pred_boxes.len(), grid.len(), "one predicted box per anchor");
    let (per_gt, union) = preset_candidates(grid, gts);
    let mut labels = vec![AnchorLabel::Negative; grid.len()];
    for &a in &union {
        labels[a] = AnchorLabel::Ignored;
    }

    // top-P_m selection per ground truth
    let mut claims: Vec<Vec<(usize, F)>> = vec![Vec::new(); grid.len()]; // anchor -> (gt, iou)
    for (m, cands) in per_gt.iter().enumerate() {
        if cands.is_empty() {
            continue;
        }
        let ious: Vec<F> = cands.iter().map(|&a| pred_boxes[a].iou(&gts[m])).collect();
        let row_sum: F = ious.iter().cloned().sum();
        let p_m = (row_sum.ceil().to_f64_() as usize).min(cands.len());
        let mut order: Vec<usize> = (0..cands.len()).collect();
        // IOU descending, anchor index ascending on ties
        order.sort_by(|&a, &b| {
            ious[b]
                .partial_cmp(&ious[a])
                .unwrap()
                .then(cands[a].cmp(&cands[b]))
        });
        for &k in order.iter().take(p_m) {
            claims[cands[k]].push((m, ious[k]));
        }
    }

    // contention: larger IOU wins, exact tie of the best -> ignored
    for (a, claimants) in claims.iter().enumerate() {
        match claimants.len() {
            0 => {}
            1 => labels[a] = AnchorLabel::Positive { gt: claimants[0].0 },
            _ => {
                let best = claimants
                    .iter()
                    .cloned()
                    .fold(None::<(usize, F)>, |acc, (m, iou)| match acc {
                        None => Some((m, iou)),
                        Some((bm, biou)) => {
                            if iou > biou {
                                Some((m, iou))
                            } else {
                                Some((bm, biou))
                            }
                        }
                    })
                    .unwrap();
                let tied = claimants
                    .iter()
                    .filter(|&&(m, iou)| iou == best.1 && m != best.0)
                    .count();
                labels[a] = if tied > 0 {
                    AnchorLabel::Ignored
                } else {
                    AnchorLabel::Positive { gt: best.0 }
                };
            }
        }
    }
    AssignmentResult { labels }
}

/// Static baseline: positive iff strictly inside the box scaled about its
/// center by `shrink`; inside the full box but outside the shrunken one is
/// ignored. An anchor inside several shrunken boxes goes to the smallest box
/// (lowest index on ties).
pub fn shrink_box_assign<F: Real>(
    grid: &AnchorGrid,
    gts: &[BoundingBox<F>],
    shrink: F,
) -> AssignmentResult {
    assert!(
        shrink > F::zero() && shrink <= F::one(),
        "shrink must be in (0, 1]"
    );
    let shrunk: Vec<BoundingBox<F>> = gts.iter().map(|g| g.scaled_about_center(shrink)).collect();
    let mut labels = vec![AnchorLabel::Negative; grid.len()];
    for (idx, (x, y)) in grid.iter_points::<F>() {
        let mut best: Option<(usize, F)> = None;
        let mut inside_full = false;
        for (m, gt) in gts.iter().enumerate() {
            if gt.contains_strict(x, y) {
                inside_full = true;
            }
            if shrunk[m].contains_strict(x, y) {
                let area = gts[m].area();
                if best.map_or(true, |(_, ba)| area < ba) {
                    best = Some((m, area));
                }
            }
        }
        labels[idx] = match (best, inside_full) {
            (Some((m, _)), _) => AnchorLabel::Positive { gt: m },
            (None, true) => AnchorLabel::Ignored,
            (None, false) => AnchorLabel::Negative,
        };
    }
    AssignmentResult { labels }
}

/// Static baseline: per-anchor soft confidence target, the max over boxes of
/// a separable Gaussian centered on the box with sigma = side / 6.
pub fn center_gaussian_assign<F: Real>(grid: &AnchorGrid, gts: &[BoundingBox<F>]) -> Array2<F> {
    let mut weights = Array2::<F>::zeros((grid.rows, grid.cols));
    let two = F::real(2.0);
    let six = F::real(6.0);
    for (idx, (x, y)) in grid.iter_points::<F>() {
        let (i, j) = (idx / grid.cols, idx % grid.cols);
        let mut best = F::zero();
        for gt in gts {
            let (cx, cy) = gt.center();
            let sx = gt.width() / six;
            let sy = gt.height() / six;
            let dx = (x - cx) / sx;
            let dy = (y - cy) / sy;
            let w = (-(dx * dx + dy * dy) / two).exp();
            if w > best {
                best = w;
            }
        }
        weights[[i, j]] = best;
    }
    weights
}

#[cfg(test)]
mod tests {
    use super::*;

    type Box64 = BoundingBox<f64>;

    fn grid(rows: usize, cols: usize) -> AnchorGrid {
        AnchorGrid::from_output_size(rows, cols)
    }

    #[test]
    fn anchor_points_are_cell_centers_in_input_pixels() {
        let g = grid(4, 6);
        assert_eq!(g.point::<f64>(0, 0), (1.0, 1.0));
        assert_eq!(g.point::<f64>(2, 3), (7.0, 5.0));
    }

    #[test]
    fn no_gts_means_all_negative() {
        let g = grid(4, 4);
        let preds = vec![Box64::raw(0.0, 0.0, 1.0, 1.0); g.len()];
        let r = simota_oc_assign(&g, &[], &preds);
        assert!(r.labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn gt_covering_image_makes_all_anchors_candidates() {
        let g = grid(3, 3);
        let gt = Box64::new(-1.0, -1.0, 7.0, 7.0).unwrap();
        let (per_gt, union) = preset_candidates(&g, &[gt]);
        assert_eq!(per_gt[0].len(), 9);
        assert_eq!(union.len(), 9);
    }

    #[test]
    fn anchor_on_gt_edge_is_negative() {
        // anchor (1,1); box with edge x1 = 1 excludes it
        let g = grid(1, 1);
        let gt = Box64::new(1.0, 0.0, 5.0, 5.0).unwrap();
        let (_, union) = preset_candidates(&g, &[gt]);
        assert!(union.is_empty());
        let r = simota_oc_assign(&g, &[gt], &[Box64::raw(0.0, 0.0, 2.0, 2.0)]);
        assert_eq!(r.labels[0], AnchorLabel::Negative);
    }

    /// One GT, candidate IOUs {0.6, 0.5, 0.3} -> P = ceil(1.4) = 2.
    #[test]
    fn top_p_selection_from_row_sum() {
        let g = grid(1, 3); // anchors at x = 1, 3, 5 (y = 1)
        let gt = Box64::new(0.0, 0.0, 6.0, 2.0).unwrap(); // contains all three
        // craft predictions with known IOUs against gt (area 12)
        // iou = inter / (a + 12 - inter); choose boxes inside gt: iou = area/12
        let mk = |area_frac: f64| {
            let w = 6.0 * area_frac;
            Box64::new(0.0, 0.0, w, 2.0).unwrap()
        };
        let preds = vec![mk(0.6), mk(0.5), mk(0.3)];
        let r = simota_oc_assign(&g, &[gt], &preds);
        assert_eq!(r.labels[0], AnchorLabel::Positive { gt: 0 });
        assert_eq!(r.labels[1], AnchorLabel::Positive { gt: 0 });
        assert_eq!(r.labels[2], AnchorLabel::Ignored);
    }

    #[test]
    fn zero_iou_row_gives_no_positives_all_ignored() {
        let g = grid(1, 2);
        let gt = Box64::new(0.0, 0.0, 4.0, 2.0).unwrap();
        let far = Box64::new(100.0, 100.0, 101.0, 101.0).unwrap();
        let preds = vec![far, far];
        let r = simota_oc_assign(&g, &[gt], &preds);
        assert!(r
            .labels
            .iter()
            .all(|l| *l == AnchorLabel::Ignored));
    }

    #[test]
    fn contention_goes_to_larger_iou() {
        // one anchor inside two overlapping GTs; prediction overlaps gt0 more
        let g = grid(1, 1); // anchor at (1,1)
        let gt0 = Box64::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let gt1 = Box64::new(0.5, 0.5, 8.0, 8.0).unwrap();
        let pred = Box64::new(0.0, 0.0, 4.0, 4.0).unwrap(); // iou 1.0 vs gt0
        let r = simota_oc_assign(&g, &[gt0, gt1], &[pred]);
        assert_eq!(r.labels[0], AnchorLabel::Positive { gt: 0 });
    }

    #[test]
    fn exact_iou_tie_is_ignored() {
        let g = grid(1, 1);
        // two identical GTs: both claim the anchor with identical IOU
        let gt = Box64::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let pred = Box64::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let r = simota_oc_assign(&g, &[gt, gt], &[pred]);
        assert_eq!(r.labels[0], AnchorLabel::Ignored);
    }

    #[test]
    fn shrink_one_equals_preset_all_positive() {
        let g = grid(4, 4);
        let gt = Box64::new(0.5, 0.5, 6.5, 6.5).unwrap();
        let r = shrink_box_assign(&g, &[gt], 1.0);
        let (per_gt, _) = preset_candidates(&g, &[gt]);
        for (idx, l) in r.labels.iter().enumerate() {
            if per_gt[0].contains(&idx) {
                assert_eq!(*l, AnchorLabel::Positive { gt: 0 });
            } else {
                assert_eq!(*l, AnchorLabel::Negative);
            }
        }
    }

    #[test]
    fn shrink_half_keeps_centered_region() {
        // 40x40 box centered at (20, 20); shrink 0.5 -> centered 20x20 region
        let g = grid(20, 20);
        let gt = Box64::new(0.0, 0.0, 40.0, 40.0).unwrap();
        let r = shrink_box_assign(&g, &[gt], 0.5);
        for (idx, (x, y)) in g.iter_points::<f64>() {
            let inside_half = x > 10.0 && x < 30.0 && y > 10.0 && y < 30.0;
            match r.labels[idx] {
                AnchorLabel::Positive { .. } => assert!(inside_half, "({x},{y})"),
                AnchorLabel::Ignored => assert!(!inside_half),
                AnchorLabel::Negative => unreachable!("gt covers grid"),
            }
        }
    }

    #[test]
    fn tiny_shrink_keeps_at_most_center_anchor() {
        let g = grid(20, 20);
        let gt = Box64::new(0.0, 0.0, 40.0, 40.0).unwrap();
        let r = shrink_box_assign(&g, &[gt], 0.05);
        assert!(r.positive_count() <= 1);
    }

    #[test]
    fn gaussian_peaks_at_center_and_decays() {
        let g = grid(20, 20);
        // center the box on an anchor point: anchor (9,9) is at (19, 19)
        let gt = Box64::new(7.0, 7.0, 31.0, 31.0).unwrap();
        let w = center_gaussian_assign(&g, &[gt]);
        assert!((w[[9, 9]] - 1.0).abs() < 1e-12);
        assert!(w[[0, 0]] < w[[5, 5]]);
        assert!(w[[19, 19]] < 1e-4); // far outside
    }

    #[test]
    fn gaussian_is_symmetric_about_center() {
        let g = grid(20, 20);
        let gt = Box64::new(7.0, 7.0, 31.0, 31.0).unwrap(); // center (19,19) = anchor (9,9)
        let w = center_gaussian_assign(&g, &[gt]);
        for d in 1..5usize {
            assert!((w[[9 - d, 9]] - w[[9 + d, 9]]).abs() < 1e-12);
            assert!((w[[9, 9 - d]] - w[[9, 9 + d]]).abs() < 1e-12);
        }
    }

    #[test]
    fn positives_lie_strictly_inside_their_gt() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let g = grid(10, 10);
        for _ in 0..50 {
            let gts: Vec<Box64> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let x1 = rng.gen_range(0.0..15.0);
                    let y1 = rng.gen_range(0.0..15.0);
                    Box64::new(x1, y1, x1 + rng.gen_range(1.0..8.0), y1 + rng.gen_range(1.0..8.0))
                        .unwrap()
                })
                .collect();
            let preds: Vec<Box64> = (0..g.len())
                .map(|idx| {
                    let (x, y) = g.point_flat::<f64>(idx);
                    let w = rng.gen_range(0.5..6.0);
                    let h = rng.gen_range(0.5..6.0);
                    Box64::raw(x - w, y - h, x + w, y + h)
                })
                .collect();
            let r = simota_oc_assign(&g, &gts, &preds);
            for (a, m) in r.positives() {
                let (x, y) = g.point_flat::<f64>(a);
                assert!(gts[m].contains_strict(x, y));
            }
        }
    }
}
