//! Score-weighted non-maxima suppression over multi-view candidates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{CropRect, GroundGrid};

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.4;

/// A scored ground cell with its crop rectangle in every view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCandidate {
    pub cell: usize,
    pub score: f64,
    /// One entry per view; `None` (or an invisible rect) when out of view.
    pub rects: Vec<Option<CropRect>>,
}

impl DetectionCandidate {
    pub fn new(cell: usize, score: f64, rects: Vec<CropRect>) -> Self {
        Self {
            cell,
            score,
            rects: rects
                .into_iter()
                .map(|r| r.visible.then_some(r))
                .collect(),
        }
    }

    pub fn visible_rect(&self, view: usize) -> Option<&CropRect> {
        self.rects.get(view)?.as_ref().filter(|r| r.visible)
    }
}

/// Intersection over union of two rectangles; 0 for disjoint or empty ones.
pub fn iou(a: &CropRect, b: &CropRect) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Largest per-view IoU; views where either rect is missing count as 0.
pub fn max_view_overlap(a: &DetectionCandidate, b: &DetectionCandidate) -> f64 {
    (0..a.rects.len().min(b.rects.len()))
        .filter_map(|v| Some(iou(a.visible_rect(v)?, b.visible_rect(v)?)))
        .fold(0.0, f64::max)
}

fn by_priority(a: &DetectionCandidate, b: &DetectionCandidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.cell.cmp(&b.cell))
}

/// Greedy suppression in score order (ties by ascending cell). A candidate
/// is kept iff its overlap with every kept candidate is at most
/// `overlap_threshold` in all views. Output is in acceptance order.
pub fn score_weighted_nms(
    candidates: &[DetectionCandidate],
    overlap_threshold: f64,
) -> Vec<DetectionCandidate> {
    let mut order: Vec<&DetectionCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| by_priority(a, b));
    let mut kept: Vec<DetectionCandidate> = Vec::new();
    for c in order {
        if kept
            .iter()
            .all(|k| max_view_overlap(k, c) <= overlap_threshold)
        {
            kept.push(c.clone());
        }
    }
    kept
}

/// Drops candidates closer than `min_cells` (Chebyshev) to a higher-priority
/// kept one. Applied after [`score_weighted_nms`] when enabled.
pub fn min_cell_distance_filter(
    candidates: &[DetectionCandidate],
    grid: &GroundGrid,
    min_cells: usize,
) -> Vec<DetectionCandidate> {
    let mut order: Vec<&DetectionCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| by_priority(a, b));
    let mut kept: Vec<DetectionCandidate> = Vec::new();
    for c in order {
        let far = kept.iter().all(|k| {
            grid.chebyshev(k.cell, c.cell)
                .map(|d| d >= min_cells)
                .unwrap_or(true)
        });
        if far {
            kept.push(c.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(cell: usize, score: f64, rects: &[[f64; 4]]) -> DetectionCandidate {
        DetectionCandidate::new(
            cell,
            score,
            rects
                .iter()
                .map(|r| CropRect::new(r[0], r[1], r[2], r[3]))
                .collect(),
        )
    }

    #[test]
    fn iou_cases() {
        let a = CropRect::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &CropRect::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let b = CropRect::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_and_duplicate() {
        let one = cand(3, 0.7, &[[0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(score_weighted_nms(std::slice::from_ref(&one), 0.4), vec![one]);
        let a = cand(1, 0.8, &[[0.0, 0.0, 1.0, 1.0]]);
        let b = cand(2, 0.9, &[[0.0, 0.0, 1.0, 1.0]]);
        let out = score_weighted_nms(&[a, b.clone()], 0.4);
        assert_eq!(out, vec![b]);
        assert!(score_weighted_nms(&[], 0.4).is_empty());
    }

    #[test]
    fn overlap_in_any_view_suppresses() {
        let a = cand(1, 0.9, &[[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]]);
        let b = cand(2, 0.8, &[[5.0, 5.0, 6.0, 6.0], [0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(score_weighted_nms(&[a.clone(), b], 0.4), vec![a]);
    }

    #[test]
    fn invisible_views_do_not_suppress() {
        let mut a = cand(1, 0.9, &[[0.0, 0.0, 1.0, 1.0]]);
        let b = cand(2, 0.8, &[[0.0, 0.0, 1.0, 1.0]]);
        a.rects[0] = None;
        assert_eq!(score_weighted_nms(&[a, b], 0.4).len(), 2);
    }

    #[test]
    fn ties_break_by_cell() {
        let a = cand(7, 0.5, &[[0.0, 0.0, 1.0, 1.0]]);
        let b = cand(4, 0.5, &[[0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(score_weighted_nms(&[a, b], 0.4)[0].cell, 4);
    }

    #[test]
    fn cell_distance_filter() {
        let grid = GroundGrid::new([0.0, 0.0], 1.0, 5, 5).unwrap();
        let a = cand(0, 0.9, &[[0.0, 0.0, 1.0, 1.0]]);
        let b = cand(1, 0.8, &[[3.0, 0.0, 4.0, 1.0]]);
        let c = cand(3, 0.7, &[[6.0, 0.0, 7.0, 1.0]]);
        let out = min_cell_distance_filter(&[a, b, c], &grid, 2);
        assert_eq!(out.iter().map(|d| d.cell).collect::<Vec<_>>(), vec![0, 3]);
    }

    fn arb_candidates() -> impl Strategy<Value = Vec<DetectionCandidate>> {
        prop::collection::vec(
            (0.0f64..1.0, prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0.5f64..4.0, 0.5f64..4.0), 2)),
            0..9,
        )
        .prop_map(|items| {
            items
                .into_iter()
                .enumerate()
                .map(|(i, (s, rs))| {
                    cand(
                        i,
                        (s * 10.0).round() / 10.0,
                        &rs.iter().map(|&(x, y, w, h)| [x, y, x + w, y + h]).collect::<Vec<_>>(),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_invariants(cands in arb_candidates(), t in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let out = score_weighted_nms(&cands, t);
            for (i, a) in out.iter().enumerate() {
                prop_assert!(cands.contains(a));
                for b in &out[i + 1..] {
                    prop_assert!(max_view_overlap(a, b) <= t);
                }
            }
            if let Some(best) = cands.iter().min_by(|a, b| by_priority(a, b)) {
                prop_assert_eq!(&out[0], best);
            }
            let (lo, hi) = if t <= t2 { (t, t2) } else { (t2, t) };
            prop_assert!(score_weighted_nms(&cands, lo).len() <= score_weighted_nms(&cands, hi).len());
            let mut rev = cands.clone();
            rev.reverse();
            prop_assert_eq!(score_weighted_nms(&rev, t), out);
        }
    }
}
