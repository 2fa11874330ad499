//! Detection evaluation: optimal matching, MODA, MODP, precision/recall and
//! ROC/AUC.
//!
//! Detections are matched to ground truth one-to-one. Among all assignments
//! the number of matched pairs within the acceptance radius is maximized
//! first, then their total distance is minimized.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CropRect, GroundGrid};
use crate::nms::iou;

pub const DEFAULT_MATCH_RADIUS_M: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no ground-truth objects in the evaluated frames")]
    NoGroundTruth,
    #[error("no matched detections in the evaluated frames")]
    NoMatches,
    #[error("{0} is undefined: its denominator is zero")]
    UndefinedMetric(&'static str),
    #[error("ROC needs both positive and negative labels")]
    SingleClass,
    #[error("invalid match configuration: {0}")]
    InvalidConfig(String),
    #[error("cell index {0} is outside the grid")]
    InvalidCell(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MatchConfig {
    /// Cell centers within `radius` meters on the ground plane.
    GroundDistance { radius: f64 },
    /// Image rectangles with IoU at least `threshold`.
    BboxIou { threshold: f64 },
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig::GroundDistance {
            radius: DEFAULT_MATCH_RADIUS_M,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let v = match *self {
            MatchConfig::GroundDistance { radius } => radius,
            MatchConfig::BboxIou { threshold } => threshold,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(MetricsError::InvalidConfig(format!(
                "radius/threshold must be positive, got {v}"
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match self {
            MatchConfig::GroundDistance { radius } => format!("ground_distance(radius={radius} m)"),
            MatchConfig::BboxIou { threshold } => format!("bbox_iou(threshold={threshold})"),
        }
    }
}

/// Per-frame detection bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame_id: u64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Localization quality of each match, in `[0, 1]`.
    pub matched_scores: Vec<f64>,
    /// `(detection index, ground-truth index)` per match.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<(usize, usize)>,
}

impl FrameEval {
    pub fn gt_count(&self) -> usize {
        self.tp + self.fn_
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (shortest
/// augmenting paths with potentials). Returns `row → column` and the cost.
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    (assignment, total)
}

/// Optimal partial matching given pairwise distances and an acceptance
/// predicate: maximum number of admissible pairs, then minimum total
/// distance. Returns matched `(row, col)` pairs sorted by row.
pub fn optimal_matching(dist: &[Vec<f64>], admissible: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let rows = dist.len();
    let cols = dist.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    let max_d = dist
        .iter()
        .flatten()
        .copied()
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max);
    // Every unmatched slot costs more than any full set of admissible pairs.
    let penalty = (max_d + 1.0) * (n as f64 + 1.0);
    let mut cost = vec![vec![penalty; n]; n];
    for i in 0..rows {
        for j in 0..cols {
            if admissible(i, j) {
                cost[i][j] = dist[i][j];
            }
        }
    }
    let (assign, _) = hungarian(&cost);
    assign
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < rows && j < cols && admissible(i, j))
        .collect()
}

/// Matches detected cells to ground-truth cells on the ground plane.
///
/// Each match scores `1 − distance / radius`.
pub fn match_frame(
    frame_id: u64,
    detections: &[(usize, f64)],
    ground_truth: &[usize],
    grid: &GroundGrid,
    radius: f64,
) -> Result<FrameEval, MetricsError> {
    MatchConfig::GroundDistance { radius }.validate()?;
    let mut dist = vec![vec![0.0; ground_truth.len()]; detections.len()];
    for (i, &(d, _)) in detections.iter().enumerate() {
        for (j, &g) in ground_truth.iter().enumerate() {
            dist[i][j] = grid.distance(d, g).map_err(|_| {
                MetricsError::InvalidCell(if d >= grid.len() { d } else { g })
            })?;
        }
    }
    let pairs = optimal_matching(&dist, |i, j| dist[i][j] <= radius);
    let matched_scores = pairs
        .iter()
        .map(|&(i, j)| (1.0 - dist[i][j] / radius).clamp(0.0, 1.0))
        .collect();
    Ok(FrameEval {
        frame_id,
        tp: pairs.len(),
        fp: detections.len() - pairs.len(),
        fn_: ground_truth.len() - pairs.len(),
        matched_scores,
        pairs,
    })
}

/// Matches image rectangles; a match needs IoU ≥ `threshold` and scores its
/// IoU.
pub fn match_frame_boxes(
    frame_id: u64,
    detections: &[CropRect],
    ground_truth: &[CropRect],
    threshold: f64,
) -> Result<FrameEval, MetricsError> {
    MatchConfig::BboxIou { threshold }.validate()?;
    let overlaps: Vec<Vec<f64>> = detections
        .iter()
        .map(|d| ground_truth.iter().map(|g| iou(d, g)).collect())
        .collect();
    let dist: Vec<Vec<f64>> = overlaps
        .iter()
        .map(|r| r.iter().map(|o| 1.0 - o).collect())
        .collect();
    let pairs = optimal_matching(&dist, |i, j| overlaps[i][j] >= threshold);
    Ok(FrameEval {
        frame_id,
        tp: pairs.len(),
        fp: detections.len() - pairs.len(),
        fn_: ground_truth.len() - pairs.len(),
        matched_scores: pairs.iter().map(|&(i, j)| overlaps[i][j]).collect(),
        pairs,
    })
}

/// `1 − Σ(fn + fp) / Σ(tp + fn)`.
pub fn moda(frames: &[FrameEval]) -> Result<f64, MetricsError> {
    let gt: usize = frames.iter().map(FrameEval::gt_count).sum();
    if gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let errors: usize = frames.iter().map(|f| f.fn_ + f.fp).sum();
    Ok(1.0 - errors as f64 / gt as f64)
}

/// Mean over frames with at least one match of the frame's mean
/// localization score.
pub fn modp(frames: &[FrameEval]) -> Result<f64, MetricsError> {
    let per_frame: Vec<f64> = frames
        .iter()
        .filter(|f| f.tp > 0)
        .map(|f| f.matched_scores.iter().sum::<f64>() / f.tp as f64)
        .collect();
    if per_frame.is_empty() {
        return Err(MetricsError::NoMatches);
    }
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Precision and recall over summed counts.
pub fn precision_recall(frames: &[FrameEval]) -> Result<(f64, f64), MetricsError> {
    let tp: usize = frames.iter().map(|f| f.tp).sum();
    let fp: usize = frames.iter().map(|f| f.fp).sum();
    let fn_: usize = frames.iter().map(|f| f.fn_).sum();
    if tp + fp == 0 {
        return Err(MetricsError::UndefinedMetric("precision"));
    }
    if tp + fn_ == 0 {
        return Err(MetricsError::UndefinedMetric("recall"));
    }
    Ok((tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64))
}

/// Summary in the MODA / MODP / precision / recall layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub moda: f64,
    /// `None` when no detection was matched.
    pub modp: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub matching: MatchConfig,
    pub frames_without_matches: usize,
    pub frames: Vec<FrameEval>,
}

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameEval>, matching: MatchConfig) -> Result<Self, MetricsError> {
        let moda = moda(&frames)?;
        let modp = modp(&frames).ok();
        let tp: usize = frames.iter().map(|f| f.tp).sum();
        let fp: usize = frames.iter().map(|f| f.fp).sum();
        let fn_: usize = frames.iter().map(|f| f.fn_).sum();
        Ok(Self {
            moda,
            modp,
            precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
            recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
            matching,
            frames_without_matches: frames.iter().filter(|f| f.tp == 0).count(),
            frames,
        })
    }

    /// One row of a comparison table.
    pub fn table_row(&self, label: &str) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        format!(
            "{label}\t{:.2}\t{}\t{}\t{}",
            self.moda,
            f(self.modp),
            f(self.precision),
            f(self.recall)
        )
    }

    pub const TABLE_HEADER: &'static str = "Method\tMODA\tMODP\tPrecision\tRecall";
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve by sweeping the threshold over the distinct scores (a sample is
/// predicted positive when `score ≥ threshold`); AUC by the trapezoid rule.
pub fn roc_auc(scored: &[(f64, bool)]) -> Result<RocCurve, MetricsError> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[1].tpr + w[0].tpr))
        .sum();
    Ok(RocCurve { points, auc })
}

impl RocCurve {
    /// CSV with header `threshold,tpr,fpr`.
    pub fn write_csv<W: Write>(&self, out: W) -> crate::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "tpr", "fpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.tpr.to_string(), p.fpr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of correct hard decisions at `threshold`.
pub fn accuracy(scored: &[(f64, bool)], threshold: f64) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let correct = scored
        .iter()
        .filter(|(s, l)| (*s >= threshold) == *l)
        .count();
    correct as f64 / scored.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fe(tp: usize, fp: usize, fn_: usize, scores: Vec<f64>) -> FrameEval {
        FrameEval {
            frame_id: 0,
            tp,
            fp,
            fn_,
            matched_scores: scores,
            pairs: Vec::new(),
        }
    }

    fn grid() -> GroundGrid {
        GroundGrid::new([0.0, 0.0], 0.5, 10, 10).unwrap()
    }

    #[test]
    fn exact_detections_are_perfect() {
        let g = grid();
        let f = match_frame(0, &[(3, 0.9), (45, 0.8)], &[45, 3], &g, 0.5).unwrap();
        assert_eq!((f.tp, f.fp, f.fn_), (2, 0, 0));
        assert_eq!(f.matched_scores, vec![1.0, 1.0]);
        assert_eq!(moda(&[f.clone()]).unwrap(), 1.0);
        assert_eq!(modp(&[f]).unwrap(), 1.0);
    }

    #[test]
    fn no_detections_are_all_misses() {
        let f = match_frame(0, &[], &[1, 2, 3], &grid(), 0.5).unwrap();
        assert_eq!((f.tp, f.fp, f.fn_), (0, 0, 3));
        assert_eq!(moda(&[f]).unwrap(), 0.0);
    }

    #[test]
    fn neighbour_at_exactly_radius_scores_zero() {
        let f = match_frame(0, &[(1, 0.9)], &[0], &grid(), 0.5).unwrap();
        assert_eq!(f.tp, 1);
        assert_eq!(f.matched_scores, vec![0.0]);
        assert_eq!(modp(&[f]).unwrap(), 0.0);
    }

    #[test]
    fn matching_prefers_more_pairs_over_shorter_ones() {
        // Greedy nearest would pair d0-g1 and strand g0.
        let g = GroundGrid::new([0.0, 0.0], 1.0, 1, 10).unwrap();
        let f = match_frame(0, &[(1, 0.9), (2, 0.5)], &[0, 1], &g, 1.0).unwrap();
        assert_eq!(f.tp, 2);
    }

    #[test]
    fn moda_fixture() {
        let frames = [fe(5, 1, 1, vec![0.8; 5]), fe(3, 0, 1, vec![0.6; 3])];
        assert!((moda(&frames).unwrap() - 0.7).abs() < 1e-15);
        assert!((modp(&frames).unwrap() - 0.7).abs() < 1e-15);
        let (p, r) = precision_recall(&frames).unwrap();
        assert!((p - 8.0 / 9.0).abs() < 1e-15);
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn metric_errors() {
        assert_eq!(moda(&[fe(0, 2, 0, vec![])]), Err(MetricsError::NoGroundTruth));
        assert_eq!(modp(&[fe(0, 2, 1, vec![])]), Err(MetricsError::NoMatches));
        assert_eq!(
            precision_recall(&[fe(0, 0, 1, vec![])]),
            Err(MetricsError::UndefinedMetric("precision"))
        );
        assert_eq!(roc_auc(&[(0.2, true)]).unwrap_err(), MetricsError::SingleClass);
    }

    #[test]
    fn no_false_positive_means_unit_precision() {
        let (p, _) = precision_recall(&[fe(4, 0, 3, vec![1.0; 4])]).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn extra_false_positive_lowers_precision_only() {
        let a = [fe(4, 1, 2, vec![1.0; 4])];
        let b = [fe(4, 2, 2, vec![1.0; 4])];
        let (pa, ra) = precision_recall(&a).unwrap();
        let (pb, rb) = precision_recall(&b).unwrap();
        assert!(pb < pa);
        assert_eq!(ra, rb);
    }

    #[test]
    fn separated_scores_have_unit_auc() {
        let s = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        let roc = roc_auc(&s).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.last().unwrap().tpr, 1.0);
    }

    #[test]
    fn bbox_matching() {
        let d = [CropRect::new(0.0, 0.0, 2.0, 2.0), CropRect::new(10.0, 10.0, 11.0, 11.0)];
        let g = [CropRect::new(0.0, 0.0, 2.0, 2.0)];
        let f = match_frame_boxes(3, &d, &g, 0.5).unwrap();
        assert_eq!((f.tp, f.fp, f.fn_), (1, 1, 0));
        assert_eq!(f.matched_scores, vec![1.0]);
    }

    #[test]
    fn report_layout() {
        let r = EvalReport::from_frames(vec![fe(8, 1, 2, vec![0.5; 8])], MatchConfig::default()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for key in ["moda", "modp", "precision", "recall", "frames"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["frames"][0]["fn"], 2);
        assert!(r.table_row("ours").starts_with("ours\t0.70\t0.50\t0.89\t0.80"));
    }
}
