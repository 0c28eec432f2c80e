//! VOC-2007 11-point average precision over an IOU-threshold sweep
//! (0.50 to 0.95 step 0.05) with small/medium/large size strata.

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::inference::Detection;

pub const IOU_THRESHOLDS: [f64; 10] = [
    0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95,
];

/// Ground-truth size strata by box area (input pixels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeStratum {
    Small,
    Medium,
    Large,
}

pub fn stratum_of(b: &BoundingBox<f64>) -> SizeStratum {
    let area = b.area();
    if area < 32.0 * 32.0 {
        SizeStratum::Small
    } else if area <= 96.0 * 96.0 {
        SizeStratum::Medium
    } else {
        SizeStratum::Large
    }
}

/// One frame's detections and ground truth, already in the same coordinate
/// space.
#[derive(Debug, Clone, Default)]
pub struct FrameEval {
    pub detections: Vec<Detection<f64>>,
    pub gts: Vec<BoundingBox<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over thresholds 0.50..0.95.
    pub ap: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub per_threshold: Vec<(f64, f64)>,
    pub num_detections: usize,
    pub num_gts: usize,
    /// PR curve at IOU 0.50.
    pub pr50: Vec<PrPoint>,
}

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    /// True positive; carries the matched GT index.
    Tp(usize),
    Fp,
    /// Matched a GT outside the evaluated stratum; excluded from the curve.
    Ignored,
}

/// Greedy matching of one frame in descending score order; each GT is
/// consumed at most once. `in_stratum[g]` false marks GTs whose matches are
/// ignored rather than counted.
pub fn match_frame(
    detections: &[Detection<f64>],
    gts: &[BoundingBox<f64>],
    in_stratum: &[bool],
    iou_thr: f64,
) -> Vec<(f64, MatchFlag)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(detections.len());
    for &d in &order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = det.bbox.iou(gt);
            if iou >= iou_thr && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((g, iou));
            }
        }
        let flag = match best {
            Some((g, _)) => {
                taken[g] = true;
                if in_stratum[g] {
                    MatchFlag::Tp(g)
                } else {
                    MatchFlag::Ignored
                }
            }
            None => MatchFlag::Fp,
        };
        out.push((det.score, flag));
    }
    out
}

/// VOC-2007 11-point interpolated AP from (score, is_tp) pairs.
/// Conventions: no GTs and no detections -> 1.0; no GTs with detections -> 0.
pub fn average_precision(flags: &[(f64, bool)], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut sorted: Vec<(f64, bool)> = flags.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for &(_, is_tp) in &sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((
            tp as f64 / gt_count as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let mut ap = 0.0;
    for k in 0..=10 {
        let r = k as f64 / 10.0;
        let p = curve
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p / 11.0;
    }
    ap.min(1.0)
}

fn ap_at(frames: &[FrameEval], iou_thr: f64, stratum: Option<SizeStratum>) -> f64 {
    let mut flags: Vec<(f64, bool)> = Vec::new();
    let mut gt_count = 0usize;
    for frame in frames {
        let in_stratum: Vec<bool> = frame
            .gts
            .iter()
            .map(|g| stratum.map(|s| stratum_of(g) == s).unwrap_or(true))
            .collect();
        gt_count += in_stratum.iter().filter(|&&b| b).count();
        for (score, flag) in match_frame(&frame.detections, &frame.gts, &in_stratum, iou_thr) {
            match flag {
                MatchFlag::Tp(_) => flags.push((score, true)),
                MatchFlag::Fp => flags.push((score, false)),
                MatchFlag::Ignored => {}
            }
        }
    }
    average_precision(&flags, gt_count)
}

fn pr_curve(frames: &[FrameEval], iou_thr: f64) -> Vec<PrPoint> {
    let mut flags: Vec<(f64, bool)> = Vec::new();
    let mut gt_count = 0usize;
    for frame in frames {
        let in_stratum = vec![true; frame.gts.len()];
        gt_count += frame.gts.len();
        for (score, flag) in match_frame(&frame.detections, &frame.gts, &in_stratum, iou_thr) {
            match flag {
                MatchFlag::Tp(_) => flags.push((score, true)),
                MatchFlag::Fp => flags.push((score, false)),
                MatchFlag::Ignored => {}
            }
        }
    }
    flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut fp = 0usize;
    flags
        .iter()
        .map(|&(score, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: if gt_count == 0 {
                    0.0
                } else {
                    tp as f64 / gt_count as f64
                },
                precision: tp as f64 / (tp + fp) as f64,
                score,
            }
        })
        .collect()
}

/// Full evaluation: AP sweep plus size-stratified AP50s.
pub fn evaluate(frames: &[FrameEval]) -> EvalReport {
    let per_threshold: Vec<(f64, f64)> = IOU_THRESHOLDS
        .iter()
        .map(|&t| (t, ap_at(frames, t, None)))
        .collect();
    let ap = per_threshold.iter().map(|(_, a)| a).sum::<f64>() / per_threshold.len() as f64;
    let ap50 = per_threshold[0].1;
    let ap75 = per_threshold[5].1;
    EvalReport {
        ap50,
        ap75,
        ap,
        ap_small: ap_at(frames, 0.50, Some(SizeStratum::Small)),
        ap_medium: ap_at(frames, 0.50, Some(SizeStratum::Medium)),
        ap_large: ap_at(frames, 0.50, Some(SizeStratum::Large)),
        per_threshold,
        num_detections: frames.iter().map(|f| f.detections.len()).sum(),
        num_gts: frames.iter().map(|f| f.gts.len()).sum(),
        pr50: pr_curve(frames, 0.50),
    }
}
