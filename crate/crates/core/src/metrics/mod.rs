//! OOD ranking metrics (AUROC, AUPR, FAR@95), temporal detection mAP and the
//! open-set detection rate.
//!
//! For the ranking metrics OOD samples are the positives and a higher score
//! means "more likely OOD".

mod report;

use std::cmp::Ordering;

use crate::error::UaanError;

pub use report::{evaluate, EvalOptions, MetricReport};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_positive: bool,
}

impl ScoredSample {
    pub fn new(score: f64, is_positive: bool) -> Self {
        Self { score, is_positive }
    }
}

fn check_scores(metric: &'static str, samples: &[ScoredSample]) -> Result<(usize, usize), UaanError> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(UaanError::UndefinedMetric {
            metric,
            reason: format!("non-finite score {}", s.score),
        });
    }
    let pos = samples.iter().filter(|s| s.is_positive).count();
    Ok((pos, samples.len() - pos))
}

fn need_both(metric: &'static str, pos: usize, neg: usize) -> Result<(), UaanError> {
    if pos == 0 || neg == 0 {
        return Err(UaanError::UndefinedMetric {
            metric,
            reason: format!("needs both classes, got {pos} positives and {neg} negatives"),
        });
    }
    Ok(())
}

/// Groups of equal score, highest first, as `(positives, negatives)`.
fn descending_groups(samples: &[ScoredSample]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for s in sorted {
        if last != Some(s.score) {
            groups.push((0, 0));
            last = Some(s.score);
        }
        let g = groups.last_mut().expect("group pushed above");
        if s.is_positive {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64, UaanError> {
    let (pos, neg) = check_scores("auroc", samples)?;
    need_both("auroc", pos, neg)?;
    // walk upwards so `below` counts strictly lower negatives
    let mut below = 0usize;
    let mut twice_wins = 0u128;
    for (p, n) in descending_groups(samples).into_iter().rev() {
        twice_wins += (p as u128) * (2 * below as u128 + n as u128);
        below += n;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve, one step per unique
/// score threshold.
pub fn aupr(samples: &[ScoredSample]) -> Result<f64, UaanError> {
    let (pos, _) = check_scores("aupr", samples)?;
    if pos == 0 {
        return Err(UaanError::UndefinedMetric {
            metric: "aupr",
            reason: "no positives".into(),
        });
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (p, n) in descending_groups(samples) {
        tp += p;
        fp += n;
        if p > 0 {
            area += p as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area / pos as f64)
}

/// False-positive rate at the highest threshold whose true-positive rate
/// reaches 95%.
pub fn far_at_95(samples: &[ScoredSample]) -> Result<f64, UaanError> {
    let (pos, neg) = check_scores("far_at_95", samples)?;
    need_both("far_at_95", pos, neg)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in descending_groups(samples) {
        tp += p;
        fp += n;
        if 100 * tp >= 95 * pos {
            return Ok(fp as f64 / neg as f64);
        }
    }
    unreachable!("the lowest threshold accepts every positive")
}

/// Temporal intersection over union of two `[start, end)` segments.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64, UaanError> {
    for s in [a, b] {
        if !(s.1 > s.0) || !s.0.is_finite() || !s.1.is_finite() {
            return Err(UaanError::Contract(format!("degenerate segment {s:?}")));
        }
    }
    Ok(overlap(a, b))
}

/// `tiou` for segments already known to be valid.
pub(crate) fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDetection {
    pub video_id: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

/// Ranking order shared by every detection consumer: score descending, then
/// video, start, end.
fn detection_order(a: &ClassDetection, b: &ClassDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then_with(|| a.start.total_cmp(&b.start))
        .then_with(|| a.end.total_cmp(&b.end))
}

/// Average precision of one class at one threshold, all-point interpolated.
pub fn average_precision(detections: &[ClassDetection], truths: &[GroundTruth], threshold: f64) -> f64 {
    if truths.is_empty() {
        return 0.0;
    }
    let mut dets: Vec<&ClassDetection> = detections.iter().collect();
    dets.sort_by(|a, b| detection_order(a, b));
    let mut gts: Vec<&GroundTruth> = truths.iter().collect();
    gts.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then_with(|| a.start.total_cmp(&b.start))
            .then_with(|| a.end.total_cmp(&b.end))
    });
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for d in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in gts.iter().enumerate() {
            if used[i] || g.video_id != d.video_id {
                continue;
            }
            let iou = overlap((d.start, d.end), (g.start, g.end));
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
        }
        hits.push(best.is_some());
    }

    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    // monotone precision envelope
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    /// `(threshold, mAP)` in input order.
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

/// mAP over the classes that have ground truth, for each threshold, plus the
/// mean across thresholds.
pub fn mean_ap(
    detections: &[ClassDetection],
    truths: &[GroundTruth],
    thresholds: &[f64],
) -> Result<MapResult, UaanError> {
    if thresholds.is_empty() {
        return Err(UaanError::Contract("no tIoU thresholds".into()));
    }
    let mut classes: Vec<usize> = truths.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(UaanError::UndefinedMetric {
            metric: "mAP",
            reason: "no ground-truth segments".into(),
        });
    }
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&thr| {
            let total: f64 = classes
                .iter()
                .map(|&c| {
                    let d: Vec<ClassDetection> =
                        detections.iter().filter(|d| d.class == c).cloned().collect();
                    let g: Vec<GroundTruth> = truths.iter().filter(|g| g.class == c).cloned().collect();
                    average_precision(&d, &g, thr)
                })
                .sum();
            (thr, total / classes.len() as f64)
        })
        .collect();
    let mean = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult { per_threshold, mean })
}

/// A detection as seen by the open-set curve. `class` is `None` when the
/// detector gave no in-distribution label.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetDetection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class: Option<usize>,
    pub uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetTruth {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    /// `None` marks an OOD segment.
    pub class: Option<usize>,
}

/// Open-set detection rate: area under correct-detection rate against
/// false-positive rate as the uncertainty threshold `θ` sweeps upwards.
///
/// A detection is accepted as in-distribution at `θ` when it carries a
/// class and `u ≤ θ`. Each ID ground truth is represented by its
/// highest-overlap detection at tIoU ≥ `threshold`; it is correct when that
/// detection is accepted with the right class. Detections whose best
/// match is not an ID segment (OOD or background) form the negative pool.
/// The curve starts at the origin and is extended flat to FPR = 1.
pub fn osdr(
    detections: &[OpenSetDetection],
    truths: &[OpenSetTruth],
    threshold: f64,
) -> Result<f64, UaanError> {
    if !truths.iter().any(|g| g.class.is_none()) {
        return Err(UaanError::UndefinedMetric {
            metric: "OSDR",
            reason: "no OOD ground truth".into(),
        });
    }
    let id_truths: Vec<&OpenSetTruth> = truths.iter().filter(|g| g.class.is_some()).collect();
    if id_truths.is_empty() {
        return Err(UaanError::UndefinedMetric {
            metric: "OSDR",
            reason: "no ID ground truth".into(),
        });
    }

    // best ground truth of each detection, by overlap
    let best_truth = |d: &OpenSetDetection| -> Option<&OpenSetTruth> {
        truths
            .iter()
            .filter(|g| g.video_id == d.video_id)
            .map(|g| (g, overlap((d.start, d.end), (g.start, g.end))))
            .filter(|(_, iou)| *iou >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(g, _)| g)
    };
    let negatives: Vec<&OpenSetDetection> = detections
        .iter()
        .filter(|d| best_truth(d).map_or(true, |g| g.class.is_none()))
        .collect();
    if negatives.is_empty() {
        return Err(UaanError::UndefinedMetric {
            metric: "OSDR",
            reason: "no OOD or background detections".into(),
        });
    }

    // per ID truth: Some(u) if its representative detection has the right
    // class, i.e. it becomes correct once θ ≥ u
    let correct_at: Vec<Option<f64>> = id_truths
        .iter()
        .map(|g| {
            detections
                .iter()
                .filter(|d| d.video_id == g.video_id)
                .map(|d| (d, overlap((d.start, d.end), (g.start, g.end))))
                .filter(|(_, iou)| *iou >= threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.uncertainty.total_cmp(&a.0.uncertainty)))
                .and_then(|(d, _)| (d.class == g.class).then_some(d.uncertainty))
        })
        .collect();
    let false_at: Vec<f64> = negatives
        .iter()
        .filter(|d| d.class.is_some())
        .map(|d| d.uncertainty)
        .collect();

    let mut thetas: Vec<f64> = correct_at.iter().flatten().chain(&false_at).copied().collect();
    thetas.sort_by(f64::total_cmp);
    thetas.dedup();

    let (n_id, n_neg) = (id_truths.len() as f64, negatives.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    for &theta in &thetas {
        let cdr = correct_at.iter().flatten().filter(|&&u| u <= theta).count() as f64 / n_id;
        let fpr = false_at.iter().filter(|&&u| u <= theta).count() as f64 / n_neg;
        points.push((fpr, cdr));
    }
    let last = *points.last().expect("origin pushed");
    points.push((1.0, last.1));
    let area = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum();
    Ok(area)
}
