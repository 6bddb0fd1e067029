use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    aupr, auroc, far_at_95, mean_ap, osdr, overlap, ClassDetection, GroundTruth, OpenSetDetection,
    OpenSetTruth, ScoredSample,
};
use crate::data::{DatasetManifest, Label};
use crate::detector::{Detection, Verdict};
use crate::error::UaanError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tious: Vec<f64>,
    /// Overlap needed to tie a detection to a ground-truth segment for the
    /// OOD pool and the open-set curve.
    pub ood_tiou: f64,
    /// Detections at or below this actionness stay out of the OOD pool.
    pub a_tau: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tious: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            ood_tiou: 0.5,
            a_tau: 0.5,
        }
    }
}

/// Evaluation summary. A metric is `None` when the evaluation set does not
/// define it (for example no OOD detection was matched); `notes` says why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub far95: Option<f64>,
    pub osdr: Option<f64>,
    pub map_per_tiou: BTreeMap<String, f64>,
    pub mean_map: Option<f64>,
    pub ood_positives: usize,
    pub ood_negatives: usize,
    pub detections: usize,
    pub notes: Vec<String>,
    /// `(u, is_ood)` pairs behind the ranking metrics.
    pub ood_scores: Vec<(f64, bool)>,
}

fn tiou_key(t: f64) -> String {
    format!("{t:.2}")
}

fn keep<T>(r: Result<T, UaanError>, notes: &mut Vec<String>) -> Option<T> {
    r.map_err(|e| notes.push(e.to_string())).ok()
}

pub fn evaluate(
    detections: &[Detection],
    manifest: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<MetricReport, UaanError> {
    let mut notes = Vec::new();
    let mut frames = BTreeMap::new();
    for e in &manifest.clips {
        frames.insert(e.video_id.as_str(), e);
    }
    if let Some(d) = detections.iter().find(|d| !frames.contains_key(d.video_id.as_str())) {
        return Err(UaanError::Contract(format!(
            "detection for unknown video {:?}",
            d.video_id
        )));
    }

    // OOD pool: score u, positive when the best-overlapping segment is OOD
    let mut pool = Vec::new();
    for d in detections.iter().filter(|d| d.a > opts.a_tau) {
        let entry = frames[d.video_id.as_str()];
        let best = entry
            .annotation
            .segments
            .iter()
            .map(|s| (s, overlap((d.start, d.end), s.span())))
            .filter(|(_, iou)| *iou >= opts.ood_tiou)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((seg, _)) = best {
            pool.push(ScoredSample::new(d.u, seg.label.is_ood()));
        }
    }
    let ood_positives = pool.iter().filter(|s| s.is_positive).count();

    let mut truths = Vec::new();
    let mut open_truths = Vec::new();
    for e in &manifest.clips {
        for s in &e.annotation.segments {
            if let Label::Id(c) = s.label {
                truths.push(GroundTruth {
                    video_id: e.video_id.clone(),
                    class: c,
                    start: s.start,
                    end: s.end,
                });
            }
            open_truths.push(OpenSetTruth {
                video_id: e.video_id.clone(),
                start: s.start,
                end: s.end,
                class: s.label.class(),
            });
        }
    }
    let class_dets: Vec<ClassDetection> = detections
        .iter()
        .filter(|d| d.verdict == Verdict::Id)
        .map(|d| ClassDetection {
            video_id: d.video_id.clone(),
            class: d.class,
            start: d.start,
            end: d.end,
            score: d.score,
        })
        .collect();
    let open_dets: Vec<OpenSetDetection> = detections
        .iter()
        .map(|d| OpenSetDetection {
            video_id: d.video_id.clone(),
            start: d.start,
            end: d.end,
            class: Some(d.class),
            uncertainty: d.u,
        })
        .collect();

    let map = keep(mean_ap(&class_dets, &truths, &opts.tious), &mut notes);
    let report = MetricReport {
        auroc: keep(auroc(&pool), &mut notes),
        aupr: keep(aupr(&pool), &mut notes),
        far95: keep(far_at_95(&pool), &mut notes),
        osdr: keep(osdr(&open_dets, &open_truths, opts.ood_tiou), &mut notes),
        map_per_tiou: map
            .as_ref()
            .map(|m| m.per_threshold.iter().map(|&(t, v)| (tiou_key(t), v)).collect())
            .unwrap_or_default(),
        mean_map: map.map(|m| m.mean),
        ood_positives,
        ood_negatives: pool.len() - ood_positives,
        detections: detections.len(),
        notes,
        ood_scores: pool.iter().map(|s| (s.score, s.is_positive)).collect(),
    };
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl MetricReport {
    pub fn map_at(&self, tiou: f64) -> Option<f64> {
        self.map_per_tiou.get(&tiou_key(tiou)).copied()
    }

    /// `metric,value` rows; undefined metrics are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (name, v) in [
            ("auroc", self.auroc),
            ("aupr", self.aupr),
            ("far95", self.far95),
            ("osdr", self.osdr),
        ] {
            let _ = writeln!(s, "{name},{}", fmt(v));
        }
        for (t, v) in &self.map_per_tiou {
            let _ = writeln!(s, "map@{t},{v}");
        }
        let _ = writeln!(s, "mean_map,{}", fmt(self.mean_map));
        s
    }

    /// Percentages, one column per tIoU threshold followed by the open-set
    /// metrics.
    pub fn table(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        for (t, v) in &self.map_per_tiou {
            let _ = write!(header, "{:>8}", format!("@{t}"));
            let _ = write!(row, "{:>8}", format!("{:.2}", 100.0 * v));
        }
        for (name, v) in [
            ("Mean", self.mean_map),
            ("AUROC", self.auroc),
            ("AUPR", self.aupr),
            ("OSDR", self.osdr),
            ("FAR@95", self.far95),
        ] {
            let _ = write!(header, "{name:>8}");
            let _ = write!(row, "{:>8}", cell(v));
        }
        let mut out = format!("{:<6}{header}\n{:<6}{row}\n", "", "mAP");
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, ManifestEntry, Segment, Split};

    fn manifest() -> DatasetManifest {
        let ann = Annotation::from_segments(
            vec![
                Segment { start: 2.0, end: 8.0, label: Label::Id(0) },
                Segment { start: 12.0, end: 18.0, label: Label::Ood },
            ],
            20,
        );
        DatasetManifest {
            num_classes: 2,
            class_names: vec!["a".into(), "b".into()],
            split: Split::Test,
            clips: vec![ManifestEntry {
                file: "v.uaan".into(),
                video_id: "v".into(),
                frames: 20,
                objects: 2,
                annotation: ann,
            }],
        }
    }

    fn det(start: f64, end: f64, verdict: Verdict, class: usize, score: f64, u: f64) -> Detection {
        Detection {
            video_id: "v".into(),
            start,
            end,
            verdict,
            class,
            score,
            u,
            a: 0.9,
        }
    }

    #[test]
    fn perfect_detector() {
        let dets = [
            det(2.0, 8.0, Verdict::Id, 0, 0.9, 0.1),
            det(12.0, 18.0, Verdict::Ood, 1, 0.8, 0.8),
        ];
        let r = evaluate(&dets, &manifest(), &EvalOptions::default()).unwrap();
        assert_eq!(r.auroc, Some(1.0));
        assert_eq!(r.aupr, Some(1.0));
        assert_eq!(r.far95, Some(0.0));
        assert_eq!(r.osdr, Some(1.0));
        assert_eq!(r.mean_map, Some(1.0));
        assert_eq!(r.map_at(0.5), Some(1.0));
        assert_eq!((r.ood_positives, r.ood_negatives), (1, 1));
        assert!(r.notes.is_empty());
        let csv = r.to_csv();
        assert!(csv.contains("auroc,1\n") && csv.contains("map@0.50,1\n"));
        assert!(r.table().contains("100.00"));
    }

    #[test]
    fn undefined_metrics_are_reported() {
        let dets = [det(2.0, 8.0, Verdict::Id, 0, 0.9, 0.1)];
        let r = evaluate(&dets, &manifest(), &EvalOptions::default()).unwrap();
        assert_eq!(r.auroc, None);
        assert!(!r.notes.is_empty());
        assert!(r.table().contains("n/a"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains(r#""auroc":null"#));
    }

    #[test]
    fn unknown_video_is_an_error() {
        let mut d = det(2.0, 8.0, Verdict::Id, 0, 0.9, 0.1);
        d.video_id = "w".into();
        assert!(evaluate(&[d], &manifest(), &EvalOptions::default()).is_err());
    }
}
