//! Sliding-window anchors, boundary refinement, the uncertainty/actionness
//! decision rule and per-class non-maximum suppression.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObjectFeatureClip;
use crate::error::{TensorError, UaanError};
use crate::metrics::overlap;
use crate::model::UaanModel;
use crate::objectives::{evidence_to_opinion, Opinion, BASE_RATE};
use crate::tensor::{sigmoid, Tape};

pub const DEFAULT_ANCHOR_SCALES: [usize; 4] = [2, 4, 8, 16];

/// Windows of each scale at stride `scale / 2`, clamped to `[0, T]`,
/// deduplicated and sorted by `(start, end)`.
pub fn generate_anchors(frames: usize, scales: &[usize]) -> Result<Vec<(usize, usize)>, TensorError> {
    if scales.is_empty() {
        return Err(TensorError::Contract("empty anchor scale list".into()));
    }
    if scales.contains(&0) {
        return Err(TensorError::Contract(format!("zero anchor scale in {scales:?}")));
    }
    let mut spans = Vec::new();
    if frames == 0 {
        return Ok(spans);
    }
    for &scale in scales {
        let stride = (scale / 2).max(1);
        let mut start = 0;
        loop {
            let end = (start + scale).min(frames);
            spans.push((start, end));
            if end == frames {
                break;
            }
            start += stride;
        }
    }
    spans.sort_unstable();
    spans.dedup();
    Ok(spans)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub u_tau: f64,
    pub a_tau: f64,
    pub nms_tiou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            u_tau: 0.6,
            a_tau: 0.5,
            nms_tiou: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Id,
    Ood,
    Background,
}

/// OOD when `u > u_τ` and `a > a_τ`, ID when `u ≤ u_τ` and `a > a_τ`,
/// background otherwise.
pub fn decide(u: f64, a: f64, u_tau: f64, a_tau: f64) -> Verdict {
    if a <= a_tau {
        Verdict::Background
    } else if u > u_tau {
        Verdict::Ood
    } else {
        Verdict::Id
    }
}

/// One scored anchor before the decision rule.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorProposal {
    pub anchor: (usize, usize),
    pub offsets: (f64, f64),
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Mean actionness over the anchor's frames.
    pub actionness: f64,
}

impl AnchorProposal {
    pub fn opinions(&self) -> Result<Vec<Opinion>, TensorError> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| evidence_to_opinion(a, b, BASE_RATE))
            .collect()
    }

    /// Arg-max class by expected probability (lowest index on ties) and its
    /// opinion.
    pub fn predicted(&self) -> Result<(usize, Opinion), TensorError> {
        let ops = self.opinions()?;
        ops.into_iter()
            .enumerate()
            .fold(None, |best: Option<(usize, Opinion)>, (c, o)| match best {
                Some((_, b)) if b.expected_p >= o.expected_p => best,
                _ => Some((c, o)),
            })
            .ok_or_else(|| TensorError::Contract("proposal without classes".into()))
    }

    /// `start' = t_s + ê_s·L`, `end' = t_e + ê_e·L`.
    pub fn refined(&self) -> (f64, f64) {
        let (s, e) = (self.anchor.0 as f64, self.anchor.1 as f64);
        let l = e - s;
        (s + self.offsets.0 * l, e + self.offsets.1 * l)
    }
}

/// A final detection; one JSON line per record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub verdict: Verdict,
    /// Arg-max ID class. For OOD verdicts this is the closest known class.
    pub class: usize,
    /// Expected probability of `class` for ID, uncertainty for OOD.
    pub score: f64,
    pub u: f64,
    pub a: f64,
}

/// Applies the decision rule. Returns `None` for degenerate refinements;
/// surviving spans are clamped to `[0, frames]`.
pub fn classify_proposal(
    video_id: &str,
    frames: usize,
    p: &AnchorProposal,
    th: &Thresholds,
) -> Result<Option<Detection>, TensorError> {
    let (s, e) = p.refined();
    if !(s < e) {
        return Ok(None);
    }
    let (s, e) = (s.max(0.0), e.min(frames as f64));
    if !(s < e) {
        return Ok(None);
    }
    let (class, op) = p.predicted()?;
    let verdict = decide(op.uncertainty, p.actionness, th.u_tau, th.a_tau);
    let score = match verdict {
        Verdict::Ood => op.uncertainty,
        _ => op.expected_p,
    };
    Ok(Some(Detection {
        video_id: video_id.to_string(),
        start: s,
        end: e,
        verdict,
        class,
        score,
        u: op.uncertainty,
        a: p.actionness,
    }))
}

/// Score descending, then start, end, verdict and class ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.start.total_cmp(&b.start))
        .then_with(|| a.end.total_cmp(&b.end))
        .then_with(|| a.verdict.cmp(&b.verdict))
        .then_with(|| a.class.cmp(&b.class))
        .then_with(|| a.video_id.cmp(&b.video_id))
}

fn nms_group(d: &Detection) -> (Verdict, Option<usize>) {
    match d.verdict {
        Verdict::Id => (Verdict::Id, Some(d.class)),
        v => (v, None),
    }
}

/// Greedy suppression at `tIoU ≥ threshold`, separately per ID class and
/// for all OOD detections of a video together.
pub fn nms(mut detections: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    detections.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        let suppressed = kept.iter().any(|k| {
            k.video_id == d.video_id
                && nms_group(k) == nms_group(&d)
                && overlap((k.start, k.end), (d.start, d.end)) >= threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Scores every anchor of a clip.
pub fn propose(model: &UaanModel, clip: &ObjectFeatureClip) -> Result<Vec<AnchorProposal>, UaanError> {
    let mut tape = Tape::new();
    let frames = model.forward_frames(&mut tape, clip)?;
    let actionness: Vec<f64> = tape
        .value(frames.actionness_logits)
        .data()
        .iter()
        .map(|&z| sigmoid(z))
        .collect();
    let anchors = generate_anchors(clip.frames, &model.config.anchor_scales)?;
    if anchors.is_empty() {
        return Ok(Vec::new());
    }
    let heads = model.proposal_heads(&mut tape, frames.fused.x, &anchors)?;
    let (alpha, beta, offsets) = (
        tape.value(heads.alpha),
        tape.value(heads.beta),
        tape.value(heads.offsets),
    );
    Ok(anchors
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| AnchorProposal {
            anchor: (s, e),
            offsets: (offsets.get(i, 0), offsets.get(i, 1)),
            alpha: alpha.row(i).to_vec(),
            beta: beta.row(i).to_vec(),
            actionness: actionness[s..e].iter().sum::<f64>() / (e - s) as f64,
        })
        .collect())
}

/// Full inference for one clip: proposals, decision rule, background
/// removal and NMS, in deterministic order.
pub fn detect(model: &UaanModel, clip: &ObjectFeatureClip, th: &Thresholds) -> Result<Vec<Detection>, UaanError> {
    let mut out = Vec::new();
    for p in propose(model, clip)? {
        if let Some(d) = classify_proposal(&clip.video_id, clip.frames, &p, th)? {
            if d.verdict != Verdict::Background {
                out.push(d);
            }
        }
    }
    Ok(nms(out, th.nms_tiou))
}

/// `detect` over many clips; detections come back grouped by clip in input
/// order.
pub fn detect_clips<'a>(
    model: &UaanModel,
    clips: impl IntoIterator<Item = &'a ObjectFeatureClip>,
    th: &Thresholds,
) -> Result<Vec<Detection>, UaanError> {
    let clips: Vec<&ObjectFeatureClip> = clips.into_iter().collect();
    let per_clip = clips
        .par_iter()
        .map(|c| detect(model, c, th))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

pub fn to_json_lines(detections: &[Detection]) -> String {
    let mut s = String::new();
    for d in detections {
        s.push_str(&serde_json::to_string(d).expect("detection serialises"));
        s.push('\n');
    }
    s
}

pub fn from_json_lines(text: &str) -> Result<Vec<Detection>, UaanError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(UaanError::from))
        .collect()
}
