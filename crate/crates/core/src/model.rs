//! The full network: encoder, two relation-graph branches, fusion and heads,
//! plus the per-clip training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, ObjectFeatureClip};
use crate::detector::generate_anchors;
use crate::encoder::{encode_objects, EncoderParams};
use crate::error::{TensorError, UaanError};
use crate::fusion::{fuse, FusedSequence, FusionParams};
use crate::graph::{gcn_forward, GraphBranchParams};
use crate::metrics::overlap;
use crate::objectives::{
    actionness_logits, affinity_loss, beta_loss, boundary_offsets, evidence, final_loss,
    localization_loss, EvidenceFn, HeadsParams, LocalizationTarget, LossWeights,
};
use crate::params::{Param, ParamInit, Parameters};
use crate::tensor::{Tape, Tensor, Var};

/// Anchors overlapping an action segment at least this much are positives.
pub const POSITIVE_TIOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub width: usize,
    pub classes: usize,
    pub evidence_fn: EvidenceFn,
    pub anchor_scales: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UaanModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub appearance_graph: GraphBranchParams,
    pub motion_graph: GraphBranchParams,
    pub fusion: FusionParams,
    pub heads: HeadsParams,
}

impl Parameters for UaanModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.encoder.visit(f);
        self.appearance_graph.visit(f);
        self.motion_graph.visit(f);
        self.fusion.visit(f);
        self.heads.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.appearance_graph.visit_mut(f);
        self.motion_graph.visit_mut(f);
        self.fusion.visit_mut(f);
        self.heads.visit_mut(f);
    }
}

/// Frame-level outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct FrameOutputs {
    pub fused: FusedSequence,
    /// `T×1`
    pub actionness_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ProposalOutputs {
    /// `n×K`
    pub alpha: Var,
    pub beta: Var,
    /// `n×2`
    pub offsets: Var,
}

impl UaanModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, UaanError> {
        if config.width == 0 || config.feature_dim == 0 || config.classes == 0 {
            return Err(UaanError::Contract(format!("degenerate model config {config:?}")));
        }
        if config.anchor_scales.is_empty() || config.anchor_scales.contains(&0) {
            return Err(UaanError::Contract(format!(
                "anchor scales must be non-empty and positive: {:?}",
                config.anchor_scales
            )));
        }
        let mut init = ParamInit::new(ChaCha8Rng::seed_from_u64(seed));
        let d = config.width;
        Ok(Self {
            encoder: EncoderParams::new(&mut init, config.feature_dim, d),
            appearance_graph: GraphBranchParams::new(&mut init, "graph.appearance", d),
            motion_graph: GraphBranchParams::new(&mut init, "graph.motion", d),
            fusion: FusionParams::new(&mut init, d),
            heads: HeadsParams::new(&mut init, d, 3 * d, config.classes, config.evidence_fn),
            config,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn forward_frames(&self, tape: &mut Tape, clip: &ObjectFeatureClip) -> Result<FrameOutputs, TensorError> {
        let objects = encode_objects(tape, clip, &self.encoder)?;
        let fa = gcn_forward(tape, objects.appearance, &self.appearance_graph)?;
        let fm = gcn_forward(tape, objects.motion, &self.motion_graph)?;
        let fused = fuse(tape, fa, fm, clip.objects, &self.fusion)?;
        let actionness_logits = actionness_logits(tape, fused.x, &self.heads)?;
        Ok(FrameOutputs {
            fused,
            actionness_logits,
        })
    }

    /// Evidence and boundary offsets for anchors `[s, e)`. Each proposal is
    /// described by the mean frame feature inside the span and the means
    /// over the `L` frames on either side (zero past the clip edge), so
    /// the heads can tell a span that covers an action from one inside it.
    pub fn proposal_heads(
        &self,
        tape: &mut Tape,
        x: Var,
        spans: &[(usize, usize)],
    ) -> Result<ProposalOutputs, TensorError> {
        let (t, d) = (tape.value(x).rows(), tape.value(x).cols());
        let pad = tape.constant(Tensor::zeros(&[1, d]));
        let padded = tape.concat_rows(&[x, pad])?;
        let or_pad = |r: std::ops::Range<usize>| if r.is_empty() { vec![t] } else { r.collect() };
        let (mut inner, mut left, mut right) = (Vec::new(), Vec::new(), Vec::new());
        for &(s, e) in spans {
            let ctx = e - s;
            inner.push((s..e).collect());
            left.push(or_pad(s.saturating_sub(ctx)..s));
            right.push(or_pad(e..(e + ctx).min(t)));
        }
        let parts = [
            tape.segment_mean(padded, inner)?,
            tape.segment_mean(padded, left)?,
            tape.segment_mean(padded, right)?,
        ];
        let pooled = tape.concat_cols(&parts)?;
        let (alpha, beta) = evidence(tape, pooled, &self.heads)?;
        let offsets = boundary_offsets(tape, pooled, &self.heads)?;
        Ok(ProposalOutputs { alpha, beta, offsets })
    }
}

/// A positive anchor: index into the anchor list, ID class and target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositiveAnchor {
    pub anchor: usize,
    pub class: usize,
    pub target: LocalizationTarget,
}

fn best_match(span: (f64, f64), ann: &Annotation) -> Option<(usize, (f64, f64), f64)> {
    ann.segments
        .iter()
        .filter_map(|seg| seg.label.class().map(|c| (c, seg.span())))
        .map(|(c, g)| (c, g, overlap(span, g)))
        .max_by(|a, b| a.2.total_cmp(&b.2))
}

/// Matches each anchor to the ID segment it overlaps most; those at
/// `tIoU ≥ 0.5` become positives.
pub fn assign_targets(anchors: &[(usize, usize)], ann: &Annotation) -> Vec<PositiveAnchor> {
    matched(anchors, ann, |io| io >= POSITIVE_TIOU)
}

/// Anchors that overlap an ID segment without reaching the positive
/// threshold. They only train the boundary regressor, which otherwise never
/// sees a badly placed anchor and cannot pull one onto the action.
pub fn partial_targets(anchors: &[(usize, usize)], ann: &Annotation) -> Vec<PositiveAnchor> {
    matched(anchors, ann, |io| io > 0.0 && io < POSITIVE_TIOU)
}

fn matched(anchors: &[(usize, usize)], ann: &Annotation, keep: impl Fn(f64) -> bool) -> Vec<PositiveAnchor> {
    anchors
        .iter()
        .enumerate()
        .filter_map(|(i, &(s, e))| {
            let span = (s as f64, e as f64);
            best_match(span, ann)
                .filter(|m| keep(m.2))
                .map(|(class, truth, _)| PositiveAnchor {
                    anchor: i,
                    class,
                    target: LocalizationTarget { anchor: span, truth },
                })
        })
        .collect()
}

/// Loss components of one clip, as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct ClipLosses {
    pub abs: Var,
    pub beta: Var,
    pub reg: Var,
    pub diou: Var,
    pub local: Var,
    pub actionness: Var,
    /// `γ1·L_ABS + γ2·L_Beta + γ3·L_Local`
    pub final_loss: Var,
    /// `final_loss` plus the weighted actionness term; what is optimised.
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub abs: f64,
    pub beta: f64,
    pub reg: f64,
    pub diou: f64,
    pub actionness: f64,
    pub final_loss: f64,
    pub total: f64,
}

impl ClipLosses {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).item().unwrap_or(f64::NAN);
        LossValues {
            abs: v(self.abs),
            beta: v(self.beta),
            reg: v(self.reg),
            diou: v(self.diou),
            actionness: v(self.actionness),
            final_loss: v(self.final_loss),
            total: v(self.total),
        }
    }
}

pub fn clip_loss(
    tape: &mut Tape,
    model: &UaanModel,
    clip: &ObjectFeatureClip,
    ann: &Annotation,
    w: &LossWeights,
) -> Result<ClipLosses, UaanError> {
    if ann.has_ood() {
        return Err(UaanError::Contract(format!(
            "{}: training clip carries an OOD segment",
            clip.video_id
        )));
    }
    let frames = model.forward_frames(tape, clip)?;
    let x = frames.fused.x;
    let abs = affinity_loss(tape, x, &ann.frame_action_mask, w)?.total;
    let mask: Vec<f64> = ann.frame_action_mask.iter().map(|&m| m as u8 as f64).collect();
    let actionness = tape.bce_with_logits(frames.actionness_logits, mask)?;

    let anchors = generate_anchors(clip.frames, &model.config.anchor_scales)?;
    let positives = assign_targets(&anchors, ann);
    let partial = partial_targets(&anchors, ann);
    let k = model.config.classes;
    let mut labels = vec![0.0; positives.len() * k];
    for (i, p) in positives.iter().enumerate() {
        labels[i * k + p.class] = 1.0;
    }
    // positives first: they get the Beta loss, every row gets regression
    let matched: Vec<&PositiveAnchor> = positives.iter().chain(&partial).collect();
    let (beta, loc) = if matched.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        let loc = localization_loss(tape, empty, &[], w)?;
        (zero, loc)
    } else {
        let spans: Vec<(usize, usize)> = matched.iter().map(|p| anchors[p.anchor]).collect();
        let targets: Vec<LocalizationTarget> = matched.iter().map(|p| p.target).collect();
        let heads = model.proposal_heads(tape, x, &spans)?;
        let npos = positives.len();
        let beta = if npos == 0 {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let a = tape.gather_rows(heads.alpha, (0..npos).collect())?;
            let b = tape.gather_rows(heads.beta, (0..npos).collect())?;
            beta_loss(tape, a, b, &labels)?
        };
        let loc = localization_loss(tape, heads.offsets, &targets, w)?;
        (beta, loc)
    };
    let final_loss = final_loss(tape, abs, beta, loc.total, w)?;
    let weighted = tape.scale(actionness, w.actionness)?;
    let total = tape.add(final_loss, weighted)?;
    Ok(ClipLosses {
        abs,
        beta,
        reg: loc.reg,
        diou: loc.diou,
        local: loc.total,
        actionness,
        final_loss,
        total,
    })
}
