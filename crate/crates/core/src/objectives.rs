//! Prediction heads and training objectives: action-background affinity with
//! hard-pair mining, evidential Beta classification, boundary regression and
//! the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::params::{Ffn, Param, ParamInit, Parameters};
use crate::tensor::{diou_terms, Tape, Tensor, Var};

/// Prior belief mass for each per-class binary opinion.
pub const BASE_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceFn {
    #[default]
    Softplus,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// DIoU weight inside the localization loss.
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Weight of the per-frame actionness cross-entropy.
    pub actionness: f64,
    pub tau_bb: f64,
    pub tau_aa: f64,
    pub tau_dif: f64,
    pub a_tau: f64,
    /// Pairs kept per affinity term by hard-example mining.
    pub ohem_pairs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma0: 0.8,
            gamma1: 0.15,
            gamma2: 0.3,
            gamma3: 0.2,
            actionness: 1.0,
            tau_bb: 0.3,
            tau_aa: 0.4,
            tau_dif: 0.4,
            a_tau: 0.5,
            ohem_pairs: 64,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let gammas = [self.gamma0, self.gamma1, self.gamma2, self.gamma3, self.actionness];
        if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(format!("loss weights must be finite and non-negative: {gammas:?}"));
        }
        for (name, v) in [
            ("tau_bb", self.tau_bb),
            ("tau_aa", self.tau_aa),
            ("tau_dif", self.tau_dif),
            ("a_tau", self.a_tau),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name}={v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadsParams {
    pub classes: usize,
    pub evidence_fn: EvidenceFn,
    /// `d -> 1`, sigmoid applied outside
    pub actionness: Ffn,
    /// `pooled -> 2K` pre-evidence, positive then negative
    pub evidence: Ffn,
    /// `pooled -> 2` boundary offsets
    pub boundary: Ffn,
}

impl HeadsParams {
    /// `d` is the frame feature width and `pooled` the width of a proposal
    /// feature.
    pub fn new(init: &mut ParamInit, d: usize, pooled: usize, classes: usize, evidence_fn: EvidenceFn) -> Self {
        Self {
            classes,
            evidence_fn,
            actionness: Ffn::new(init, "heads.actionness", d, d, 1),
            evidence: Ffn::new(init, "heads.evidence", pooled, d, 2 * classes),
            boundary: Ffn::new(init, "heads.boundary", pooled, d, 2),
        }
    }
}

impl Parameters for HeadsParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.actionness.visit(f);
        self.evidence.visit(f);
        self.boundary.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.actionness.visit_mut(f);
        self.evidence.visit_mut(f);
        self.boundary.visit_mut(f);
    }
}

/// Per-frame actionness logits, `T×1`.
pub fn actionness_logits(tape: &mut Tape, x: Var, heads: &HeadsParams) -> Result<Var, TensorError> {
    heads.actionness.forward(tape, x)
}

/// Per-frame actionness `â_t ∈ [0, 1]`, `T×1`.
pub fn actionness_scores(tape: &mut Tape, x: Var, heads: &HeadsParams) -> Result<Var, TensorError> {
    let z = actionness_logits(tape, x, heads)?;
    tape.sigmoid(z)
}

/// `(α, β)`, each `n×K` and `≥ 1`, from pooled proposal features.
pub fn evidence(tape: &mut Tape, pooled: Var, heads: &HeadsParams) -> Result<(Var, Var), TensorError> {
    let h = heads.evidence.forward(tape, pooled)?;
    let e = match heads.evidence_fn {
        EvidenceFn::Softplus => tape.softplus(h)?,
        EvidenceFn::Relu => tape.relu(h)?,
    };
    let e = tape.add_scalar(e, 1.0)?;
    let alpha = tape.slice_cols(e, 0, heads.classes)?;
    let beta = tape.slice_cols(e, heads.classes, heads.classes)?;
    Ok((alpha, beta))
}

/// Predicted boundary offsets `(ê_s, ê_e)`, `n×2`, in anchor lengths.
pub fn boundary_offsets(tape: &mut Tape, pooled: Var, heads: &HeadsParams) -> Result<Var, TensorError> {
    heads.boundary.forward(tape, pooled)
}

#[derive(Clone, Copy, Debug)]
pub struct AffinityLoss {
    pub background: Var,
    pub action: Var,
    pub mixed: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PairKind {
    Background,
    Action,
    Mixed,
}

/// Frame-pair cosine hinge losses. Pairs are unordered `t1 < t2`, grouped by
/// the mask; each group keeps its `ohem_pairs` largest hinge values. A group
/// with no pairs contributes zero.
pub fn affinity_loss(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    w: &LossWeights,
) -> Result<AffinityLoss, TensorError> {
    let t = tape.value(x).rows();
    if mask.len() != t {
        return Err(TensorError::Dimension {
            op: "affinity_loss",
            detail: format!("{t} frames, mask of {}", mask.len()),
        });
    }
    if t < 2 {
        return Err(TensorError::Contract(format!("affinity loss needs T >= 2, got {t}")));
    }
    let xn = tape.l2_normalize_rows(x)?;
    let cos = tape.matmul_nt(xn, xn)?;

    let mut terms = Vec::with_capacity(3);
    for kind in [PairKind::Background, PairKind::Action, PairKind::Mixed] {
        let c = tape.value(cos);
        let mut pairs: Vec<(usize, f64)> = Vec::new();
        for i in 0..t {
            for j in i + 1..t {
                let k = match (mask[i], mask[j]) {
                    (false, false) => PairKind::Background,
                    (true, true) => PairKind::Action,
                    _ => PairKind::Mixed,
                };
                if k != kind {
                    continue;
                }
                let v = c.get(i, j);
                let hinge = match kind {
                    PairKind::Background => w.tau_bb - v,
                    PairKind::Action => w.tau_aa - v,
                    PairKind::Mixed => v - w.tau_dif,
                };
                pairs.push((i * t + j, hinge));
            }
        }
        if pairs.is_empty() {
            terms.push(tape.constant(Tensor::scalar(0.0)));
            continue;
        }
        // stable: equal hinges keep frame order
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
        pairs.truncate(w.ohem_pairs.max(1));
        let index: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let v = tape.gather(cos, index)?;
        let h = match kind {
            PairKind::Background => {
                let n = tape.scale(v, -1.0)?;
                tape.add_scalar(n, w.tau_bb)?
            }
            PairKind::Action => {
                let n = tape.scale(v, -1.0)?;
                tape.add_scalar(n, w.tau_aa)?
            }
            PairKind::Mixed => tape.add_scalar(v, -w.tau_dif)?,
        };
        let h = tape.relu(h)?;
        terms.push(tape.sum(h)?);
    }
    let s = tape.add(terms[0], terms[1])?;
    let s = tape.add(s, terms[2])?;
    let total = tape.scale(s, 1.0 / 3.0)?;
    Ok(AffinityLoss {
        background: terms[0],
        action: terms[1],
        mixed: terms[2],
        total,
    })
}

/// Subjective-logic opinion of one binary Beta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Opinion {
    pub belief: f64,
    pub disbelief: f64,
    pub uncertainty: f64,
    pub base_rate: f64,
    pub expected_p: f64,
}

pub fn evidence_to_opinion(alpha: f64, beta: f64, base_rate: f64) -> Result<Opinion, TensorError> {
    if !(alpha >= 1.0 && beta >= 1.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(TensorError::Contract(format!(
            "opinion needs alpha, beta >= 1, got ({alpha}, {beta})"
        )));
    }
    if !(0.0..=1.0).contains(&base_rate) {
        return Err(TensorError::Contract(format!("base rate {base_rate} outside [0, 1]")));
    }
    let s = alpha + beta;
    let belief = (alpha - 1.0) / s;
    let uncertainty = 2.0 / s;
    Ok(Opinion {
        belief,
        disbelief: (beta - 1.0) / s,
        uncertainty,
        base_rate,
        expected_p: belief + base_rate * uncertainty,
    })
}

/// Bayes risk of binary cross-entropy under `Beta(α, β)`, summed over rows
/// and averaged over the `K` classes. Zero rows give zero.
pub fn beta_loss(tape: &mut Tape, alpha: Var, beta: Var, labels: &[f64]) -> Result<Var, TensorError> {
    let shape = tape.value(alpha).shape().to_vec();
    if tape.value(beta).shape() != shape.as_slice() || labels.len() != tape.value(alpha).len() {
        return Err(TensorError::Dimension {
            op: "beta_loss",
            detail: format!(
                "alpha {shape:?}, beta {:?}, {} labels",
                tape.value(beta).shape(),
                labels.len()
            ),
        });
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Contract(format!("label {y} not in {{0, 1}}")));
    }
    if labels.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let k = *shape.last().unwrap_or(&1);
    let y = tape.constant(Tensor::new(shape.clone(), labels.to_vec())?);
    let not_y = tape.constant(Tensor::new(shape, labels.iter().map(|y| 1.0 - y).collect())?);
    let total = tape.add(alpha, beta)?;
    let psi_total = tape.digamma(total)?;
    let psi_a = tape.digamma(alpha)?;
    let psi_b = tape.digamma(beta)?;
    let pos = tape.mul(y, psi_a)?;
    let neg = tape.mul(not_y, psi_b)?;
    let r = tape.sub(psi_total, pos)?;
    let r = tape.sub(r, neg)?;
    let s = tape.sum(r)?;
    tape.scale(s, 1.0 / k as f64)
}

/// One-dimensional distance IoU. An inverted prediction counts as zero
/// length.
pub fn diou_1d(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    diou_terms(pred.0, pred.1, truth).0
}

/// A positive anchor and the ground-truth segment it is matched to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationTarget {
    pub anchor: (f64, f64),
    pub truth: (f64, f64),
}

impl LocalizationTarget {
    pub fn anchor_len(&self) -> f64 {
        self.anchor.1 - self.anchor.0
    }

    /// Truth boundary errors `(e_s, e_e)` in anchor lengths.
    pub fn offsets(&self) -> (f64, f64) {
        let l = self.anchor_len();
        ((self.truth.0 - self.anchor.0) / l, (self.truth.1 - self.anchor.1) / l)
    }

    pub fn refine(&self, offsets: (f64, f64)) -> (f64, f64) {
        let l = self.anchor_len();
        (self.anchor.0 + offsets.0 * l, self.anchor.1 + offsets.1 * l)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LocalizationLoss {
    pub reg: Var,
    pub diou: Var,
    pub total: Var,
}

/// `L_reg` (smooth-L1 on offsets), `L_DIoU` on refined segments and
/// `L_reg + γ0·L_DIoU`, each averaged over the positives. No positives
/// gives zeros.
pub fn localization_loss(
    tape: &mut Tape,
    pred_offsets: Var,
    targets: &[LocalizationTarget],
    w: &LossWeights,
) -> Result<LocalizationLoss, TensorError> {
    let n = targets.len();
    if tape.value(pred_offsets).shape() != [n, 2] {
        return Err(TensorError::Dimension {
            op: "localization_loss",
            detail: format!("offsets {:?} for {n} targets", tape.value(pred_offsets).shape()),
        });
    }
    if n == 0 {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok(LocalizationLoss { reg: z, diou: z, total: z });
    }
    let truth: Vec<f64> = targets
        .iter()
        .flat_map(|t| {
            let (s, e) = t.offsets();
            [s, e]
        })
        .collect();
    let truth = tape.constant(Tensor::matrix(n, 2, truth)?);
    let diff = tape.sub(pred_offsets, truth)?;
    let sl1 = tape.smooth_l1(diff, 1.0)?;
    let s = tape.sum(sl1)?;
    let reg = tape.scale(s, 1.0 / n as f64)?;

    let lens = tape.constant(Tensor::matrix(
        n,
        2,
        targets.iter().flat_map(|t| [t.anchor_len(); 2]).collect(),
    )?);
    let anchors = tape.constant(Tensor::matrix(
        n,
        2,
        targets.iter().flat_map(|t| [t.anchor.0, t.anchor.1]).collect(),
    )?);
    let scaled = tape.mul(pred_offsets, lens)?;
    let refined = tape.add(scaled, anchors)?;
    let d = tape.diou_1d(refined, targets.iter().map(|t| t.truth).collect())?;
    let m = tape.mean(d)?;
    let neg = tape.scale(m, -1.0)?;
    let diou = tape.add_scalar(neg, 1.0)?;

    let weighted = tape.scale(diou, w.gamma0)?;
    let total = tape.add(reg, weighted)?;
    Ok(LocalizationLoss { reg, diou, total })
}

/// `γ1·L_ABS + γ2·L_Beta + γ3·L_Local`
pub fn final_loss_value(abs: f64, beta: f64, local: f64, w: &LossWeights) -> f64 {
    w.gamma1 * abs + w.gamma2 * beta + w.gamma3 * local
}

pub fn final_loss(
    tape: &mut Tape,
    abs: Var,
    beta: Var,
    local: Var,
    w: &LossWeights,
) -> Result<Var, TensorError> {
    let a = tape.scale(abs, w.gamma1)?;
    let b = tape.scale(beta, w.gamma2)?;
    let l = tape.scale(local, w.gamma3)?;
    let s = tape.add(a, b)?;
    tape.add(s, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::tensor::smooth_l1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::beta::ln_beta;

    /// Tanh-sinh quadrature of `E_{p~Beta(α,β)}[BCE(y, p)]` over (0, 1);
    /// `p` and `1 − p` are formed separately so the log endpoints stay
    /// accurate.
    fn bayes_risk_quadrature(y: f64, a: f64, b: f64) -> f64 {
        let h: f64 = 1.0 / 64.0;
        let ln_norm = ln_beta(a, b);
        let mut total = 0.0;
        let mut k: f64 = -6.0 * 64.0;
        while k <= 6.0 * 64.0 {
            let t = k * h;
            let u = std::f64::consts::FRAC_PI_2 * t.sinh();
            let cu = u.cosh();
            let weight = std::f64::consts::FRAC_PI_2 * t.cosh() / (cu * cu);
            // p = (1 + tanh u) / 2, q = (1 − tanh u) / 2
            let (ln_p, ln_q) = (u - (2.0 * cu).ln(), -u - (2.0 * cu).ln());
            let density = ((a - 1.0) * ln_p + (b - 1.0) * ln_q - ln_norm).exp();
            let bce = -(y * ln_p + (1.0 - y) * ln_q);
            let term = bce * density * weight * 0.5;
            if term.is_finite() {
                total += term;
            }
            k += 1.0;
        }
        total * h
    }

    fn beta_loss_value(alpha: &[f64], beta: &[f64], y: &[f64], k: usize) -> f64 {
        let mut tape = Tape::new();
        let n = alpha.len() / k;
        let a = tape.constant(Tensor::matrix(n, k, alpha.to_vec()).unwrap());
        let b = tape.constant(Tensor::matrix(n, k, beta.to_vec()).unwrap());
        let l = beta_loss(&mut tape, a, b, y).unwrap();
        tape.value(l).item().unwrap()
    }

    fn heads(seed: u64, d: usize, k: usize) -> HeadsParams {
        HeadsParams::new(
            &mut ParamInit::new(ChaCha8Rng::seed_from_u64(seed)),
            d,
            d,
            k,
            EvidenceFn::Softplus,
        )
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.gamma0, w.gamma1, w.gamma2, w.gamma3), (0.8, 0.15, 0.3, 0.2));
        assert_eq!((w.tau_bb, w.tau_aa, w.tau_dif, w.a_tau), (0.3, 0.4, 0.4, 0.5));
        assert!(w.validate().is_ok());
        assert!(LossWeights { gamma2: -1.0, ..w.clone() }.validate().is_err());
        assert!(LossWeights { tau_dif: 1.5, ..w }.validate().is_err());
    }

    #[test]
    fn zero_actionness_head_gives_half() {
        let mut h = heads(0, 4, 3);
        h.actionness.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64).collect()).unwrap());
        let a = actionness_scores(&mut tape, x, &h).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn actionness_monotone_in_logit() {
        let mut h = heads(0, 2, 3);
        h.actionness.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
        // output bias alone drives the logit
        let mut last = 0.0;
        for bias in [-3.0, -1.0, 0.0, 0.5, 4.0] {
            h.actionness.b2.value.data_mut()[0] = bias;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(1, 2, vec![0.3, 0.1]).unwrap());
            let a = actionness_scores(&mut tape, x, &h).unwrap();
            let v = tape.value(a).data()[0];
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn actionness_head_gradients() {
        let h = heads(2, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::matrix(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mask = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        let r = check_gradients(
            &h,
            |t, h| {
                let xv = t.constant(x.clone());
                let z = actionness_logits(t, xv, h)?;
                Ok(t.bce_with_logits(z, mask.clone())?)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r.worst());
    }

    #[test]
    fn evidence_is_at_least_one() {
        for f in [EvidenceFn::Softplus, EvidenceFn::Relu] {
            let mut h = heads(3, 4, 3);
            h.evidence_fn = f;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(2, 4, vec![5.0, -5.0, 3.0, -2.0, 0.0, 1.0, -9.0, 2.0]).unwrap());
            let (a, b) = evidence(&mut tape, x, &h).unwrap();
            assert_eq!(tape.value(a).shape(), &[2, 3]);
            assert!(tape.value(a).data().iter().chain(tape.value(b).data()).all(|&v| v >= 1.0));
        }
    }

    fn affinity(x: Tensor, mask: &[bool], w: &LossWeights) -> (f64, f64, f64, f64) {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let l = affinity_loss(&mut tape, xv, mask, w).unwrap();
        let g = |v: Var| tape.value(v).item().unwrap();
        (g(l.background), g(l.action), g(l.mixed), g(l.total))
    }

    #[test]
    fn identical_background_frames_cost_nothing() {
        let x = Tensor::from_rows(&vec![vec![0.3, 0.4, 0.5]; 4]).unwrap();
        let (bg, act, mix, total) = affinity(x, &[false; 4], &LossWeights::default());
        assert_eq!((bg, act, mix, total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn orthogonal_background_pair() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let (bg, _, _, total) = affinity(x, &[false, false], &LossWeights::default());
        assert!((bg - 0.3).abs() < 1e-15);
        assert!((total - 0.1).abs() < 1e-15);
    }

    #[test]
    fn action_equal_to_background() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let (_, _, mix, _) = affinity(x, &[true, false], &LossWeights::default());
        assert!((mix - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ohem_keeps_largest_violations() {
        // background frames at angles 0, 80°, 90°, 180°: six pairs, keep two
        let deg = |a: f64| vec![a.to_radians().cos(), a.to_radians().sin()];
        let x = Tensor::from_rows(&[deg(0.0), deg(80.0), deg(90.0), deg(180.0)]).unwrap();
        let w = LossWeights { ohem_pairs: 2, ..Default::default() };
        let (bg, _, _, _) = affinity(x, &[false; 4], &w);
        // the two opposite pairs, (0°,180°) and (80°,180°) hinge hardest
        let cos = |a: f64| a.to_radians().cos();
        let expect = (0.3 - cos(180.0)) + (0.3 - cos(100.0));
        assert!((bg - expect).abs() < 1e-12, "{bg} vs {expect}");
    }

    #[test]
    fn affinity_needs_two_frames() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(affinity_loss(&mut tape, x, &[true], &LossWeights::default()).is_err());
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(affinity_loss(&mut tape, x, &[true], &LossWeights::default()).is_err());
    }

    #[test]
    fn opinion_examples() {
        let o = evidence_to_opinion(1.0, 1.0, BASE_RATE).unwrap();
        assert_eq!((o.belief, o.disbelief, o.uncertainty), (0.0, 0.0, 1.0));
        let o = evidence_to_opinion(2.0, 2.0, BASE_RATE).unwrap();
        assert_eq!((o.belief, o.disbelief, o.uncertainty), (0.25, 0.25, 0.5));
        let o = evidence_to_opinion(9.0, 1.0, BASE_RATE).unwrap();
        assert!((o.belief - 0.8).abs() < 1e-15 && o.disbelief == 0.0 && (o.uncertainty - 0.2).abs() < 1e-15);
        assert!((o.expected_p - 0.9).abs() < 1e-15);
        assert!(evidence_to_opinion(0.5, 2.0, BASE_RATE).is_err());
        assert!(evidence_to_opinion(2.0, 2.0, 1.5).is_err());
    }

    #[test]
    fn beta_loss_examples() {
        assert!((beta_loss_value(&[1.0], &[1.0], &[1.0], 1) - 1.0).abs() < 1e-12);
        assert!(beta_loss_value(&[1e4], &[1.0], &[1.0], 1) < 1e-3);
        // ψ(8) − ψ(3) = 1/3 + 1/4 + 1/5 + 1/6 + 1/7
        let v = beta_loss_value(&[3.0], &[5.0], &[1.0], 1);
        let quad = bayes_risk_quadrature(1.0, 3.0, 5.0);
        assert!((v - quad).abs() < 1e-9, "{v} vs {quad}");
        assert!((v - 153.0 / 140.0).abs() < 1e-12);
    }

    #[test]
    fn beta_loss_averages_over_classes() {
        let a = [2.0, 3.0, 1.5, 4.0];
        let b = [1.0, 2.0, 6.0, 1.2];
        let y = [1.0, 0.0, 0.0, 1.0];
        let v = beta_loss_value(&a, &b, &y, 2);
        let expect: f64 = (0..4).map(|i| bayes_risk_quadrature(y[i], a[i], b[i])).sum::<f64>() / 2.0;
        assert!((v - expect).abs() < 1e-8);
    }

    #[test]
    fn beta_loss_rejects_soft_labels() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        assert!(beta_loss(&mut tape, a, a, &[0.5]).is_err());
        let e = tape.constant(Tensor::zeros(&[0, 3]));
        let l = beta_loss(&mut tape, e, e, &[]).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.0));
    }

    #[test]
    fn diou_examples() {
        assert_eq!(diou_1d((1.0, 3.0), (1.0, 3.0)), 1.0);
        assert!((diou_1d((0.0, 2.0), (4.0, 6.0)) + 4.0 / 9.0).abs() < 1e-12);
        assert!((smooth_l1(0.3, 1.0) - 0.045).abs() < 1e-15);
        assert_eq!(smooth_l1(1.5, 1.0), 1.0);
    }

    fn localization_values(offsets: &[f64], targets: &[LocalizationTarget]) -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(targets.len(), 2, offsets.to_vec()).unwrap());
        let l = localization_loss(&mut tape, p, targets, &LossWeights::default()).unwrap();
        let g = |v: Var| tape.value(v).item().unwrap();
        (g(l.reg), g(l.diou), g(l.total))
    }

    #[test]
    fn perfect_localization_costs_nothing() {
        let t = LocalizationTarget { anchor: (4.0, 12.0), truth: (5.0, 11.0) };
        let (s, e) = t.offsets();
        assert_eq!((s, e), (0.125, -0.125));
        assert_eq!(t.refine((s, e)), (5.0, 11.0));
        let (reg, diou, total) = localization_values(&[s, e], &[t]);
        assert_eq!((reg, diou, total), (0.0, 0.0, 0.0));
        let (reg, _, _) = localization_values(&[], &[]);
        assert_eq!(reg, 0.0);
    }

    #[test]
    fn localization_matches_hand_computation() {
        let t = [
            LocalizationTarget { anchor: (0.0, 2.0), truth: (4.0, 6.0) },
            LocalizationTarget { anchor: (0.0, 4.0), truth: (0.0, 4.0) },
        ];
        // first row predicts zero offsets, so its segment stays at [0, 2]
        let (reg, diou, total) = localization_values(&[0.0, 0.0, 0.3, 0.0], &t);
        let reg_expect = ((2.0 - 0.5) + (2.0 - 0.5) + 0.045) / 2.0;
        // second row refines to [1.2, 4]: IoU 0.7, centre gap 0.6, hull 4
        let d2 = 0.7 - 0.36 / 16.0;
        let diou_expect = ((1.0 + 4.0 / 9.0) + (1.0 - d2)) / 2.0;
        assert!((reg - reg_expect).abs() < 1e-12);
        assert!((diou - diou_expect).abs() < 1e-12);
        assert!((total - (reg_expect + 0.8 * diou_expect)).abs() < 1e-12);
    }

    #[test]
    fn final_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((final_loss_value(1.0, 1.0, 1.0, &w) - 0.65).abs() < 1e-12);
        let zero = LossWeights { gamma1: 0.0, gamma2: 0.0, gamma3: 0.0, ..w.clone() };
        assert_eq!(final_loss_value(3.0, 2.0, 5.0, &zero), 0.0);

        let mut tape = Tape::new();
        let abs = tape.leaf(Tensor::scalar(1.0), true);
        let beta = tape.leaf(Tensor::scalar(1.0), true);
        let local = tape.leaf(Tensor::scalar(1.0), true);
        let l = final_loss(&mut tape, abs, beta, local, &w).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.65).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(abs).unwrap().item(), Some(0.15));
        assert_eq!(g.get(beta).unwrap().item(), Some(0.3));
        assert_eq!(g.get(local).unwrap().item(), Some(0.2));
    }

    proptest! {
        #[test]
        fn opinion_is_normalised(a in 1.0f64..50.0, b in 1.0f64..50.0, base in 0.0f64..=1.0) {
            let o = evidence_to_opinion(a, b, base).unwrap();
            prop_assert!((o.belief + o.disbelief + o.uncertainty - 1.0).abs() < 1e-12);
            prop_assert!((o.expected_p - (o.belief + base * o.uncertainty)).abs() < 1e-15);
            for v in [o.belief, o.disbelief, o.uncertainty, o.expected_p] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn beta_loss_equals_quadrature(y in 0u8..2, a in 1.0f64..20.0, b in 1.0f64..20.0) {
            let y = y as f64;
            let v = beta_loss_value(&[a], &[b], &[y], 1);
            prop_assert!((v - bayes_risk_quadrature(y, a, b)).abs() < 1e-6);
        }

        #[test]
        fn diou_bounds(s in -10.0f64..10.0, len in 0.01f64..10.0, gs in -10.0f64..10.0, glen in 0.01f64..10.0) {
            let d = diou_1d((s, s + len), (gs, gs + glen));
            prop_assert!(d > -1.0 && d <= 1.0);
            prop_assert!((diou_1d((gs, gs + glen), (gs, gs + glen)) - 1.0).abs() < 1e-12);
            prop_assert!((0.0..2.0).contains(&(1.0 - d)));
        }

        #[test]
        fn affinity_is_symmetric_and_non_negative(seed in any::<u64>(), t in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mask: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.5)).collect();
            let w = LossWeights::default();
            let fwd = affinity(Tensor::from_rows(&rows).unwrap(), &mask, &w);
            // reversing frame order swaps every pair (t1, t2) into (t2, t1)
            let rev_rows: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
            let rev_mask: Vec<bool> = mask.iter().rev().copied().collect();
            let rev = affinity(Tensor::from_rows(&rev_rows).unwrap(), &rev_mask, &w);
            prop_assert!((fwd.3 - rev.3).abs() < 1e-12);
            prop_assert!(fwd.0 >= 0.0 && fwd.1 >= 0.0 && fwd.2 >= 0.0);
        }
    }

    #[test]
    fn affinity_zero_when_all_pairs_satisfied() {
        // two tight clusters on orthogonal axes
        let x = Tensor::from_rows(&[
            vec![1.0, 0.05],
            vec![1.0, -0.05],
            vec![0.05, 1.0],
            vec![-0.05, 1.0],
        ])
        .unwrap();
        let (bg, act, mix, total) = affinity(x, &[false, false, true, true], &LossWeights::default());
        assert_eq!((bg, act, mix, total), (0.0, 0.0, 0.0, 0.0));
    }
}
