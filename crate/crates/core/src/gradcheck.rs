//! Central finite-difference check of analytic parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Annotation, Label, ObjectFeatureClip, Segment};
use crate::detector::DEFAULT_ANCHOR_SCALES;
use crate::error::UaanError;
use crate::model::{clip_loss, ModelConfig, UaanModel};
use crate::objectives::{EvidenceFn, LossWeights};
use crate::params::Parameters;
use crate::tensor::{OpKind, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero compare on an absolute scale. Central differences on
    /// an O(1) loss carry roundoff near 1e-16/eps, which this must sit well
    /// above.
    pub floor: f64,
    /// Corrupts one backward rule; used to prove the check catches bugs.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-5,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `d loss / d p` for every entry of every parameter against
/// `(L(p+ε) − L(p−ε)) / 2ε`.
pub fn check_gradients<P, F>(
    params: &P,
    mut loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, UaanError>
where
    P: Parameters + Clone,
    F: FnMut(&mut Tape, &P) -> Result<Var, UaanError>,
{
    let mut tape = Tape::new();
    if let Some((kind, factor)) = opts.fault {
        tape.inject_fault(kind, factor);
    }
    let out = loss(&mut tape, params)?;
    let base = tape.value(out).item().unwrap_or(f64::NAN);
    let grads = tape.backward(out)?;
    let analytic: Vec<_> = params.params().iter().map(|p| p.grad(&tape, &grads)).collect();

    let mut eval = |which: usize, index: usize, delta: f64| -> Result<f64, UaanError> {
        let mut shifted = params.clone();
        let mut k = 0;
        shifted.visit_mut(&mut |p| {
            if k == which {
                p.value.data_mut()[index] += delta;
            }
            k += 1;
        });
        let mut tape = Tape::new();
        let out = loss(&mut tape, &shifted)?;
        Ok(tape.value(out).item().unwrap_or(f64::NAN))
    };

    let mut checks = Vec::new();
    for (which, p) in params.params().iter().enumerate() {
        let mut check = ParamCheck {
            name: p.name().to_string(),
            size: p.value.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for index in 0..p.value.len() {
            let plus = eval(which, index, opts.eps)?;
            let minus = eval(which, index, -opts.eps)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[which].data()[index];
            let err = relative_error(a, numeric, opts.floor);
            if err > check.max_rel_error || index == 0 {
                check.max_rel_error = err;
                check.worst_index = index;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: base,
        max_rel_error,
        params: checks,
    })
}

/// The small problem the gradient check runs on: T=4 frames, S=2 objects,
/// input and embedding width 8, K=3 classes and one action over frames 1..3,
/// which gives positive anchors and all three frame-pair categories.
pub fn tiny_instance(seed: u64) -> Result<(UaanModel, ObjectFeatureClip, Annotation), UaanError> {
    let (t, s, d) = (4, 2, 8);
    let config = ModelConfig {
        feature_dim: d,
        width: d,
        classes: 3,
        evidence_fn: EvidenceFn::Softplus,
        anchor_scales: DEFAULT_ANCHOR_SCALES.to_vec(),
    };
    let model = UaanModel::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let clip = ObjectFeatureClip {
        video_id: "tiny".into(),
        frames: t,
        objects: s,
        feature_dim: d,
        appearance_local: v(t * s * d),
        motion_local: v(t * s * d),
        appearance_global: v(t * d),
        motion_global: v(t * d),
        boxes: (0..t * s).flat_map(|i| [0.1, 0.05 * i as f32, 0.5, 0.6]).collect(),
    };
    let ann = Annotation::from_segments(vec![Segment { start: 1.0, end: 3.0, label: Label::Id(1) }], t);
    Ok((model, clip, ann))
}

/// Checks every parameter gradient of the final loss on `tiny_instance`.
pub fn gradcheck_final_loss(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport, UaanError> {
    let (model, clip, ann) = tiny_instance(seed)?;
    let w = LossWeights::default();
    check_gradients(&model, |tape, m| Ok(clip_loss(tape, m, &clip, &ann, &w)?.final_loss), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Ffn, ParamInit};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Ffn, Tensor) {
        let mut init = ParamInit::new(ChaCha8Rng::seed_from_u64(3));
        let ffn = Ffn::new(&mut init, "f", 3, 5, 2);
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        (ffn, x)
    }

    fn loss(t: &mut Tape, f: &Ffn, x: &Tensor) -> Result<Var, UaanError> {
        let x = t.constant(x.clone());
        let y = f.forward(t, x)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y)?)
    }

    #[test]
    fn clean_model_passes() {
        let (ffn, x) = setup();
        let r = check_gradients(&ffn, |t, f| loss(t, f, &x), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.params.len(), 4);
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let (ffn, x) = setup();
        let opts = GradCheckOptions {
            fault: Some((OpKind::Relu, 1.5)),
            ..Default::default()
        };
        let r = check_gradients(&ffn, |t, f| loss(t, f, &x), opts).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert!(r.worst().unwrap().name.starts_with("f.w1") || r.worst().unwrap().name.starts_with("f.b1"));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn final_loss_check_is_deterministic() {
        let a = gradcheck_final_loss(2, GradCheckOptions::default()).unwrap();
        let b = gradcheck_final_loss(2, GradCheckOptions::default()).unwrap();
        assert_eq!(a.max_rel_error, b.max_rel_error);
        assert!(a.max_rel_error < 1e-4, "{:?}", a.worst());
        let faulty = GradCheckOptions {
            fault: Some((OpKind::Digamma, 1.3)),
            ..Default::default()
        };
        assert!(gradcheck_final_loss(2, faulty).unwrap().max_rel_error > 1e-2);
    }
}
