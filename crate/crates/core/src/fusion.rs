//! Appearance-motion association: cross-attention over the stacked branch
//! features, averaging of the three enhanced views and per-frame pooling.

use crate::error::TensorError;
use crate::params::{LayerNormParams, Param, ParamInit, Parameters};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub appearance: LayerNormParams,
    pub motion: LayerNormParams,
    pub joint: LayerNormParams,
}

impl FusionParams {
    pub fn new(init: &mut ParamInit, d: usize) -> Self {
        Self {
            appearance: LayerNormParams::new(init, "fusion.appearance", d),
            motion: LayerNormParams::new(init, "fusion.motion", d),
            joint: LayerNormParams::new(init, "fusion.joint", d),
        }
    }
}

impl Parameters for FusionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.appearance.visit(f);
        self.motion.visit(f);
        self.joint.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.appearance.visit_mut(f);
        self.motion.visit_mut(f);
        self.joint.visit_mut(f);
    }
}

/// `softmax(Q·Kᵀ / √d)·V`
pub fn dot_product_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var, TensorError> {
    let (dq, dk) = (tape.value(q).cols(), tape.value(k).cols());
    let (mk, mv) = (tape.value(k).rows(), tape.value(v).rows());
    if dq != dk || mk != mv {
        return Err(TensorError::Dimension {
            op: "dot_product_attention",
            detail: format!("Q width {dq}, K {mk}×{dk}, V has {mv} rows"),
        });
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dq as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Frame-level fused features `X` (`T×d`, unit rows).
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub x: Var,
    pub frames: usize,
    /// Rows of the stacked `2N×d` tensor averaged into each frame.
    pub pooled_rows: Vec<Vec<usize>>,
}

/// Rows `{t·S + k}` of the appearance half and `{N + t·S + k}` of the motion
/// half, for each frame `t`.
pub fn frame_groups(frames: usize, objects: usize) -> Vec<Vec<usize>> {
    let n = frames * objects;
    (0..frames)
        .map(|t| {
            let base = t * objects;
            (base..base + objects)
                .chain(n + base..n + base + objects)
                .collect()
        })
        .collect()
}

pub fn fuse(
    tape: &mut Tape,
    appearance: Var,
    motion: Var,
    objects: usize,
    params: &FusionParams,
) -> Result<FusedSequence, TensorError> {
    let n = tape.value(appearance).rows();
    if tape.value(motion).shape() != tape.value(appearance).shape() {
        return Err(TensorError::Dimension {
            op: "fuse",
            detail: format!(
                "appearance {:?} vs motion {:?}",
                tape.value(appearance).shape(),
                tape.value(motion).shape()
            ),
        });
    }
    if objects == 0 || n % objects != 0 {
        return Err(TensorError::Contract(format!(
            "{n} object rows are not a multiple of S={objects}"
        )));
    }
    let frames = n / objects;
    let u = tape.concat_rows(&[appearance, motion])?;

    let att = dot_product_attention(tape, u, appearance, appearance)?;
    let xa = tape.add(u, att)?;
    let xa = params.appearance.forward(tape, xa)?;
    let att = dot_product_attention(tape, u, motion, motion)?;
    let xm = tape.add(u, att)?;
    let xm = params.motion.forward(tape, xm)?;
    let att = dot_product_attention(tape, u, u, u)?;
    let xj = tape.add(u, att)?;
    let xj = params.joint.forward(tape, xj)?;

    let sum = tape.add(xa, xm)?;
    let sum = tape.add(sum, xj)?;
    let avg = tape.scale(sum, 1.0 / 3.0)?;
    let pooled_rows = frame_groups(frames, objects);
    let pooled = tape.segment_mean(avg, pooled_rows.clone())?;
    let x = tape.l2_normalize_rows(pooled)?;
    Ok(FusedSequence {
        x,
        frames,
        pooled_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::params::LAYER_NORM_EPS;
    use crate::tensor::{layer_norm, matmul, softmax_rows, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn fusion_params(seed: u64, d: usize) -> FusionParams {
        let mut p = FusionParams::new(&mut ParamInit::new(ChaCha8Rng::seed_from_u64(seed)), d);
        // non-trivial affine parts so the three paths differ
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        p.visit_mut(&mut |q| {
            q.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5))
        });
        p
    }

    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let d = q.cols() as f64;
        let mut s = matmul(q, &k.transpose()).unwrap();
        s.data_mut().iter_mut().for_each(|x| *x /= d.sqrt());
        matmul(&softmax_rows(&s).unwrap(), v).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut rng, 3, 4));
        let k = tape.constant(random(&mut rng, 1, 4));
        let vt = random(&mut rng, 1, 4);
        let v = tape.constant(vt.clone());
        let out = dot_product_attention(&mut tape, q, k, v).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(out).row(r), vt.row(0));
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut rng, 2, 4));
        let k = tape.constant(Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0, 0.0]; 3]).unwrap());
        let vt = random(&mut rng, 3, 4);
        let v = tape.constant(vt.clone());
        let out = dot_product_attention(&mut tape, q, k, v).unwrap();
        for c in 0..4 {
            let mean = (vt.get(0, c) + vt.get(1, c) + vt.get(2, c)) / 3.0;
            assert!((tape.value(out).get(1, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (qt, kt, vt) = (random(&mut rng, 3, 8), random(&mut rng, 4, 8), random(&mut rng, 4, 8));
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
        let out = dot_product_attention(&mut tape, q, k, v).unwrap();
        assert!(tape.value(out).max_abs_diff(&attention_oracle(&qt, &kt, &vt)) < 1e-12);
    }

    #[test]
    fn attention_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut rng, 3, 8));
        let k = tape.constant(random(&mut rng, 4, 8));
        let v = tape.constant(random(&mut rng, 5, 8));
        assert!(dot_product_attention(&mut tape, q, k, v).is_err());
    }

    #[test]
    fn rows_not_multiple_of_objects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let a = tape.constant(random(&mut rng, 5, 4));
        let m = tape.constant(random(&mut rng, 5, 4));
        let err = fuse(&mut tape, a, m, 2, &fusion_params(0, 4)).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn single_object_single_frame() {
        let mut tape = Tape::new();
        let v = Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap();
        let a = tape.constant(v.clone());
        let m = tape.constant(v);
        let p = FusionParams::new(&mut ParamInit::new(ChaCha8Rng::seed_from_u64(0)), 2);
        let out = fuse(&mut tape, a, m, 1, &p).unwrap();
        let x = tape.value(out.x);
        assert_eq!(x.shape(), &[1, 2]);
        let norm = (x.get(0, 0).powi(2) + x.get(0, 1).powi(2)).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // layer norm of a 2-vector maps it to ±(1, -1) up to eps
        assert!((x.get(0, 0) - 2f64.sqrt().recip()).abs() < 1e-6);
    }

    #[test]
    fn pooling_matches_index_oracle() {
        let (t, s, d) = (4, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (at, mt) = (random(&mut rng, t * s, d), random(&mut rng, t * s, d));
        let p = fusion_params(9, d);
        let mut tape = Tape::new();
        let (a, m) = (tape.constant(at.clone()), tape.constant(mt.clone()));
        let out = fuse(&mut tape, a, m, s, &p).unwrap();

        // recompute the stacked average independently
        let mut u_rows: Vec<Vec<f64>> = (0..t * s).map(|r| at.row(r).to_vec()).collect();
        u_rows.extend((0..t * s).map(|r| mt.row(r).to_vec()));
        let u = Tensor::from_rows(&u_rows).unwrap();
        let enhance = |k: &Tensor, ln: &LayerNormParams| {
            let att = attention_oracle(&u, k, k);
            let mut sum = u.clone();
            sum.data_mut().iter_mut().zip(att.data()).for_each(|(a, b)| *a += b);
            layer_norm(&sum, &ln.gain.value, &ln.bias.value, LAYER_NORM_EPS).unwrap()
        };
        let (xa, xm, xj) = (enhance(&at, &p.appearance), enhance(&mt, &p.motion), enhance(&u, &p.joint));
        let x = tape.value(out.x);
        for frame in 0..t {
            let mut rows = Vec::new();
            for k in 0..s {
                rows.push(frame * s + k);
                rows.push(t * s + frame * s + k);
            }
            let mut mean = vec![0.0; d];
            for &r in &rows {
                for c in 0..d {
                    mean[c] += (xa.get(r, c) + xm.get(r, c) + xj.get(r, c)) / 3.0 / rows.len() as f64;
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..d {
                assert!((x.get(frame, c) - mean[c] / norm).abs() < 1e-12);
            }
            let mut got = out.pooled_rows[frame].clone();
            got.sort_unstable();
            rows.sort_unstable();
            assert_eq!(got, rows);
        }
    }

    #[test]
    fn swapping_branches_with_shared_norms_is_symmetric() {
        // with identical layer-norm parameters, swapping inputs swaps the
        // appearance/motion views and leaves the joint view's row multiset
        // intact, so the pooled frame features are unchanged
        let (t, s, d) = (3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (at, mt) = (random(&mut rng, t * s, d), random(&mut rng, t * s, d));
        let p = FusionParams::new(&mut ParamInit::new(ChaCha8Rng::seed_from_u64(0)), d);
        let run = |first: &Tensor, second: &Tensor| {
            let mut tape = Tape::new();
            let (a, m) = (tape.constant(first.clone()), tape.constant(second.clone()));
            let out = fuse(&mut tape, a, m, s, &p).unwrap();
            tape.value(out.x).clone()
        };
        assert!(run(&at, &mt).max_abs_diff(&run(&mt, &at)) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (t, s, d) = (3, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (at, mt) = (random(&mut rng, t * s, d), random(&mut rng, t * s, d));
        let probe = random(&mut rng, t, d);
        let p = fusion_params(3, d);
        let report = check_gradients(
            &p,
            |tape, p| {
                let (a, m) = (tape.constant(at.clone()), tape.constant(mt.clone()));
                let out = fuse(tape, a, m, s, p)?;
                let w = tape.constant(probe.clone());
                let y = tape.mul(out.x, w)?;
                Ok(tape.sum(y)?)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let (t, s, d) = (2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let at = random(&mut rng, t * s, d);
        let mt = random(&mut rng, t * s, d);
        let probe = random(&mut rng, t, d);
        let p = fusion_params(1, d);
        let value = |a: &Tensor| {
            let mut tape = Tape::new();
            let (av, mv) = (tape.constant(a.clone()), tape.constant(mt.clone()));
            let out = fuse(&mut tape, av, mv, s, &p).unwrap();
            let x = tape.value(out.x);
            x.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let av = tape.leaf(at.clone(), true);
        let mv = tape.constant(mt.clone());
        let out = fuse(&mut tape, av, mv, s, &p).unwrap();
        let w = tape.constant(probe.clone());
        let y = tape.mul(out.x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(av).unwrap();
        for i in 0..at.len() {
            let (mut plus, mut minus) = (at.clone(), at.clone());
            plus.data_mut()[i] += 1e-6;
            minus.data_mut()[i] -= 1e-6;
            let num = (value(&plus) - value(&minus)) / 2e-6;
            let err = (num - g.data()[i]).abs() / num.abs().max(g.data()[i].abs()).max(1e-6);
            assert!(err < 1e-4, "entry {i}: {num} vs {}", g.data()[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fused_rows_are_unit_norm(seed in any::<u64>(), t in 1usize..6, s in 1usize..4) {
            let d = 6;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.constant(random(&mut rng, t * s, d));
            let m = tape.constant(random(&mut rng, t * s, d));
            let out = fuse(&mut tape, a, m, s, &fusion_params(seed ^ 3, d)).unwrap();
            let x = tape.value(out.x);
            prop_assert_eq!(x.shape(), &[t, d]);
            for r in 0..t {
                let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }
}
