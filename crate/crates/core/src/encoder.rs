//! Object-level position encoding and the FFN projections that produce the
//! appearance and motion object features `F_a`, `F_m` (`(T·S)×d` each).

use crate::data::ObjectFeatureClip;
use crate::error::TensorError;
use crate::params::{Ffn, ParamInit, Param, Parameters};
use crate::tensor::{Tape, Tensor, Var};

/// Sinusoidal frame encoding: dimension `2i` is `sin(t / 10000^(2i/d))`,
/// `2i+1` the matching cosine.
pub fn temporal_encoding(t: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; d];
    for (j, v) in out.iter_mut().enumerate() {
        let i2 = (j - j % 2) as f64;
        let angle = t as f64 / 10000f64.powf(i2 / d as f64);
        *v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    Tensor::vector(out)
}

/// One branch's FFNs (appearance or motion).
#[derive(Clone, Debug)]
pub struct BranchEncoder {
    /// `[o; e_b; e_t] -> d`
    pub local: Ffn,
    /// `[V_global; e_t] -> d`
    pub global: Ffn,
    /// `[v_local; v_global] -> d`
    pub combine: Ffn,
}

impl BranchEncoder {
    fn new(init: &mut ParamInit, name: &str, d_in: usize, d: usize) -> Self {
        Self {
            local: Ffn::new(init, &format!("{name}.local"), d_in + 2 * d, d, d),
            global: Ffn::new(init, &format!("{name}.global"), d_in + d, d, d),
            combine: Ffn::new(init, &format!("{name}.combine"), 2 * d, d, d),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        local: Var,
        global: Var,
        box_enc: Var,
        frame_enc: Var,
        tiled_frame_enc: Var,
        tile_index: &[usize],
    ) -> Result<Var, TensorError> {
        let x = tape.concat_cols(&[local, box_enc, tiled_frame_enc])?;
        let v_local = self.local.forward(tape, x)?;
        let g = tape.concat_cols(&[global, frame_enc])?;
        let v_global = self.global.forward(tape, g)?;
        let v_global = tape.gather_rows(v_global, tile_index.to_vec())?;
        let both = tape.concat_cols(&[v_local, v_global])?;
        self.combine.forward(tape, both)
    }
}

impl Parameters for BranchEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.local.visit(f);
        self.global.visit(f);
        self.combine.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.local.visit_mut(f);
        self.global.visit_mut(f);
        self.combine.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub width: usize,
    pub feature_dim: usize,
    /// `b -> e_b`, shared by both branches
    pub boxes: Ffn,
    pub appearance: BranchEncoder,
    pub motion: BranchEncoder,
}

impl EncoderParams {
    pub fn new(init: &mut ParamInit, feature_dim: usize, width: usize) -> Self {
        Self {
            width,
            feature_dim,
            boxes: Ffn::new(init, "encoder.box", 4, width, width),
            appearance: BranchEncoder::new(init, "encoder.appearance", feature_dim, width),
            motion: BranchEncoder::new(init, "encoder.motion", feature_dim, width),
        }
    }
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.boxes.visit(f);
        self.appearance.visit(f);
        self.motion.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.boxes.visit_mut(f);
        self.appearance.visit_mut(f);
        self.motion.visit_mut(f);
    }
}

/// Encoded object rows; row `r` is object `(t = r / S, k = r % S)`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedObjects {
    pub appearance: Var,
    pub motion: Var,
    pub frames: usize,
    pub objects: usize,
}

impl EncodedObjects {
    pub fn row(&self, t: usize, k: usize) -> usize {
        t * self.objects + k
    }

    pub fn position(&self, row: usize) -> (usize, usize) {
        (row / self.objects, row % self.objects)
    }
}

fn to_tensor(rows: usize, cols: usize, data: &[f32]) -> Result<Tensor, TensorError> {
    Tensor::matrix(rows, cols, data.iter().map(|&v| v as f64).collect())
}

pub fn encode_objects(
    tape: &mut Tape,
    clip: &ObjectFeatureClip,
    params: &EncoderParams,
) -> Result<EncodedObjects, TensorError> {
    if clip.feature_dim != params.feature_dim {
        return Err(TensorError::Dimension {
            op: "encode_objects",
            detail: format!(
                "clip feature width {} but encoder expects {}",
                clip.feature_dim, params.feature_dim
            ),
        });
    }
    let (t_len, s_len, d_in, d) = (clip.frames, clip.objects, clip.feature_dim, params.width);
    let n = t_len * s_len;
    let tile_index: Vec<usize> = (0..n).map(|r| r / s_len).collect();

    let mut frame_enc = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        frame_enc.extend_from_slice(temporal_encoding(t, d).data());
    }
    let frame_enc = tape.constant(Tensor::matrix(t_len, d, frame_enc)?);
    let tiled_frame_enc = tape.gather_rows(frame_enc, tile_index.clone())?;

    let boxes = tape.constant(to_tensor(n, 4, &clip.boxes)?);
    let box_enc = params.boxes.forward(tape, boxes)?;

    let a_local = tape.constant(to_tensor(n, d_in, &clip.appearance_local)?);
    let m_local = tape.constant(to_tensor(n, d_in, &clip.motion_local)?);
    let a_global = tape.constant(to_tensor(t_len, d_in, &clip.appearance_global)?);
    let m_global = tape.constant(to_tensor(t_len, d_in, &clip.motion_global)?);

    let appearance = params.appearance.forward(
        tape,
        a_local,
        a_global,
        box_enc,
        frame_enc,
        tiled_frame_enc,
        &tile_index,
    )?;
    let motion = params.motion.forward(
        tape,
        m_local,
        m_global,
        box_enc,
        frame_enc,
        tiled_frame_enc,
        &tile_index,
    )?;
    Ok(EncodedObjects {
        appearance,
        motion,
        frames: t_len,
        objects: s_len,
    })
}
