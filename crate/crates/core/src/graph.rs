//! Fully-connected object graph per branch: softmax affinity adjacency and a
//! two-layer residual GCN.

use crate::error::TensorError;
use crate::params::{LayerNormParams, Param, ParamInit, Parameters};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GraphBranchParams {
    pub w1: Param,
    pub w2: Param,
    pub w3: Param,
    pub w4: Param,
    pub norm: LayerNormParams,
}

impl GraphBranchParams {
    pub fn new(init: &mut ParamInit, name: &str, d: usize) -> Self {
        Self {
            w1: init.weight(format!("{name}.w1"), d, d),
            w2: init.weight(format!("{name}.w2"), d, d),
            w3: init.weight(format!("{name}.w3"), d, d),
            w4: init.weight(format!("{name}.w4"), d, d),
            norm: LayerNormParams::new(init, &format!("{name}.norm"), d),
        }
    }
}

impl Parameters for GraphBranchParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for p in [&self.w1, &self.w2, &self.w3, &self.w4] {
            f(p);
        }
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in [&mut self.w1, &mut self.w2, &mut self.w3, &mut self.w4] {
            f(p);
        }
        self.norm.visit_mut(f);
    }
}

/// `A = softmax_rows((F·W1)(F·W2)ᵀ)`, an `N×N` row-stochastic matrix.
pub fn build_adjacency(
    tape: &mut Tape,
    features: Var,
    params: &GraphBranchParams,
) -> Result<Var, TensorError> {
    let w1 = params.w1.bind(tape);
    let w2 = params.w2.bind(tape);
    let q = tape.matmul(features, w1)?;
    let k = tape.matmul(features, w2)?;
    let scores = tape.matmul_nt(q, k)?;
    tape.softmax_rows(scores)
}

/// `F̂ = LayerNorm(F + relu(A·relu(A·F·W3)·W4))`, with `A` rebuilt from `F`.
pub fn gcn_forward(
    tape: &mut Tape,
    features: Var,
    params: &GraphBranchParams,
) -> Result<Var, TensorError> {
    let a = build_adjacency(tape, features, params)?;
    let w3 = params.w3.bind(tape);
    let w4 = params.w4.bind(tape);
    let h = tape.matmul(a, features)?;
    let h = tape.matmul(h, w3)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(a, h)?;
    let h = tape.matmul(h, w4)?;
    let h = tape.relu(h)?;
    let r = tape.add(features, h)?;
    params.norm.forward(tape, r)
}
