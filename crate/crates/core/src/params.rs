//! Trainable parameters and the small building blocks shared by every module:
//! the one-hidden-layer FFN and layer-norm affine sets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// A named trainable tensor with a stable id used to bind it onto a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    id: usize,
    name: String,
    pub value: Tensor,
}

impl Param {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.param(self.id, &self.value)
    }

    /// Gradient of this parameter after a backward pass, zeros if it was not
    /// reached.
    pub fn grad(&self, tape: &Tape, grads: &Gradients) -> Tensor {
        tape.param_var(self.id)
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }
}

/// Hands out parameter ids in construction order and owns the init RNG.
pub struct ParamInit {
    next_id: usize,
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { next_id: 0, rng }
    }

    fn make(&mut self, name: String, value: Tensor) -> Param {
        let id = self.next_id;
        self.next_id += 1;
        Param { id, name, value }
    }

    /// Weight matrix drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> Param {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        let value = Tensor::new(vec![fan_in, fan_out], data).expect("weight shape");
        self.make(name.into(), value)
    }

    pub fn filled(&mut self, name: impl Into<String>, len: usize, value: f64) -> Param {
        self.make(name.into(), Tensor::filled(&[len], value))
    }
}

/// Visitor over every parameter of a component, in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }
}

/// `relu(x·W1 + b1)·W2 + b2`
#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl Ffn {
    pub fn new(init: &mut ParamInit, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: init.weight(format!("{name}.w1"), input, hidden),
            b1: init.filled(format!("{name}.b1"), hidden, 0.0),
            w2: init.weight(format!("{name}.w2"), hidden, output),
            b2: init.filled(format!("{name}.b2"), output, 0.0),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.value.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.w2.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let (w1, b1, w2, b2) = (
            self.w1.bind(tape),
            self.b1.bind(tape),
            self.w2.bind(tape),
            self.b2.bind(tape),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }
}

impl Parameters for Ffn {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for p in [&self.w1, &self.b1, &self.w2, &self.b2] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            f(p);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNormParams {
    pub fn new(init: &mut ParamInit, name: &str, width: usize) -> Self {
        Self {
            gain: init.filled(format!("{name}.gain"), width, 1.0),
            bias: init.filled(format!("{name}.bias"), width, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let g = self.gain.bind(tape);
        let b = self.bias.bind(tape);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

impl Parameters for LayerNormParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}
