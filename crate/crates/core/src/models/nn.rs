//! Dense building blocks shared by the model readouts and the Q pipeline.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Unary, Var};
use crate::params::{uniform, BoundParams, ParamSet};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Resolves parameter names under a prefix of a bound parameter set.
#[derive(Debug, Clone, Copy)]
pub struct Scope<'a> {
    bound: &'a BoundParams,
    prefix: &'a str,
}

impl<'a> Scope<'a> {
    pub fn new(bound: &'a BoundParams, prefix: &'a str) -> Self {
        Self { bound, prefix }
    }

    pub fn var(&self, name: &str) -> Var {
        self.bound.var(&format!("{}{}", self.prefix, name))
    }
}

/// Inserts `{name}.w` (`[out × in]`) and `{name}.b` (`[1 × out]`), both
/// uniform in `±1/√in`.
pub fn init_linear(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) {
    let scale = 1.0 / (input.max(1) as f64).sqrt();
    ps.insert(format!("{name}.w"), uniform(rng, (output, input), scale));
    ps.insert(format!("{name}.b"), uniform(rng, (1, output), scale));
}

pub fn linear(g: &mut Graph, w: Scope<'_>, name: &str, x: Var) -> Var {
    let weight = w.var(&format!("{name}.w"));
    let bias = w.var(&format!("{name}.b"));
    g.linear(x, weight, bias)
}

/// Linear layer, non-parametric layer norm, leaky ReLU.
pub fn block(g: &mut Graph, w: Scope<'_>, name: &str, x: Var) -> Var {
    let h = linear(g, w, name, x);
    let n = g.layer_norm(h);
    g.unary(n, Unary::LeakyRelu(LEAKY_SLOPE))
}

pub fn init_mlp(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) {
    init_linear(ps, &format!("{name}.0"), input, hidden, rng);
    init_linear(ps, &format!("{name}.1"), hidden, output, rng);
}

/// One hidden layer with leaky ReLU.
pub fn mlp(g: &mut Graph, w: Scope<'_>, name: &str, x: Var) -> Var {
    let h = linear(g, w, &format!("{name}.0"), x);
    let a = g.unary(h, Unary::LeakyRelu(LEAKY_SLOPE));
    linear(g, w, &format!("{name}.1"), a)
}

/// Stacks observation vectors into an `[n × d]` matrix.
pub fn stack_rows<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let n = rows.len();
    let mut out = Array2::zeros((n, dim));
    for (i, r) in rows.enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(r));
    }
    out
}
