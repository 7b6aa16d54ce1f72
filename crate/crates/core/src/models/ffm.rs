//! Fast and forgetful memory: a time-varying decaying, oscillating trace.
//!
//! The state is `(X, t)` with `X ∈ ℂ^{m×c}` and `t` the number of combined
//! elements. The monoid decays the left trace by `t'` steps of
//! `exp(−|α_i| + iω_j)` before adding the right one, so every decay factor
//! has modulus at most one.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;

use super::nn::{self, Scope};
use super::{on_constants, ModelKind, ModelSpec};
use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::memoroid::{Memoroid, PartialTransition};
use crate::params::ParamSet;
use crate::scan::AssociativeOp;

pub const ALPHA_MIN: f64 = 0.01;
pub const ALPHA_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FfmState {
    /// Row-major `m × c` trace.
    pub trace: Vec<Complex64>,
    pub count: u64,
}

#[derive(Debug, Clone)]
pub struct FfmMonoid {
    decay: Vec<f64>,
    freq: Vec<f64>,
}

impl FfmMonoid {
    /// `decay` holds `|α|`, `freq` holds `ω`.
    pub fn new(decay: Vec<f64>, freq: Vec<f64>) -> Self {
        Self {
            decay: decay.into_iter().map(f64::abs).collect(),
            freq,
        }
    }

    /// `exp(steps · (−|α_i| + iω_j))`.
    pub fn decay_factor(&self, row: usize, col: usize, steps: u64) -> Complex64 {
        let t = steps as f64;
        Complex64::from_polar((-t * self.decay[row]).exp(), t * self.freq[col])
    }

    fn trace_len(&self) -> usize {
        self.decay.len() * self.freq.len()
    }
}

impl AssociativeOp for FfmMonoid {
    type Elem = FfmState;

    fn identity(&self) -> FfmState {
        FfmState {
            trace: vec![Complex64::new(0.0, 0.0); self.trace_len()],
            count: 0,
        }
    }

    fn combine(&self, a: &FfmState, b: &FfmState) -> FfmState {
        let c = self.freq.len();
        let trace = if b.count == 0 {
            a.trace.iter().zip(&b.trace).map(|(x, y)| x + y).collect()
        } else {
            a.trace
                .iter()
                .zip(&b.trace)
                .enumerate()
                .map(|(k, (x, y))| x * self.decay_factor(k / c, k % c, b.count) + y)
                .collect()
        };
        FfmState {
            trace,
            count: a.count + b.count,
        }
    }
}

pub(crate) fn init(spec: &ModelSpec, rng: &mut impl Rng) -> ParamSet {
    let (m, c, d) = (spec.state_dim, spec.context, spec.input_dim);
    let (lo, hi) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());
    let alpha = Array2::from_shape_fn((1, m), |_| rng.gen_range(lo..=hi).exp());
    let omega = Array2::from_shape_fn(
        (1, c),
        |(_, j)| {
            if c == 1 {
                0.0
            } else {
                PI * j as f64 / (c - 1) as f64
            }
        },
    );
    let mut ps = ParamSet::new();
    ps.insert("alpha", alpha);
    ps.insert("omega", omega);
    nn::init_linear(&mut ps, "in.1", d, m, rng);
    nn::init_linear(&mut ps, "in.2", d, m, rng);
    nn::init_linear(&mut ps, "out.3", 2 * m * c, d, rng);
    nn::init_mlp(&mut ps, "mlp", d, spec.hidden, d, rng);
    nn::init_linear(&mut ps, "gate.4", d, d, rng);
    ps
}

/// Gated input `(W_1 o + b_1) ⊙ σ(W_2 o + b_2)`, `[n × m]`.
fn gated_input(g: &mut Graph, w: Scope<'_>, obs: Var) -> Var {
    let value = nn::linear(g, w, "in.1", obs);
    let gate_lin = nn::linear(g, w, "in.2", obs);
    let gate = g.sigmoid(gate_lin);
    g.mul(value, gate)
}

/// `packed` is `[ℜX ∥ ℑX]` with `X` flattened row-major, `[n × 2mc]`.
fn readout_vars(g: &mut Graph, w: Scope<'_>, packed: Var, obs: Var) -> Var {
    let z = nn::linear(g, w, "out.3", packed);
    let normed = g.layer_norm(z);
    let h = nn::mlp(g, w, "mlp", normed);
    let gate_lin = nn::linear(g, w, "gate.4", obs);
    let gate = g.sigmoid(gate_lin);
    let carry = g.one_minus(gate);
    let gated = g.mul(h, gate);
    let skip = g.mul(carry, obs);
    g.add(gated, skip)
}

pub(crate) fn forward_tape(spec: &ModelSpec, g: &mut Graph, w: Scope<'_>, obs: Var, begins: &[bool]) -> Result<Var> {
    let c = spec.context;
    let v = gated_input(g, w, obs);
    let u_re = g.repeat_each(v, c);
    let n = begins.len();
    let u_im = g.constant(Array2::zeros((n, spec.state_dim * c)));
    // one-step decay λ_ij = exp(−|α_i|) e^{iω_j}
    let abs_alpha = g.unary(w.var("alpha"), Unary::Abs);
    let neg = g.scale(abs_alpha, -1.0);
    let magnitude = g.unary(neg, Unary::Exp);
    let cos = g.unary(w.var("omega"), Unary::Cos);
    let sin = g.unary(w.var("omega"), Unary::Sin);
    let lam_re = g.row_outer(magnitude, cos);
    let lam_im = g.row_outer(magnitude, sin);
    let packed = g.reset_diag_recurrence(lam_re, lam_im, u_re, u_im, begins);
    Ok(readout_vars(g, w, packed, obs))
}

#[derive(Debug, Clone)]
pub struct Ffm {
    spec: ModelSpec,
    params: ParamSet,
    monoid: FfmMonoid,
}

impl Ffm {
    pub fn new(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        if spec.kind != ModelKind::Ffm {
            return Err(Error::invalid("kind", format!("{} is not ffm", spec.kind)));
        }
        spec.validate()?;
        spec.check_params(&params)?;
        let alpha = params.tensor("alpha");
        if let Some(bad) = alpha.iter().find(|&&a| a <= 0.0) {
            return Err(Error::invalid("alpha", format!("decay rate {bad} must be positive")));
        }
        let monoid = FfmMonoid::new(
            alpha.iter().copied().collect(),
            params.tensor("omega").iter().copied().collect(),
        );
        Ok(Self { spec, params, monoid })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl Memoroid for Ffm {
    type Op = FfmMonoid;

    fn monoid(&self) -> &FfmMonoid {
        &self.monoid
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn lift(&self, inputs: &[PartialTransition]) -> Result<Vec<FfmState>> {
        let c = self.spec.context;
        on_constants(&self.spec, &self.params, inputs, |g, w, obs| {
            let v = gated_input(g, w, obs);
            Ok(g.value(v)
                .rows()
                .into_iter()
                .map(|r| FfmState {
                    trace: r
                        .iter()
                        .flat_map(|&x| std::iter::repeat_n(Complex64::new(x, 0.0), c))
                        .collect(),
                    count: 1,
                })
                .collect())
        })
    }

    fn readout(&self, states: &[FfmState], inputs: &[PartialTransition]) -> Result<Array2<f64>> {
        let k = self.spec.state_dim * self.spec.context;
        let packed = Array2::from_shape_fn((states.len(), 2 * k), |(t, j)| {
            let z = states[t].trace[j % k];
            if j < k {
                z.re
            } else {
                z.im
            }
        });
        on_constants(&self.spec, &self.params, inputs, |g, w, obs| {
            let packed = g.constant(packed);
            let out = readout_vars(g, w, packed, obs);
            Ok(g.value(out).clone())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::scan_sequential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(x: f64) -> FfmState {
        FfmState {
            trace: vec![Complex64::new(x, 0.0)],
            count: 1,
        }
    }

    #[test]
    fn halving_decay_sums() {
        let op = FfmMonoid::new(vec![std::f64::consts::LN_2], vec![0.0]);
        let out = scan_sequential(&op, &[one(1.0), one(1.0), one(1.0)]);
        assert!((out[2].trace[0].re - 1.75).abs() < 1e-15);
        assert_eq!(out[2].count, 3);
    }

    #[test]
    fn identity_is_neutral() {
        let op = FfmMonoid::new(vec![0.3, 0.7], vec![0.0, 1.0]);
        let x = FfmState {
            trace: (0..4).map(|k| Complex64::new(k as f64, -1.0)).collect(),
            count: 5,
        };
        assert_eq!(op.combine(&x, &op.identity()), x);
        assert_eq!(op.combine(&op.identity(), &x), x);
    }

    #[test]
    fn decay_factors_are_contractive() {
        let op = FfmMonoid::new(vec![0.01, 0.5, 1.0], vec![0.0, 1.0, PI]);
        for t in [1, 2, 10, 1000, 100_000] {
            for i in 0..3 {
                for j in 0..3 {
                    assert!(op.decay_factor(i, j, t).norm() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        let spec = ModelSpec::new(ModelKind::Ffm, 2, 2, 2, 4).with_context(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = spec.init_params(&mut rng).unwrap();
        ps.insert("alpha", Array2::from_shape_vec((1, 2), vec![0.5, 0.0]).unwrap());
        assert!(Ffm::new(spec, ps).is_err());
    }

    #[test]
    fn init_ranges() {
        let spec = ModelSpec::new(ModelKind::Ffm, 2, 2, 32, 4).with_context(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = spec.init_params(&mut rng).unwrap();
        assert!(ps.tensor("alpha").iter().all(|&a| (ALPHA_MIN..=ALPHA_MAX).contains(&a)));
        let omega = ps.tensor("omega");
        assert_eq!(omega[[0, 0]], 0.0);
        assert!((omega[[0, 3]] - PI).abs() < 1e-15);
    }
}
