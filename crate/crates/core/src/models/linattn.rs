//! Linear attention as a memoroid.
//!
//! The recurrent state is a key-value outer-product sum `X` (`m × d_o`) and
//! a key sum `x` (`m`); both add under the monoid. The readout queries them
//! with `φ(W_q o)`, where `φ(z) = 1 + ELU(z)` keeps keys and queries
//! positive.

use ndarray::Array2;
use rand::Rng;

use super::nn::{self, Scope};
use super::{on_constants, ModelSpec};
use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::memoroid::{Memoroid, PartialTransition};
use crate::params::{uniform, ParamSet};
use crate::scan::AssociativeOp;

/// Smallest admissible normalizer `xᵀφ(q)`.
pub const NORMALIZER_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LinAttnState {
    /// Row-major `m × d_o` outer-product accumulator.
    pub outer: Vec<f64>,
    /// Key accumulator, length `m`.
    pub keys: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinAttnMonoid {
    key_dim: usize,
    value_dim: usize,
}

impl LinAttnMonoid {
    pub fn new(key_dim: usize, value_dim: usize) -> Self {
        Self { key_dim, value_dim }
    }
}

impl AssociativeOp for LinAttnMonoid {
    type Elem = LinAttnState;

    fn identity(&self) -> LinAttnState {
        LinAttnState {
            outer: vec![0.0; self.key_dim * self.value_dim],
            keys: vec![0.0; self.key_dim],
        }
    }

    fn combine(&self, a: &LinAttnState, b: &LinAttnState) -> LinAttnState {
        LinAttnState {
            outer: a.outer.iter().zip(&b.outer).map(|(x, y)| x + y).collect(),
            keys: a.keys.iter().zip(&b.keys).map(|(x, y)| x + y).collect(),
        }
    }
}

pub(crate) fn init(spec: &ModelSpec, rng: &mut impl Rng) -> ParamSet {
    let d = spec.input_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut ps = ParamSet::new();
    ps.insert("key.w", uniform(rng, (spec.state_dim, d), scale));
    ps.insert("value.w", uniform(rng, (d, d), scale));
    ps.insert("query.w", uniform(rng, (spec.state_dim, d), scale));
    if spec.readout_mlp {
        nn::init_mlp(&mut ps, "readout", d, spec.hidden, spec.output_dim, rng);
    }
    ps
}

/// Packed lift `[φ(W_k o) ⊗ W_v o ∥ φ(W_k o)]`, `[n × (m·d_o + m)]`.
fn lift_vars(g: &mut Graph, w: Scope<'_>, obs: Var) -> Var {
    let key_lin = g.matmul_t(obs, w.var("key.w"));
    let key = g.unary(key_lin, Unary::Elu1p);
    let value = g.matmul_t(obs, w.var("value.w"));
    let outer = g.row_outer(key, value);
    g.concat_cols(&[outer, key])
}

fn readout_vars(spec: &ModelSpec, g: &mut Graph, w: Scope<'_>, packed: Var, obs: Var) -> Result<Var> {
    let (m, d) = (spec.state_dim, spec.input_dim);
    let outer = g.slice_cols(packed, 0, m * d);
    let keys = g.slice_cols(packed, m * d, m);
    let query_lin = g.matmul_t(obs, w.var("query.w"));
    let query = g.unary(query_lin, Unary::Elu1p);
    let num = g.row_matvec_t(outer, query);
    let den = g.row_dot(keys, query);
    if let Some((t, v)) = g
        .value(den)
        .iter()
        .enumerate()
        .find(|(_, v)| v.is_nan() || **v < NORMALIZER_FLOOR)
    {
        return Err(Error::Degenerate(format!(
            "attention normalizer {v:e} below {NORMALIZER_FLOOR:e} at position {t}"
        )));
    }
    let mut out = g.div_col(num, den);
    if spec.residual {
        out = g.add(out, obs);
    }
    if spec.readout_mlp {
        out = nn::mlp(g, w, "readout", out);
    }
    Ok(out)
}

pub(crate) fn forward_tape(spec: &ModelSpec, g: &mut Graph, w: Scope<'_>, obs: Var, begins: &[bool]) -> Result<Var> {
    let lifted = lift_vars(g, w, obs);
    let packed = g.reset_cumsum(lifted, begins);
    readout_vars(spec, g, w, packed, obs)
}

#[derive(Debug, Clone)]
pub struct LinAttn {
    spec: ModelSpec,
    params: ParamSet,
    monoid: LinAttnMonoid,
}

impl LinAttn {
    pub fn new(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        let monoid = LinAttnMonoid {
            key_dim: spec.state_dim,
            value_dim: spec.input_dim,
        };
        Ok(Self { spec, params, monoid })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl Memoroid for LinAttn {
    type Op = LinAttnMonoid;

    fn monoid(&self) -> &LinAttnMonoid {
        &self.monoid
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn lift(&self, inputs: &[PartialTransition]) -> Result<Vec<LinAttnState>> {
        let split = self.spec.state_dim * self.spec.input_dim;
        on_constants(&self.spec, &self.params, inputs, |g, w, obs| {
            let lifted = lift_vars(g, w, obs);
            Ok(g.value(lifted)
                .rows()
                .into_iter()
                .map(|r| {
                    let r = r.to_vec();
                    LinAttnState {
                        outer: r[..split].to_vec(),
                        keys: r[split..].to_vec(),
                    }
                })
                .collect())
        })
    }

    fn readout(&self, states: &[LinAttnState], inputs: &[PartialTransition]) -> Result<Array2<f64>> {
        let width = self.spec.state_dim * (self.spec.input_dim + 1);
        let mut packed = Array2::zeros((states.len(), width));
        for (mut row, s) in packed.rows_mut().into_iter().zip(states) {
            for (dst, src) in row.iter_mut().zip(s.outer.iter().chain(&s.keys)) {
                *dst = *src;
            }
        }
        on_constants(&self.spec, &self.params, inputs, |g, w, obs| {
            let packed = g.constant(packed);
            let out = readout_vars(&self.spec, g, w, packed, obs)?;
            Ok(g.value(out).clone())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memoroid::{apply, apply_resettable, step};
    use crate::models::{ModelKind, ModelSpec};
    use crate::scan::ScanSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn running_mean_model() -> LinAttn {
        let mut spec = ModelSpec::new(ModelKind::LinAttn, 1, 1, 1, 1);
        spec.residual = false;
        spec.readout_mlp = false;
        let mut ps = ParamSet::new();
        // φ(0) = 1 for keys and queries, value = o.
        ps.insert("key.w", Array2::zeros((1, 1)));
        ps.insert("value.w", Array2::ones((1, 1)));
        ps.insert("query.w", Array2::zeros((1, 1)));
        LinAttn::new(spec, ps).unwrap()
    }

    fn obs(xs: &[f64]) -> Vec<PartialTransition> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| PartialTransition::new(vec![x], i == 0))
            .collect()
    }

    #[test]
    fn scalar_fixture_is_a_running_mean() {
        let m = running_mean_model();
        let out = apply(&m, &obs(&[2.0, 4.0, 6.0]), &ScanSchedule::serial()).unwrap();
        assert_eq!(out.markov.column(0).to_vec(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn identity_readout_is_degenerate() {
        let m = running_mean_model();
        let err = m.readout(&[m.monoid().identity()], &obs(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn combine_with_identity_is_noop() {
        let m = running_mean_model();
        let x = m.lift(&obs(&[3.0])).unwrap().pop().unwrap();
        assert_eq!(m.monoid().combine(&x, &m.monoid().identity()), x);
        assert_eq!(m.monoid().combine(&m.monoid().identity(), &x), x);
    }

    #[test]
    fn step_matches_scan() {
        let spec = ModelSpec::new(ModelKind::LinAttn, 3, 5, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = LinAttn::new(spec.clone(), spec.init_params(&mut rng).unwrap()).unwrap();
        let inputs: Vec<_> = (0..20)
            .map(|t| PartialTransition::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), t % 7 == 0))
            .collect();
        let scanned = apply_resettable(&m, &inputs, &ScanSchedule::serial()).unwrap();
        let mut h = None;
        for (t, p) in inputs.iter().enumerate() {
            let (next, s) = step(&m, h.as_ref(), p).unwrap();
            for (a, b) in s.iter().zip(scanned.markov.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
            h = Some(next);
        }
    }

    #[test]
    fn keys_are_positive_after_lift() {
        let spec = ModelSpec::new(ModelKind::LinAttn, 2, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = LinAttn::new(spec.clone(), spec.init_params(&mut rng).unwrap()).unwrap();
        let lifted = m.lift(&[PartialTransition::new(vec![-50.0, 40.0], true)]).unwrap();
        assert!(lifted[0].keys.iter().all(|&k| k > 0.0));
    }
}
