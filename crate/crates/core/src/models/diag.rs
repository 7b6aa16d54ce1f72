//! Diagonal complex linear recurrences (S5 and LRU).
//!
//! Both models share the monoid `(X, x) • (X', x') = (X' ⊙ X, X' ⊙ x + x')`
//! over complex vectors, with lift `f(o, b) = (λ, W_x o)`. They differ in
//! eigenvalue initialization and readout:
//!
//! * S5: `u = GeLU(W_c ℜx)`, output `(W_1 u + b_1) ⊙ σ(W_2 u + b_2)`;
//! * LRU: an MLP over `ℜx ∥ ℑx`.
//!
//! [`DenseMonoid`] is the same recurrence with full transition matrices,
//! kept as a reference for the diagonal form.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;

use super::nn::{self, Scope};
use super::{on_constants, ModelKind, ModelSpec};
use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::memoroid::{Memoroid, PartialTransition};
use crate::params::{uniform, ParamSet};
use crate::scan::AssociativeOp;

pub const EIGEN_MIN_RADIUS: f64 = 0.4;
pub const EIGEN_MAX_RADIUS: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagState {
    /// Diagonal of the accumulated transition.
    pub decay: Vec<Complex64>,
    pub carry: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DiagMonoid {
    dim: usize,
}

impl DiagMonoid {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl AssociativeOp for DiagMonoid {
    type Elem = DiagState;

    fn identity(&self) -> DiagState {
        DiagState {
            decay: vec![Complex64::new(1.0, 0.0); self.dim],
            carry: vec![Complex64::new(0.0, 0.0); self.dim],
        }
    }

    fn combine(&self, a: &DiagState, b: &DiagState) -> DiagState {
        DiagState {
            decay: a.decay.iter().zip(&b.decay).map(|(x, y)| y * x).collect(),
            carry: a
                .carry
                .iter()
                .zip(&b.decay)
                .zip(&b.carry)
                .map(|((x, lam), u)| lam * x + u)
                .collect(),
        }
    }
}

/// Full-matrix form: `transition` is row-major `m × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub transition: Vec<Complex64>,
    pub carry: Vec<Complex64>,
}

impl DenseState {
    pub fn from_diag(d: &DiagState) -> Self {
        let m = d.decay.len();
        let mut transition = vec![Complex64::new(0.0, 0.0); m * m];
        for (i, v) in d.decay.iter().enumerate() {
            transition[i * m + i] = *v;
        }
        Self {
            transition,
            carry: d.carry.clone(),
        }
    }
}

/// `(X, x) • (X', x') = (X' X, X' x + x')` with dense `X`.
#[derive(Debug, Clone, Copy)]
pub struct DenseMonoid {
    dim: usize,
}

impl DenseMonoid {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl AssociativeOp for DenseMonoid {
    type Elem = DenseState;

    fn identity(&self) -> DenseState {
        let m = self.dim;
        let mut transition = vec![Complex64::new(0.0, 0.0); m * m];
        for i in 0..m {
            transition[i * m + i] = Complex64::new(1.0, 0.0);
        }
        DenseState {
            transition,
            carry: vec![Complex64::new(0.0, 0.0); m],
        }
    }

    fn combine(&self, a: &DenseState, b: &DenseState) -> DenseState {
        let m = self.dim;
        let mut transition = vec![Complex64::new(0.0, 0.0); m * m];
        let mut carry = b.carry.clone();
        for i in 0..m {
            for k in 0..m {
                let lhs = b.transition[i * m + k];
                carry[i] += lhs * a.carry[k];
                for j in 0..m {
                    transition[i * m + j] += lhs * a.transition[k * m + j];
                }
            }
        }
        DenseState { transition, carry }
    }
}

pub(crate) fn init(spec: &ModelSpec, rng: &mut impl Rng) -> ParamSet {
    let (m, d) = (spec.state_dim, spec.input_dim);
    let mut re = Array2::zeros((1, m));
    let mut im = Array2::zeros((1, m));
    let mut radii = Vec::with_capacity(m);
    for i in 0..m {
        let radius = match spec.kind {
            // uniform on the ring's area
            ModelKind::Lru => {
                let u: f64 = rng.gen();
                (u * (EIGEN_MAX_RADIUS.powi(2) - EIGEN_MIN_RADIUS.powi(2)) + EIGEN_MIN_RADIUS.powi(2)).sqrt()
            }
            _ => rng.gen_range(EIGEN_MIN_RADIUS..=EIGEN_MAX_RADIUS),
        };
        let phase = rng.gen_range(0.0..2.0 * PI);
        re[[0, i]] = radius * phase.cos();
        im[[0, i]] = radius * phase.sin();
        radii.push(radius);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut w_re = uniform(rng, (m, d), scale);
    let mut w_im = uniform(rng, (m, d), scale);
    if spec.kind == ModelKind::Lru {
        // input normalization sqrt(1 - |λ|²) keeps state variance bounded
        for (i, r) in radii.iter().enumerate() {
            let gain = (1.0 - r * r).sqrt();
            w_re.row_mut(i).mapv_inplace(|v| v * gain);
            w_im.row_mut(i).mapv_inplace(|v| v * gain);
        }
    }
    let mut ps = ParamSet::new();
    ps.insert("lambda.re", re);
    ps.insert("lambda.im", im);
    ps.insert("input.re", w_re);
    ps.insert("input.im", w_im);
    match spec.kind {
        ModelKind::S5 => {
            ps.insert("readout.c", uniform(rng, (spec.hidden, m), 1.0 / (m as f64).sqrt()));
            nn::init_linear(&mut ps, "readout.1", spec.hidden, spec.output_dim, rng);
            nn::init_linear(&mut ps, "readout.2", spec.hidden, spec.output_dim, rng);
        }
        _ => nn::init_mlp(&mut ps, "readout", 2 * m, spec.hidden, spec.output_dim, rng),
    }
    ps
}

/// `(ℜ W_x o, ℑ W_x o)`.
fn lift_vars(g: &mut Graph, w: Scope<'_>, obs: Var) -> (Var, Var) {
    let re = g.matmul_t(obs, w.var("input.re"));
    let im = g.matmul_t(obs, w.var("input.im"));
    (re, im)
}

/// `packed` is `[ℜx ∥ ℑx]`, `[n × 2m]`.
fn readout_vars(spec: &ModelSpec, g: &mut Graph, w: Scope<'_>, packed: Var) -> Var {
    match spec.kind {
        ModelKind::S5 => {
            let real = g.slice_cols(packed, 0, spec.state_dim);
            let c = g.matmul_t(real, w.var("readout.c"));
            let u = g.unary(c, Unary::Gelu);
            let value = nn::linear(g, w, "readout.1", u);
            let gate_lin = nn::linear(g, w, "readout.2", u);
            let gate = g.sigmoid(gate_lin);
            g.mul(value, gate)
        }
        _ => nn::mlp(g, w, "readout", packed),
    }
}

pub(crate) fn forward_tape(spec: &ModelSpec, g: &mut Graph, w: Scope<'_>, obs: Var, begins: &[bool]) -> Result<Var> {
    let (u_re, u_im) = lift_vars(g, w, obs);
    let packed = g.reset_diag_recurrence(w.var("lambda.re"), w.var("lambda.im"), u_re, u_im, begins);
    Ok(readout_vars(spec, g, w, packed))
}

/// S5 or LRU, depending on the spec's kind.
#[derive(Debug, Clone)]
pub struct DiagModel {
    spec: ModelSpec,
    params: ParamSet,
    monoid: DiagMonoid,
    eigenvalues: Vec<Complex64>,
}

impl DiagModel {
    pub fn new(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        if !matches!(spec.kind, ModelKind::S5 | ModelKind::Lru) {
            return Err(Error::invalid(
                "kind",
                format!("{} is not a diagonal recurrence", spec.kind),
            ));
        }
        spec.validate()?;
        spec.check_params(&params)?;
        let (re, im) = (params.tensor("lambda.re"), params.tensor("lambda.im"));
        let eigenvalues: Vec<Complex64> = re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect();
        Ok(Self {
            monoid: DiagMonoid::new(spec.state_dim),
            spec,
            params,
            eigenvalues,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }
}

impl Memoroid for DiagModel {
    type Op = DiagMonoid;

    fn monoid(&self) -> &DiagMonoid {
        &self.monoid
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn lift(&self, inputs: &[PartialTransition]) -> Result<Vec<DiagState>> {
        on_constants(&self.spec, &self.params, inputs, |g, w, obs| {
            let (re, im) = lift_vars(g, w, obs);
            let (re, im) = (g.value(re), g.value(im));
            Ok(re
                .rows()
                .into_iter()
                .zip(im.rows())
                .map(|(r, i)| DiagState {
                    decay: self.eigenvalues.clone(),
                    carry: r.iter().zip(i.iter()).map(|(&a, &b)| Complex64::new(a, b)).collect(),
                })
                .collect())
        })
    }

    fn readout(&self, states: &[DiagState], inputs: &[PartialTransition]) -> Result<Array2<f64>> {
        let m = self.spec.state_dim;
        let packed = Array2::from_shape_fn((states.len(), 2 * m), |(t, k)| {
            let z = states[t].carry[k % m];
            if k < m {
                z.re
            } else {
                z.im
            }
        });
        on_constants(&self.spec, &self.params, inputs, |g, w, _obs| {
            let packed = g.constant(packed);
            let out = readout_vars(&self.spec, g, w, packed);
            Ok(g.value(out).clone())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memoroid::{apply, apply_resettable};
    use crate::scan::{scan_parallel, scan_sequential, ScanSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(kind: ModelKind, eigen: f64) -> DiagModel {
        let spec = ModelSpec::new(kind, 1, 1, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = spec.init_params(&mut rng).unwrap();
        ps.insert("lambda.re", Array2::from_elem((1, 1), eigen));
        ps.insert("lambda.im", Array2::zeros((1, 1)));
        ps.insert("input.re", Array2::ones((1, 1)));
        ps.insert("input.im", Array2::zeros((1, 1)));
        DiagModel::new(spec, ps).unwrap()
    }

    fn carries(m: &DiagModel, xs: &[f64]) -> Vec<f64> {
        let inputs: Vec<_> = xs.iter().map(|&x| PartialTransition::new(vec![x], false)).collect();
        apply(m, &inputs, &ScanSchedule::serial())
            .unwrap()
            .states
            .iter()
            .map(|s| s.carry[0].re)
            .collect()
    }

    #[test]
    fn half_decay_recurrence() {
        let m = scalar_model(ModelKind::S5, 0.5);
        assert_eq!(carries(&m, &[1.0, 1.0, 1.0]), vec![1.0, 1.5, 1.75]);
    }

    #[test]
    fn unit_eigenvalue_is_prefix_sum() {
        let m = scalar_model(ModelKind::Lru, 1.0);
        assert_eq!(carries(&m, &[1.0, 2.0, 3.0]), vec![1.0, 3.0, 6.0]);
    }

    #[test]
    fn identity_is_neutral() {
        let op = DiagMonoid::new(2);
        let x = DiagState {
            decay: vec![Complex64::new(0.3, 0.4), Complex64::new(-0.5, 0.1)],
            carry: vec![Complex64::new(1.0, -2.0), Complex64::new(0.5, 0.25)],
        };
        assert_eq!(op.combine(&x, &op.identity()), x);
        assert_eq!(op.combine(&op.identity(), &x), x);
    }

    #[test]
    fn resettable_matches_per_episode_runs() {
        let m = scalar_model(ModelKind::S5, 0.5);
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let inputs: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| PartialTransition::new(vec![x], i == 0 || i == 3))
            .collect();
        let joint: Vec<f64> = apply_resettable(&m, &inputs, &ScanSchedule::serial())
            .unwrap()
            .states
            .iter()
            .map(|s| s.carry[0].re)
            .collect();
        let mut expected = carries(&m, &xs[..3]);
        expected.extend(carries(&m, &xs[3..]));
        assert_eq!(joint, expected);
    }

    #[test]
    fn parallel_matches_sequential_states() {
        let spec = ModelSpec::new(ModelKind::Lru, 3, 4, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = DiagModel::new(spec.clone(), spec.init_params(&mut rng).unwrap()).unwrap();
        let inputs: Vec<_> = (0..512)
            .map(|_| PartialTransition::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), false))
            .collect();
        let lifted = m.lift(&inputs).unwrap();
        let seq = scan_sequential(m.monoid(), &lifted);
        let par = scan_parallel(m.monoid(), &lifted, &ScanSchedule::new(4, 16).unwrap());
        for (a, b) in seq.iter().zip(&par) {
            for (x, y) in a.carry.iter().zip(&b.carry) {
                assert!((x - y).norm() <= 1e-6 * x.norm().max(1.0));
            }
        }
    }

    #[test]
    fn dense_reference_agrees_with_diagonal() {
        let spec = ModelSpec::new(ModelKind::S5, 2, 3, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DiagModel::new(spec.clone(), spec.init_params(&mut rng).unwrap()).unwrap();
        let inputs: Vec<_> = (0..40)
            .map(|_| PartialTransition::new(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], false))
            .collect();
        let lifted = m.lift(&inputs).unwrap();
        let dense: Vec<_> = lifted.iter().map(DenseState::from_diag).collect();
        let sched = ScanSchedule::new(2, 8).unwrap();
        let a = scan_parallel(m.monoid(), &lifted, &sched);
        let b = scan_parallel(&DenseMonoid::new(3), &dense, &sched);
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.carry.iter().zip(&y.carry) {
                assert!((p - q).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn initial_eigenvalues_lie_in_the_ring() {
        for kind in [ModelKind::S5, ModelKind::Lru] {
            let spec = ModelSpec::new(kind, 2, 2, 64, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let m = DiagModel::new(spec.clone(), spec.init_params(&mut rng).unwrap()).unwrap();
            for l in m.eigenvalues() {
                assert!(l.norm() >= EIGEN_MIN_RADIUS - 1e-12 && l.norm() <= EIGEN_MAX_RADIUS + 1e-12);
            }
        }
    }
}
