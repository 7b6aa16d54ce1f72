//! Discounted returns and generalized advantage estimates as monoid scans.
//!
//! Both use the decayed-sum monoid `(a, r) • (a', r') = (a·a', a·r' + r)`.
//! A prefix scan gives discounted-from-start sums. Per-timestep targets
//! (return-to-go, advantages) are suffix scans: the sequence is reversed,
//! scanned under the resettable *opposite* monoid with the done flags as
//! resets (a terminal transition opens its episode in reversed order) and
//! reversed back.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::memoroid::{make_resettable, Memoroid, PartialTransition, ResettableElement};
use crate::scan::{scan_parallel, AssociativeOp, Opposite, ScanSchedule};

fn check_unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{v} is outside [0, 1]")))
    }
}

/// `(a, r)`: accumulated decay and accumulated discounted reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnElement {
    pub a: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ReturnMonoid {
    gamma: f64,
}

pub fn return_monoid(gamma: f64) -> Result<ReturnMonoid> {
    check_unit("gamma", gamma)?;
    Ok(ReturnMonoid { gamma })
}

impl ReturnMonoid {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lift(&self, reward: f64) -> ReturnElement {
        ReturnElement {
            a: self.gamma,
            r: reward,
        }
    }
}

impl AssociativeOp for ReturnMonoid {
    type Elem = ReturnElement;

    fn identity(&self) -> ReturnElement {
        ReturnElement { a: 1.0, r: 0.0 }
    }

    fn combine(&self, x: &ReturnElement, y: &ReturnElement) -> ReturnElement {
        ReturnElement {
            a: x.a * y.a,
            r: x.a * y.r + x.r,
        }
    }
}

/// `(a, g)`: accumulated decay and accumulated discounted TD residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeElement {
    pub a: f64,
    pub g: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GaeMonoid {
    gamma: f64,
    lambda: f64,
}

pub fn gae_monoid(gamma: f64, lambda: f64) -> Result<GaeMonoid> {
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    Ok(GaeMonoid { gamma, lambda })
}

impl GaeMonoid {
    pub fn lift(&self, delta: f64) -> GaeElement {
        GaeElement {
            a: self.gamma * self.lambda,
            g: delta,
        }
    }
}

impl AssociativeOp for GaeMonoid {
    type Elem = GaeElement;

    fn identity(&self) -> GaeElement {
        GaeElement { a: 1.0, g: 0.0 }
    }

    fn combine(&self, x: &GaeElement, y: &GaeElement) -> GaeElement {
        GaeElement {
            a: x.a * y.a,
            g: x.a * y.g + x.g,
        }
    }
}

/// The discounted return as a memoroid over one-dimensional observations
/// (the reward): `f(o, b) = (γ, o)`, `g((a, r), P̄) = r`.
#[derive(Debug, Clone, Copy)]
pub struct DiscountedReturn {
    monoid: ReturnMonoid,
}

impl DiscountedReturn {
    pub fn new(gamma: f64) -> Result<Self> {
        Ok(Self {
            monoid: return_monoid(gamma)?,
        })
    }
}

impl Memoroid for DiscountedReturn {
    type Op = ReturnMonoid;

    fn monoid(&self) -> &ReturnMonoid {
        &self.monoid
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn lift(&self, inputs: &[PartialTransition]) -> Result<Vec<ReturnElement>> {
        inputs
            .iter()
            .map(|p| match p.obs.as_slice() {
                [r] => Ok(self.monoid.lift(*r)),
                other => Err(Error::dims(1, other.len(), "discounted return observation")),
            })
            .collect()
    }

    fn readout(&self, states: &[ReturnElement], _inputs: &[PartialTransition]) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((states.len(), 1), |(i, _)| states[i].r))
    }
}

/// `Σ_{i ≤ t} γ^i r_i` for every `t`.
pub fn discounted_return_prefix(rewards: &[f64], gamma: f64, sched: &ScanSchedule) -> Result<Vec<f64>> {
    let op = return_monoid(gamma)?;
    let lifted: Vec<_> = rewards.iter().map(|&r| op.lift(r)).collect();
    Ok(scan_parallel(&op, &lifted, sched).into_iter().map(|e| e.r).collect())
}

fn check_episodes(n: usize, dones: &[bool]) -> Result<()> {
    if dones.len() != n {
        return Err(Error::dims(n, dones.len(), "done flags"));
    }
    if let Some(false) = dones.last() {
        return Err(Error::Precondition(
            "the last transition must end its episode (done = 1)".into(),
        ));
    }
    Ok(())
}

/// Suffix scan of already-lifted elements with episode resets at `dones`.
fn reverse_resettable_scan<O: AssociativeOp>(
    op: O,
    lifted: Vec<O::Elem>,
    dones: &[bool],
    sched: &ScanSchedule,
) -> Vec<O::Elem> {
    let tagged: Vec<_> = lifted
        .into_iter()
        .zip(dones)
        .rev()
        .map(|(v, &d)| ResettableElement::new(v, d))
        .collect();
    let op = make_resettable(Opposite(op));
    let mut out: Vec<O::Elem> = scan_parallel(&op, &tagged, sched)
        .into_iter()
        .map(|e| e.value)
        .collect();
    out.reverse();
    out
}

/// Per-timestep discounted return-to-go `G_t = Σ_{l ≥ t} γ^{l-t} r_l`,
/// truncated at the end of each episode.
pub fn return_to_go(rewards: &[f64], dones: &[bool], gamma: f64, sched: &ScanSchedule) -> Result<Vec<f64>> {
    let op = return_monoid(gamma)?;
    check_episodes(rewards.len(), dones)?;
    let lifted = rewards.iter().map(|&r| op.lift(r)).collect();
    Ok(reverse_resettable_scan(op, lifted, dones, sched)
        .into_iter()
        .map(|e| e.r)
        .collect())
}

fn td_residuals(rewards: &[f64], values: &[f64], next_values: &[f64], dones: &[bool], gamma: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    for (name, v) in [("values", values.len()), ("next_values", next_values.len())] {
        if v != n {
            return Err(Error::dims(n, v, name));
        }
    }
    Ok((0..n)
        .map(|t| {
            let bootstrap = if dones[t] { 0.0 } else { gamma * next_values[t] };
            rewards[t] + bootstrap - values[t]
        })
        .collect())
}

/// Generalized advantage estimates `A_t = Σ_l (γλ)^l δ_{t+l}` within each
/// episode, with `δ_t = r_t + γ(1 - d_t)V(s_{t+1}) - V(s_t)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
    sched: &ScanSchedule,
) -> Result<Vec<f64>> {
    let op = gae_monoid(gamma, lambda)?;
    check_episodes(rewards.len(), dones)?;
    let deltas = td_residuals(rewards, values, next_values, dones, gamma)?;
    let lifted = deltas.iter().map(|&d| op.lift(d)).collect();
    Ok(reverse_resettable_scan(op, lifted, dones, sched)
        .into_iter()
        .map(|e| e.g)
        .collect())
}

/// Reference backward loop for [`return_to_go`].
pub fn naive_return_to_go(rewards: &[f64], dones: &[bool], gamma: f64) -> Result<Vec<f64>> {
    check_unit("gamma", gamma)?;
    check_episodes(rewards.len(), dones)?;
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            acc = 0.0;
        }
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Reference backward loop for [`gae`].
pub fn naive_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    check_episodes(rewards.len(), dones)?;
    let deltas = td_residuals(rewards, values, next_values, dones, gamma)?;
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            acc = 0.0;
        }
        acc = deltas[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    Ok(out)
}
