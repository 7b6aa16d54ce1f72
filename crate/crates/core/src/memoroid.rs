//! Memoroids: a monoid plus a lift from partial transitions into the monoid
//! and a readout from recurrent states to Markov states, and the resettable
//! transformation that lets a single scan run over many concatenated
//! episodes.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scan::{scan_parallel, with_workers, AssociativeOp, ScanSchedule};

/// An observation and its begin flag, available while acting.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialTransition {
    pub obs: Vec<f64>,
    pub begin: bool,
}

impl PartialTransition {
    pub fn new(obs: Vec<f64>, begin: bool) -> Self {
        Self { obs, begin }
    }
}

/// Shorthand for the recurrent-state type of a memoroid.
pub type State<M> = <<M as Memoroid>::Op as AssociativeOp>::Elem;

/// `((H, •, e_I), f, g)`: a monoid, a lift `f` and a readout `g`.
///
/// Lift and readout are pure and position independent, so they are exposed
/// in batched form.
pub trait Memoroid: Sync {
    type Op: AssociativeOp;

    fn monoid(&self) -> &Self::Op;

    /// Markov state dimension.
    fn output_dim(&self) -> usize;

    /// `f(P̄_t)` for every input.
    fn lift(&self, inputs: &[PartialTransition]) -> Result<Vec<State<Self>>>;

    /// `g(h_t, P̄_t)` for every position; one row per position.
    fn readout(&self, states: &[State<Self>], inputs: &[PartialTransition]) -> Result<Array2<f64>>;
}

/// Recurrent states `h_t` and Markov states `s_t` of a memoroid run.
#[derive(Debug, Clone)]
pub struct MemoroidOutput<H> {
    pub states: Vec<H>,
    pub markov: Array2<f64>,
}

/// A monoid element tagged with a reset (begin) flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ResettableElement<H> {
    pub value: H,
    pub reset: bool,
}

impl<H> ResettableElement<H> {
    pub fn new(value: H, reset: bool) -> Self {
        Self { value, reset }
    }
}

/// The resettable monoid over `(A, b)` pairs with identity `(e_I, 0)` and
/// `(A, b) ∘ (A', b') = (sel(b', e_I, A) • A', b ∨ b')`.
///
/// The select is an exact branch, so the discarded left operand never
/// reaches the arithmetic.
#[derive(Debug, Clone)]
pub struct Resettable<O>(pub O);

pub fn make_resettable<O: AssociativeOp>(op: O) -> Resettable<O> {
    Resettable(op)
}

impl<O: AssociativeOp> Resettable<O> {
    pub fn inner(&self) -> &O {
        &self.0
    }
}

impl<O: AssociativeOp> AssociativeOp for Resettable<O> {
    type Elem = ResettableElement<O::Elem>;

    fn identity(&self) -> Self::Elem {
        ResettableElement::new(self.0.identity(), false)
    }

    fn combine(&self, left: &Self::Elem, right: &Self::Elem) -> Self::Elem {
        let value = if right.reset {
            self.0.combine(&self.0.identity(), &right.value)
        } else {
            self.0.combine(&left.value, &right.value)
        };
        ResettableElement::new(value, left.reset | right.reset)
    }
}

fn check_dims(inputs: &[PartialTransition]) -> Result<()> {
    if let Some(first) = inputs.first() {
        let d = first.obs.len();
        if let Some(bad) = inputs.iter().find(|p| p.obs.len() != d) {
            return Err(Error::dims(d, bad.obs.len(), "observation length within a sequence"));
        }
    }
    Ok(())
}

/// Runs a memoroid over a single episode: `h_t = e_I • f(P̄_0) • … • f(P̄_t)`
/// by parallel scan, then `s_t = g(h_t, P̄_t)`. Begin flags are ignored.
pub fn apply<M: Memoroid>(
    m: &M,
    inputs: &[PartialTransition],
    sched: &ScanSchedule,
) -> Result<MemoroidOutput<State<M>>> {
    check_dims(inputs)?;
    if inputs.is_empty() {
        return Ok(MemoroidOutput {
            states: Vec::new(),
            markov: Array2::zeros((0, m.output_dim())),
        });
    }
    let lifted = m.lift(inputs)?;
    let states = scan_parallel(m.monoid(), &lifted, sched);
    let markov = m.readout(&states, inputs)?;
    Ok(MemoroidOutput { states, markov })
}

/// Runs a memoroid over concatenated episodes. Each lifted element carries its
/// begin flag and the scan uses the resettable monoid, so position `t` only
/// sees inputs from its own episode.
pub fn apply_resettable<M: Memoroid>(
    m: &M,
    inputs: &[PartialTransition],
    sched: &ScanSchedule,
) -> Result<MemoroidOutput<State<M>>> {
    check_dims(inputs)?;
    let Some(first) = inputs.first() else {
        return Ok(MemoroidOutput {
            states: Vec::new(),
            markov: Array2::zeros((0, m.output_dim())),
        });
    };
    if !first.begin {
        return Err(Error::Precondition(
            "a resettable sequence must start with begin = 1".into(),
        ));
    }
    let lifted = m.lift(inputs)?;
    let tagged: Vec<ResettableElement<State<M>>> = with_workers(sched, || {
        lifted
            .into_par_iter()
            .zip(inputs.par_iter())
            .map(|(value, p)| ResettableElement::new(value, p.begin))
            .collect()
    });
    let op = Resettable(m.monoid());
    let scanned = scan_parallel(&op, &tagged, sched);
    let states: Vec<State<M>> = scanned.into_iter().map(|e| e.value).collect();
    let markov = m.readout(&states, inputs)?;
    Ok(MemoroidOutput { states, markov })
}

/// Single recurrent update `M: H × P̄ → H × S` for rollouts. A begin flag
/// restarts from the identity.
pub fn step<M: Memoroid>(m: &M, state: Option<&State<M>>, input: &PartialTransition) -> Result<(State<M>, Vec<f64>)> {
    let op = m.monoid();
    let lifted = m
        .lift(std::slice::from_ref(input))?
        .pop()
        .expect("one lifted element per input");
    let prev = match state {
        Some(h) if !input.begin => h.clone(),
        _ => op.identity(),
    };
    let next = op.combine(&prev, &lifted);
    let markov = m.readout(std::slice::from_ref(&next), std::slice::from_ref(input))?;
    Ok((next, markov.row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::ops::IntAdd;
    use crate::scan::scan_sequential;
    use proptest::prelude::*;

    fn r(v: i64, b: bool) -> ResettableElement<i64> {
        ResettableElement::new(v, b)
    }

    #[test]
    fn proof_table_cases() {
        let op = make_resettable(IntAdd);
        // (A, 0) ∘ (A', 1) = (e_I • A', 1)
        assert_eq!(op.combine(&r(5, false), &r(3, true)), r(3, true));
        // (A, 1) ∘ (A', 0) = (A • A', 1)
        assert_eq!(op.combine(&r(5, true), &r(3, false)), r(8, true));
        // (A, 0) ∘ (A', 0) = (A • A', 0)
        assert_eq!(op.combine(&r(5, false), &r(3, false)), r(8, false));
        assert_eq!(op.combine(&op.identity(), &r(3, false)), r(3, false));
        assert_eq!(op.combine(&r(3, true), &op.identity()), r(3, true));
    }

    #[test]
    fn resettable_scan_restarts_at_flags() {
        let op = make_resettable(IntAdd);
        let xs = [r(1, false), r(2, false), r(3, true), r(4, false)];
        let a: Vec<i64> = scan_sequential(&op, &xs).into_iter().map(|e| e.value).collect();
        let mut oracle = scan_sequential(&IntAdd, &[1, 2]);
        oracle.extend(scan_sequential(&IntAdd, &[3, 4]));
        assert_eq!(a, oracle);
        assert_eq!(a, vec![1, 3, 3, 7]);
    }

    fn arb_elem() -> impl Strategy<Value = ResettableElement<i64>> {
        (-50i64..50, any::<bool>()).prop_map(|(v, b)| r(v, b))
    }

    proptest! {
        #[test]
        fn resettable_add_is_associative(x in arb_elem(), y in arb_elem(), z in arb_elem()) {
            let op = make_resettable(IntAdd);
            prop_assert_eq!(
                op.combine(&op.combine(&x, &y), &z),
                op.combine(&x, &op.combine(&y, &z))
            );
        }

        #[test]
        fn all_zero_flags_match_base_scan(xs in proptest::collection::vec(-100i64..100, 0..300)) {
            let op = make_resettable(IntAdd);
            let tagged: Vec<_> = xs.iter().map(|&v| r(v, false)).collect();
            let got: Vec<i64> = scan_sequential(&op, &tagged).into_iter().map(|e| e.value).collect();
            prop_assert_eq!(got, scan_sequential(&IntAdd, &xs));
        }
    }
}
