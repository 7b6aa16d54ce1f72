//! A memoryless control: the Markov state is the current observation.
//!
//! The monoid keeps the right-most element, so the scan never mixes
//! positions.

use ndarray::Array2;

use super::nn::stack_rows;
use super::{ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::memoroid::{Memoroid, PartialTransition};
use crate::scan::AssociativeOp;

#[derive(Debug, Clone, Copy)]
pub struct PassthroughMonoid;

impl AssociativeOp for PassthroughMonoid {
    type Elem = Option<Vec<f64>>;

    fn identity(&self) -> Option<Vec<f64>> {
        None
    }

    fn combine(&self, a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> Option<Vec<f64>> {
        b.clone().or_else(|| a.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Passthrough {
    spec: ModelSpec,
}

impl Passthrough {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.kind != ModelKind::Passthrough {
            return Err(Error::invalid("kind", format!("{} is not passthrough", spec.kind)));
        }
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

impl Memoroid for Passthrough {
    type Op = PassthroughMonoid;

    fn monoid(&self) -> &PassthroughMonoid {
        &PassthroughMonoid
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn lift(&self, inputs: &[PartialTransition]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(inputs.iter().map(|p| Some(p.obs.clone())).collect())
    }

    fn readout(&self, states: &[Option<Vec<f64>>], _inputs: &[PartialTransition]) -> Result<Array2<f64>> {
        let rows: Vec<&[f64]> = states
            .iter()
            .map(|s| {
                s.as_deref()
                    .ok_or_else(|| Error::Degenerate("readout of the empty state".into()))
            })
            .collect::<Result<_>>()?;
        Ok(stack_rows(rows.into_iter(), self.spec.output_dim))
    }
}
