//! Concrete memory models: linear attention, S5, LRU and FFM, plus a
//! memoryless pass-through used as a control.
//!
//! Each model is described by a [`ModelSpec`] and a [`ParamSet`] with local
//! parameter names. The lift and readout are written once as tape
//! operations and shared by two routes:
//!
//! * the scan route ([`Memoroid`] impls) evaluates lift and readout on
//!   constants and runs the monoid through the parallel scan;
//! * the tape route ([`ModelSpec::forward_tape`]) runs the step form of the
//!   recurrence as a fused tape node so gradients flow through it.

pub mod diag;
pub mod ffm;
pub mod linattn;
pub mod nn;
pub mod passthrough;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::memoroid::{apply, apply_resettable, step, PartialTransition};
use crate::params::ParamSet;
use crate::scan::ScanSchedule;

pub use diag::{DenseMonoid, DenseState, DiagModel, DiagMonoid, DiagState};
pub use ffm::{Ffm, FfmMonoid, FfmState};
pub use linattn::{LinAttn, LinAttnMonoid, LinAttnState};
pub use nn::Scope;
pub use passthrough::{Passthrough, PassthroughMonoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    LinAttn,
    S5,
    Lru,
    Ffm,
    Passthrough,
}

impl ModelKind {
    pub const MEMORY_MODELS: [ModelKind; 4] = [ModelKind::LinAttn, ModelKind::S5, ModelKind::Lru, ModelKind::Ffm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinAttn => "linattn",
            ModelKind::S5 => "s5",
            ModelKind::Lru => "lru",
            ModelKind::Ffm => "ffm",
            ModelKind::Passthrough => "passthrough",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linattn" => Ok(ModelKind::LinAttn),
            "s5" => Ok(ModelKind::S5),
            "lru" => Ok(ModelKind::Lru),
            "ffm" => Ok(ModelKind::Ffm),
            "passthrough" => Ok(ModelKind::Passthrough),
            other => Err(Error::invalid(
                "model",
                format!("unknown model `{other}` (expected linattn, s5, lru, ffm or passthrough)"),
            )),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_true() -> bool {
    true
}

/// Shape of a memory model.
///
/// `state_dim` is `m` (key dimension for linear attention, number of
/// eigenvalues for S5/LRU, trace rows for FFM); `context` is FFM's `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub state_dim: usize,
    #[serde(default = "default_context")]
    pub context: usize,
    pub hidden: usize,
    /// Linear attention only: add the observation to the attention readout.
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Linear attention only: pass the readout through an MLP.
    #[serde(default = "default_true")]
    pub readout_mlp: bool,
}

fn default_context() -> usize {
    1
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_dim: usize, output_dim: usize, state_dim: usize, hidden: usize) -> Self {
        Self {
            kind,
            input_dim,
            output_dim,
            state_dim,
            context: 4,
            hidden,
            residual: true,
            readout_mlp: true,
        }
    }

    pub fn with_context(mut self, context: usize) -> Self {
        self.context = context;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("state_dim", self.state_dim),
            ("hidden", self.hidden),
            ("context", self.context),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        let needs_square = match self.kind {
            ModelKind::Ffm | ModelKind::Passthrough => true,
            ModelKind::LinAttn => !self.readout_mlp,
            ModelKind::S5 | ModelKind::Lru => false,
        };
        if needs_square && self.output_dim != self.input_dim {
            return Err(Error::invalid(
                "output_dim",
                format!(
                    "{} needs output_dim == input_dim ({} != {})",
                    self.kind, self.output_dim, self.input_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        Ok(match self.kind {
            ModelKind::LinAttn => linattn::init(self, rng),
            ModelKind::S5 | ModelKind::Lru => diag::init(self, rng),
            ModelKind::Ffm => ffm::init(self, rng),
            ModelKind::Passthrough => ParamSet::new(),
        })
    }

    pub fn build(&self, params: ParamSet) -> Result<AnyModel> {
        Ok(match self.kind {
            ModelKind::LinAttn => AnyModel::LinAttn(LinAttn::new(self.clone(), params)?),
            ModelKind::S5 | ModelKind::Lru => AnyModel::Diag(DiagModel::new(self.clone(), params)?),
            ModelKind::Ffm => AnyModel::Ffm(Ffm::new(self.clone(), params)?),
            ModelKind::Passthrough => AnyModel::Passthrough(Passthrough::new(self.clone())?),
        })
    }

    /// Step-form forward pass on the tape: `obs` is `[n × input_dim]`,
    /// `begins[t]` restarts the recurrence. Returns `[n × output_dim]`.
    pub fn forward_tape(&self, g: &mut Graph, w: Scope<'_>, obs: Var, begins: &[bool]) -> Result<Var> {
        let (n, d) = g.shape(obs);
        if d != self.input_dim {
            return Err(Error::dims(self.input_dim, d, "observation width"));
        }
        if n != begins.len() {
            return Err(Error::dims(n, begins.len(), "begin flags"));
        }
        match self.kind {
            ModelKind::LinAttn => linattn::forward_tape(self, g, w, obs, begins),
            ModelKind::S5 | ModelKind::Lru => diag::forward_tape(self, g, w, obs, begins),
            ModelKind::Ffm => ffm::forward_tape(self, g, w, obs, begins),
            ModelKind::Passthrough => Ok(obs),
        }
    }

    /// Checks every expected tensor is present with the right shape.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let reference = self.init_params(&mut rng)?;
        for (name, t) in reference.iter() {
            match params.get(name) {
                None => return Err(Error::invalid(name, "missing parameter")),
                Some(p) if p.dim() != t.dim() => {
                    return Err(Error::invalid(
                        name,
                        format!("shape {:?}, expected {:?}", p.dim(), t.dim()),
                    ))
                }
                Some(p) if !p.iter().all(|v| v.is_finite()) => return Err(Error::invalid(name, "non-finite entry")),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("model spec serializes")
    }
}

/// Any model behind one type, for callers that pick the model at run time.
#[derive(Debug, Clone)]
pub enum AnyModel {
    LinAttn(LinAttn),
    Diag(DiagModel),
    Ffm(Ffm),
    Passthrough(Passthrough),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::LinAttn($m) => $body,
            AnyModel::Diag($m) => $body,
            AnyModel::Ffm($m) => $body,
            AnyModel::Passthrough($m) => $body,
        }
    };
}

impl AnyModel {
    pub fn spec(&self) -> &ModelSpec {
        dispatch!(self, m => m.spec())
    }

    /// Markov states of a single sequence via the parallel scan.
    pub fn run(&self, inputs: &[PartialTransition], sched: &ScanSchedule) -> Result<Array2<f64>> {
        dispatch!(self, m => apply(m, inputs, sched).map(|o| o.markov))
    }

    /// Markov states of concatenated episodes via the resettable scan.
    pub fn run_resettable(&self, inputs: &[PartialTransition], sched: &ScanSchedule) -> Result<Array2<f64>> {
        dispatch!(self, m => apply_resettable(m, inputs, sched).map(|o| o.markov))
    }
}

/// Recurrent state of an [`AnyModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum AnyState {
    LinAttn(LinAttnState),
    Diag(DiagState),
    Ffm(FfmState),
    Passthrough(Option<Vec<f64>>),
}

macro_rules! step_variant {
    ($model:expr, $state:expr, $input:expr, $variant:ident) => {{
        let prev = match $state {
            None => None,
            Some(AnyState::$variant(h)) => Some(h),
            Some(_) => return Err(Error::Precondition("recurrent state belongs to another model".into())),
        };
        let (next, out) = step($model, prev, $input)?;
        Ok((AnyState::$variant(next), out))
    }};
}

impl AnyModel {
    /// One recurrent update for rollouts.
    pub fn step(&self, state: Option<&AnyState>, input: &PartialTransition) -> Result<(AnyState, Vec<f64>)> {
        match self {
            AnyModel::LinAttn(m) => step_variant!(m, state, input, LinAttn),
            AnyModel::Diag(m) => step_variant!(m, state, input, Diag),
            AnyModel::Ffm(m) => step_variant!(m, state, input, Ffm),
            AnyModel::Passthrough(m) => step_variant!(m, state, input, Passthrough),
        }
    }
}

/// Evaluates `f` on a throwaway tape with `params` bound as constants and
/// the observations stacked into one matrix.
pub(crate) fn on_constants<R>(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &[PartialTransition],
    f: impl FnOnce(&mut Graph, Scope<'_>, Var) -> Result<R>,
) -> Result<R> {
    if let Some(bad) = inputs.iter().find(|p| p.obs.len() != spec.input_dim) {
        return Err(Error::dims(spec.input_dim, bad.obs.len(), "observation width"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let obs = g.constant(nn::stack_rows(inputs.iter().map(|p| p.obs.as_slice()), spec.input_dim));
    f(&mut g, Scope::new(&bound, ""), obs)
}
