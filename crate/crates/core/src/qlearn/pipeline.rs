//! Embedding → memory model → post blocks → Q head.
//!
//! Parameter names: `embed.*` (one block), `mem.*` (the memory model's own
//! names), `post.0.*`, `post.1.*` (blocks) and `head.*` (linear to one value
//! per action).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::memoroid::PartialTransition;
use crate::models::nn::{self, Scope};
use crate::models::{AnyModel, AnyState, ModelKind, ModelSpec};
use crate::params::{BoundParams, ParamSet};
use crate::scan::ScanSchedule;

pub const MEMORY_PREFIX: &str = "mem.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub obs_dim: usize,
    pub num_actions: usize,
    pub hidden: usize,
    pub memory: ModelSpec,
}

impl PipelineSpec {
    pub fn new(
        obs_dim: usize,
        num_actions: usize,
        hidden: usize,
        kind: ModelKind,
        state_dim: usize,
        context: usize,
    ) -> Self {
        Self {
            obs_dim,
            num_actions,
            hidden,
            memory: ModelSpec::new(kind, hidden, hidden, state_dim, hidden).with_context(context),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("obs_dim", self.obs_dim),
            ("num_actions", self.num_actions),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if self.memory.input_dim != self.hidden || self.memory.output_dim != self.hidden {
            return Err(Error::invalid(
                "memory",
                "memory input and output width must equal hidden",
            ));
        }
        self.memory.validate()
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        let mut ps = ParamSet::new();
        nn::init_linear(&mut ps, "embed", self.obs_dim, self.hidden, rng);
        let mem = self.memory.init_params(rng)?;
        ps.extend_prefixed(MEMORY_PREFIX, &mem);
        nn::init_linear(&mut ps, "post.0", self.hidden, self.hidden, rng);
        nn::init_linear(&mut ps, "post.1", self.hidden, self.hidden, rng);
        nn::init_linear(&mut ps, "head", self.hidden, self.num_actions, rng);
        Ok(ps)
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let reference = self.init_params(&mut rng)?;
        if !reference.same_structure(params) {
            return Err(Error::invalid(
                "params",
                "parameter names or shapes do not match the pipeline",
            ));
        }
        Ok(())
    }

    pub fn memory_model(&self, params: &ParamSet) -> Result<AnyModel> {
        self.memory.build(params.subset(MEMORY_PREFIX))
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("pipeline spec serializes")
    }
}

fn embed_vars(g: &mut Graph, w: Scope<'_>, obs: Var) -> Var {
    nn::block(g, w, "embed", obs)
}

fn head_vars(g: &mut Graph, w: Scope<'_>, markov: Var) -> Var {
    let h0 = nn::block(g, w, "post.0", markov);
    let h1 = nn::block(g, w, "post.1", h0);
    nn::linear(g, w, "head", h1)
}

/// Q-values `[n × |A|]` on the tape, running the memory in step form.
pub fn q_tape(spec: &PipelineSpec, g: &mut Graph, bound: &BoundParams, obs: Var, begins: &[bool]) -> Result<Var> {
    let (n, d) = g.shape(obs);
    if d != spec.obs_dim {
        return Err(Error::dims(spec.obs_dim, d, "observation width"));
    }
    if n == 0 || !begins[0] {
        return Err(Error::Precondition(
            "a sequence must be non-empty and start with begin = 1".into(),
        ));
    }
    let root = Scope::new(bound, "");
    let embedded = embed_vars(g, root, obs);
    let markov = spec
        .memory
        .forward_tape(g, Scope::new(bound, MEMORY_PREFIX), embedded, begins)?;
    Ok(head_vars(g, root, markov))
}

#[derive(Debug, Clone)]
pub struct QForward {
    pub markov: Array2<f64>,
    pub q: Array2<f64>,
}

/// Markov states and Q-values for concatenated episodes via the resettable
/// parallel scan. No gradients are recorded.
pub fn q_forward(
    spec: &PipelineSpec,
    params: &ParamSet,
    inputs: &[PartialTransition],
    sched: &ScanSchedule,
) -> Result<QForward> {
    if inputs.is_empty() {
        return Err(Error::Precondition("q_forward needs at least one input".into()));
    }
    if let Some(bad) = inputs.iter().find(|p| p.obs.len() != spec.obs_dim) {
        return Err(Error::dims(spec.obs_dim, bad.obs.len(), "observation width"));
    }
    let model = spec.memory_model(params)?;
    let outer = outer_params(params);
    let mut g = Graph::new();
    let bound = outer.bind(&mut g, false);
    let root = Scope::new(&bound, "");
    let obs = g.constant(nn::stack_rows(inputs.iter().map(|p| p.obs.as_slice()), spec.obs_dim));
    let embedded = embed_vars(&mut g, root, obs);
    let lifted: Vec<PartialTransition> = g
        .value(embedded)
        .rows()
        .into_iter()
        .zip(inputs)
        .map(|(row, p)| PartialTransition::new(row.to_vec(), p.begin))
        .collect();
    let markov = model.run_resettable(&lifted, sched)?;
    let markov_var = g.constant(markov.clone());
    let q = head_vars(&mut g, root, markov_var);
    Ok(QForward {
        markov,
        q: g.value(q).clone(),
    })
}

/// Everything except the memory model's parameters.
fn outer_params(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (k, v) in params.iter().filter(|(k, _)| !k.starts_with(MEMORY_PREFIX)) {
        out.insert(k, v.clone());
    }
    out
}

/// Gradients of `Σ seed ⊙ Q` with respect to every parameter and every
/// observation.
pub fn backward(
    spec: &PipelineSpec,
    params: &ParamSet,
    inputs: &[PartialTransition],
    seed: Array2<f64>,
) -> Result<(ParamSet, Array2<f64>)> {
    if inputs.is_empty() {
        return Err(Error::Precondition("backward needs at least one input".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let obs = g.param(nn::stack_rows(inputs.iter().map(|p| p.obs.as_slice()), spec.obs_dim));
    let begins: Vec<bool> = inputs.iter().map(|p| p.begin).collect();
    let q = q_tape(spec, &mut g, &bound, obs, &begins)?;
    if seed.dim() != g.shape(q) {
        return Err(Error::dims(
            g.shape(q).0 * g.shape(q).1,
            seed.len(),
            "loss adjoint shape",
        ));
    }
    let grads = g.backward_with(q, seed);
    let obs_grad = grads.get_or_zeros(obs, (inputs.len(), spec.obs_dim));
    Ok((bound.collect_grads(&grads, params), obs_grad))
}

/// Step-by-step evaluation for rollouts.
pub struct Actor {
    spec: PipelineSpec,
    outer: ParamSet,
    model: AnyModel,
    state: Option<AnyState>,
}

impl Actor {
    pub fn new(spec: &PipelineSpec, params: &ParamSet) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            outer: outer_params(params),
            model: spec.memory_model(params)?,
            state: None,
        })
    }

    /// Q-values after observing `obs`; `begin` restarts the memory.
    pub fn q_values(&mut self, obs: &[f64], begin: bool) -> Result<Vec<f64>> {
        if obs.len() != self.spec.obs_dim {
            return Err(Error::dims(self.spec.obs_dim, obs.len(), "observation width"));
        }
        if self.state.is_none() && !begin {
            return Err(Error::Precondition(
                "the first step of a rollout must have begin = 1".into(),
            ));
        }
        let mut g = Graph::new();
        let bound = self.outer.bind(&mut g, false);
        let root = Scope::new(&bound, "");
        let obs_var = g.constant(Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector"));
        let embedded = embed_vars(&mut g, root, obs_var);
        let input = PartialTransition::new(g.value(embedded).row(0).to_vec(), begin);
        let (next, markov) = self.model.step(self.state.as_ref(), &input)?;
        self.state = Some(next);
        let markov_var = g.constant(Array2::from_shape_vec((1, markov.len()), markov).expect("row vector"));
        let q = head_vars(&mut g, root, markov_var);
        Ok(g.value(q).row(0).to_vec())
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut impl Rng, lens: &[usize], dim: usize) -> Vec<PartialTransition> {
        lens.iter()
            .flat_map(|&l| (0..l).map(move |t| t == 0))
            .map(|b| PartialTransition::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), b))
            .collect()
    }

    #[test]
    fn scan_route_matches_tape_route() {
        for kind in ModelKind::MEMORY_MODELS {
            let spec = PipelineSpec::new(3, 2, 8, kind, 4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let params = spec.init_params(&mut rng).unwrap();
            let inputs = random_inputs(&mut rng, &[5, 1, 9], 3);
            let scan = q_forward(&spec, &params, &inputs, &ScanSchedule::new(2, 4).unwrap()).unwrap();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let obs = g.constant(nn::stack_rows(inputs.iter().map(|p| p.obs.as_slice()), 3));
            let begins: Vec<bool> = inputs.iter().map(|p| p.begin).collect();
            let q = q_tape(&spec, &mut g, &bound, obs, &begins).unwrap();
            for (a, b) in scan.q.iter().zip(g.value(q).iter()) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn actor_matches_batch_forward() {
        let spec = PipelineSpec::new(3, 2, 8, ModelKind::Ffm, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = spec.init_params(&mut rng).unwrap();
        let inputs = random_inputs(&mut rng, &[6], 3);
        let batch = q_forward(&spec, &params, &inputs, &ScanSchedule::serial()).unwrap();
        let mut actor = Actor::new(&spec, &params).unwrap();
        for (t, p) in inputs.iter().enumerate() {
            let q = actor.q_values(&p.obs, p.begin).unwrap();
            for (a, b) in q.iter().zip(batch.q.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_headless_sequences() {
        let spec = PipelineSpec::new(2, 2, 4, ModelKind::Lru, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = spec.init_params(&mut rng).unwrap();
        let inputs = vec![PartialTransition::new(vec![0.0, 1.0], false)];
        assert!(q_forward(&spec, &params, &inputs, &ScanSchedule::serial()).is_err());
        assert!(q_forward(&spec, &params, &[], &ScanSchedule::serial()).is_err());
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
