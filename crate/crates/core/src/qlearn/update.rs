//! Deep Q updates over tape batches and segment batches.
//!
//! Both routes reduce to one masked squared-error loss over a concatenated
//! sequence with begin flags: tape batches keep their own flags and weight
//! every position, segment batches force a reset at every row start and
//! weight positions by the mask.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::pipeline::{q_forward, q_tape, PipelineSpec};
use crate::autodiff::Graph;
use crate::batching::{mask_prefix_len, SegmentBatch, Transition};
use crate::error::{Error, Result};
use crate::memoroid::PartialTransition;
use crate::models::nn;
use crate::params::ParamSet;
use crate::scan::ScanSchedule;

/// How next-state Markov states are computed for the bootstrap target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextStateMode {
    /// Scan `(o'_j, b_j)`: within an episode `s'_t` sees `o_1 … o_{t+1}`.
    #[default]
    Literal,
    /// Scan `o_0, o'_0, o'_1, …` and drop the first state, so `s'_t` sees
    /// the full history `o_0 … o_{t+1}`.
    FullHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QLearnOptions {
    pub gamma: f64,
    /// Target update `φ ← βφ + (1 − β)θ`.
    pub polyak: f64,
    /// Drop the bootstrap term on terminal transitions.
    pub terminal_mask: bool,
    pub next_state: NextStateMode,
}

impl Default for QLearnOptions {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            polyak: 0.995,
            terminal_mask: true,
            next_state: NextStateMode::Literal,
        }
    }
}

impl QLearnOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("{} is outside [0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return Err(Error::invalid("polyak", format!("{} is outside [0, 1]", self.polyak)));
        }
        Ok(())
    }
}

/// Adam with optional linear warmup and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    pub clip_norm: Option<f64>,
    first: ParamSet,
    second: ParamSet,
    steps: usize,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, warmup: usize, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup,
            clip_norm,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.steps + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    /// Applies one step; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> f64 {
        assert!(params.same_structure(grads), "gradient layout must match parameters");
        let norm = grads.global_norm();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        norm
    }
}

/// Online and target parameters with the optimizer state.
#[derive(Debug, Clone)]
pub struct QLearner {
    pub spec: PipelineSpec,
    pub online: ParamSet,
    pub target: ParamSet,
    pub optimizer: Adam,
    pub options: QLearnOptions,
}

impl QLearner {
    pub fn new(spec: PipelineSpec, online: ParamSet, optimizer: Adam, options: QLearnOptions) -> Result<Self> {
        spec.check_params(&online)?;
        if !optimizer.first.same_structure(&online) {
            return Err(Error::invalid(
                "optimizer",
                "moment buffers do not match the parameters",
            ));
        }
        options.validate()?;
        Ok(Self {
            target: online.clone(),
            spec,
            online,
            optimizer,
            options,
        })
    }

    fn apply(&mut self, grads: &ParamSet) -> Result<()> {
        self.optimizer.step(&mut self.online, grads);
        if !self.online.is_finite() {
            return Err(Error::Degenerate("parameters became non-finite".into()));
        }
        self.target.polyak_from(&self.online, self.options.polyak);
        Ok(())
    }

    /// One TBB update; returns the loss before the step.
    pub fn tbb_update(&mut self, batch: &[Transition], sched: &ScanSchedule) -> Result<f64> {
        let (loss, grads) = tbb_loss_and_grads(&self.spec, &self.online, &self.target, batch, &self.options, sched)?;
        self.apply(&grads)?;
        Ok(loss)
    }

    /// One SBB update; returns the loss before the step.
    pub fn sbb_update(&mut self, batch: &SegmentBatch, sched: &ScanSchedule) -> Result<f64> {
        let (loss, grads) = sbb_loss_and_grads(&self.spec, &self.online, &self.target, batch, &self.options, sched)?;
        self.apply(&grads)?;
        Ok(loss)
    }
}

/// Loss and parameter gradients of a masked Q regression.
#[derive(Debug, Clone)]
pub struct QLoss {
    pub loss: f64,
    pub grads: ParamSet,
    /// `∂loss/∂o`, one row per position.
    pub obs_grads: Array2<f64>,
    pub targets: Vec<f64>,
}

/// Bootstrap targets `r + γ (1 − d) max_a Q_φ(s', a)`.
pub fn q_targets(
    spec: &PipelineSpec,
    target: &ParamSet,
    transitions: &[Transition],
    begins: &[bool],
    options: &QLearnOptions,
    sched: &ScanSchedule,
) -> Result<Vec<f64>> {
    let next_max: Vec<f64> = if options.gamma == 0.0 {
        vec![0.0; transitions.len()]
    } else {
        let q = match options.next_state {
            NextStateMode::Literal => {
                let inputs: Vec<PartialTransition> = transitions
                    .iter()
                    .zip(begins)
                    .map(|(t, &b)| PartialTransition::new(t.next_obs.clone(), b))
                    .collect();
                q_forward(spec, target, &inputs, sched)?.q
            }
            NextStateMode::FullHistory => {
                let mut inputs = Vec::with_capacity(transitions.len() * 2);
                let mut keep = Vec::with_capacity(transitions.len());
                for (t, &b) in transitions.iter().zip(begins) {
                    if b {
                        inputs.push(PartialTransition::new(t.obs.clone(), true));
                    }
                    keep.push(inputs.len());
                    inputs.push(PartialTransition::new(t.next_obs.clone(), false));
                }
                let full = q_forward(spec, target, &inputs, sched)?.q;
                full.select(ndarray::Axis(0), &keep)
            }
        };
        q.rows()
            .into_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    };
    Ok(transitions
        .iter()
        .zip(next_max)
        .map(|(t, m)| {
            let live = if options.terminal_mask && t.done { 0.0 } else { 1.0 };
            t.reward + options.gamma * live * m
        })
        .collect())
}

/// A concatenated sequence with per-position begin flags and loss weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSequence<'a> {
    pub transitions: &'a [Transition],
    pub begins: &'a [bool],
    pub weights: &'a [f64],
}

/// `Σ w (Q_θ(s, a) − ŷ)² / Σ w` over one concatenated sequence.
pub fn masked_q_loss(
    spec: &PipelineSpec,
    online: &ParamSet,
    target: &ParamSet,
    seq: WeightedSequence<'_>,
    options: &QLearnOptions,
    sched: &ScanSchedule,
) -> Result<QLoss> {
    let WeightedSequence {
        transitions,
        begins,
        weights,
    } = seq;
    let n = transitions.len();
    if n == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    if begins.len() != n || weights.len() != n {
        return Err(Error::dims(
            n,
            begins.len().min(weights.len()),
            "batch flags and weights",
        ));
    }
    if let Some(t) = transitions.iter().find(|t| t.action >= spec.num_actions) {
        return Err(Error::invalid("action", format!("{} out of range", t.action)));
    }
    options.validate()?;
    let targets = q_targets(spec, target, transitions, begins, options, sched)?;
    let total: f64 = weights.iter().sum();
    let mut g = Graph::new();
    let bound = online.bind(&mut g, true);
    let obs = g.param(nn::stack_rows(
        transitions.iter().map(|t| t.obs.as_slice()),
        spec.obs_dim,
    ));
    let q = q_tape(spec, &mut g, &bound, obs, begins)?;
    let actions: Vec<usize> = transitions.iter().map(|t| t.action).collect();
    let picked = g.gather(q, &actions);
    let y = g.constant(Array2::from_shape_vec((n, 1), targets.clone()).expect("column"));
    let err = g.sub(picked, y);
    let sq = g.mul(err, err);
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    let w = g.constant(Array2::from_shape_fn((n, 1), |(i, _)| weights[i] * scale));
    let weighted = g.mul(sq, w);
    let loss = g.sum_all(weighted);
    let grads = g.backward(loss);
    Ok(QLoss {
        loss: g.value(loss)[[0, 0]],
        grads: bound.collect_grads(&grads, online),
        obs_grads: grads.get_or_zeros(obs, (n, spec.obs_dim)),
        targets,
    })
}

/// Tape batch: whole episodes (the last possibly truncated), mean loss.
pub fn tbb_loss(
    spec: &PipelineSpec,
    online: &ParamSet,
    target: &ParamSet,
    batch: &[Transition],
    options: &QLearnOptions,
    sched: &ScanSchedule,
) -> Result<QLoss> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let begins: Vec<bool> = batch.iter().map(|t| t.begin).collect();
    let weights = vec![1.0; batch.len()];
    let seq = WeightedSequence {
        transitions: batch,
        begins: &begins,
        weights: &weights,
    };
    masked_q_loss(spec, online, target, seq, options, sched)
}

pub fn tbb_loss_and_grads(
    spec: &PipelineSpec,
    online: &ParamSet,
    target: &ParamSet,
    batch: &[Transition],
    options: &QLearnOptions,
    sched: &ScanSchedule,
) -> Result<(f64, ParamSet)> {
    tbb_loss(spec, online, target, batch, options, sched).map(|l| (l.loss, l.grads))
}

/// Segment batch: every row restarts the memory, loss weighted by masks.
pub fn sbb_loss(
    spec: &PipelineSpec,
    online: &ParamSet,
    target: &ParamSet,
    batch: &SegmentBatch,
    options: &QLearnOptions,
    sched: &ScanSchedule,
) -> Result<QLoss> {
    if batch.rows() == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut transitions = Vec::with_capacity(batch.rows() * batch.segment_len);
    let mut begins = Vec::with_capacity(transitions.capacity());
    let mut weights = Vec::with_capacity(transitions.capacity());
    for (seg, mask) in batch.segments.iter().zip(&batch.masks) {
        if seg.len() != batch.segment_len || mask.len() != batch.segment_len {
            return Err(Error::dims(
                batch.segment_len,
                seg.len().max(mask.len()),
                "segment row length",
            ));
        }
        mask_prefix_len(mask)?;
        for (k, (t, &m)) in seg.iter().zip(mask).enumerate() {
            transitions.push(t.clone());
            begins.push(k == 0);
            weights.push(if m { 1.0 } else { 0.0 });
        }
    }
    let seq = WeightedSequence {
        transitions: &transitions,
        begins: &begins,
        weights: &weights,
    };
    masked_q_loss(spec, online, target, seq, options, sched)
}

pub fn sbb_loss_and_grads(
    spec: &PipelineSpec,
    online: &ParamSet,
    target: &ParamSet,
    batch: &SegmentBatch,
    options: &QLearnOptions,
    sched: &ScanSchedule,
) -> Result<(f64, ParamSet)> {
    sbb_loss(spec, online, target, batch, options, sched).map(|l| (l.loss, l.grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn episode(rng: &mut impl Rng, len: usize, dim: usize, actions: usize) -> Vec<Transition> {
        let obs: Vec<Vec<f64>> = (0..=len)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        (0..len)
            .map(|t| Transition {
                obs: obs[t].clone(),
                action: rng.gen_range(0..actions),
                reward: rng.gen_range(-1.0..1.0),
                next_obs: obs[t + 1].clone(),
                begin: t == 0,
                done: t + 1 == len,
            })
            .collect()
    }

    fn setup(kind: ModelKind, seed: u64) -> (PipelineSpec, ParamSet, ParamSet, ChaCha8Rng) {
        let spec = PipelineSpec::new(3, 2, 6, kind, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = spec.init_params(&mut rng).unwrap();
        let target = spec.init_params(&mut rng).unwrap();
        (spec, online, target, rng)
    }

    #[test]
    fn zero_gamma_targets_are_rewards() {
        let (spec, online, target, mut rng) = setup(ModelKind::Lru, 0);
        let batch = episode(&mut rng, 6, 3, 2);
        let opts = QLearnOptions {
            gamma: 0.0,
            ..Default::default()
        };
        let l = tbb_loss(&spec, &online, &target, &batch, &opts, &ScanSchedule::serial()).unwrap();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        assert_eq!(l.targets, rewards);
    }

    #[test]
    fn terminal_targets_skip_bootstrap() {
        let (spec, online, target, mut rng) = setup(ModelKind::S5, 1);
        let mut batch = episode(&mut rng, 4, 3, 2);
        for t in &mut batch {
            t.done = true;
        }
        let sched = ScanSchedule::serial();
        let opts = QLearnOptions::default();
        let l = tbb_loss(&spec, &online, &target, &batch, &opts, &sched).unwrap();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        assert_eq!(l.targets, rewards);
        let unmasked = QLearnOptions {
            terminal_mask: false,
            ..opts
        };
        let l2 = tbb_loss(&spec, &online, &target, &batch, &unmasked, &sched).unwrap();
        assert_ne!(l2.targets, rewards);
    }

    #[test]
    fn fully_padded_row_contributes_nothing() {
        let (spec, online, target, mut rng) = setup(ModelKind::Ffm, 2);
        let ep = episode(&mut rng, 3, 3, 2);
        let ds = crate::batching::sbb_build_dataset([ep.as_slice()], 3, 3).unwrap();
        let mut padded = ds.clone();
        padded.segments.push(vec![Transition::zero(3); 3]);
        padded.masks.push(vec![false; 3]);
        let sched = ScanSchedule::serial();
        let opts = QLearnOptions::default();
        let a = sbb_loss(&spec, &online, &target, &ds, &opts, &sched).unwrap();
        let b = sbb_loss(&spec, &online, &target, &padded, &opts, &sched).unwrap();
        assert_eq!(a.loss, b.loss);
        for ((_, x), (_, y)) in a.grads.iter().zip(b.grads.iter()) {
            assert_eq!(x, y);
        }
        assert!(b.obs_grads.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_history_targets_see_first_observation() {
        let (spec, _, target, mut rng) = setup(ModelKind::Lru, 3);
        let batch = episode(&mut rng, 4, 3, 2);
        let sched = ScanSchedule::serial();
        let opts = QLearnOptions {
            next_state: NextStateMode::FullHistory,
            ..Default::default()
        };
        let begins: Vec<bool> = batch.iter().map(|t| t.begin).collect();
        let base = q_targets(&spec, &target, &batch, &begins, &opts, &sched).unwrap();
        let mut changed = batch.clone();
        changed[0].obs = vec![5.0, -5.0, 5.0];
        let moved = q_targets(&spec, &target, &changed, &begins, &opts, &sched).unwrap();
        assert_ne!(base, moved);
        let literal = QLearnOptions::default();
        let a = q_targets(&spec, &target, &batch, &begins, &literal, &sched).unwrap();
        let b = q_targets(&spec, &target, &changed, &begins, &literal, &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_warmup_ramps_linearly() {
        let mut ps = ParamSet::new();
        ps.insert("w", Array2::zeros((1, 1)));
        let mut adam = Adam::new(&ps, 1e-3, 4, None);
        assert!((adam.current_lr() - 0.25e-3).abs() < 1e-18);
        let g = ps.clone();
        for _ in 0..4 {
            adam.step(&mut ps, &g);
        }
        assert_eq!(adam.current_lr(), 1e-3);
    }

    #[test]
    fn polyak_extremes_through_updates() {
        for (beta, follows) in [(1.0, false), (0.0, true)] {
            let (spec, online, _, mut rng) = setup(ModelKind::LinAttn, 4);
            let opts = QLearnOptions {
                polyak: beta,
                ..Default::default()
            };
            let adam = Adam::new(&online, 1e-2, 0, None);
            let mut learner = QLearner::new(spec, online, adam, opts).unwrap();
            let before = learner.target.clone();
            let batch = episode(&mut rng, 5, 3, 2);
            learner.tbb_update(&batch, &ScanSchedule::serial()).unwrap();
            if follows {
                assert_eq!(learner.target, learner.online);
            } else {
                assert_eq!(learner.target, before);
                assert_ne!(learner.online, before);
            }
        }
    }
}
