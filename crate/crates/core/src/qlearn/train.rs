//! Training runs: ε-greedy collection into a tape, TBB or SBB updates and
//! periodic greedy evaluation.
//!
//! Outputs under the run directory:
//!
//! * `metrics.jsonl`: one record per evaluation, fully determined by the
//!   config and seed;
//! * `summary.csv`: one row per seed;
//! * `timing.jsonl`: wall-clock per evaluation (kept apart so the two files
//!   above are reproducible byte for byte);
//! * `checkpoint_seed{seed}.bin`: final online parameters;
//! * `tape_seed{seed}.bin`: the final tape, when `save_tape` is set.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{TaskKind, ToyEnv, ToyEnvSpec};
use super::pipeline::{argmax, Actor, PipelineSpec};
use super::update::{Adam, NextStateMode, QLearnOptions, QLearner};
use crate::batching::{sbb_sample_tape, Tape, Transition};
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::params::ParamSet;
use crate::scan::ScanSchedule;

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    Tbb,
    Sbb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    RepeatPrevious,
    RepeatFirst,
}

/// One experiment; every key of the flat TOML document maps to a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TaskName,
    /// Lag for `repeat_previous`.
    pub k: usize,
    pub episode_length: usize,
    pub num_symbols: usize,
    pub model: ModelKind,
    pub batching: Batching,
    /// Segment length `L` (SBB only).
    pub segment_length: Option<usize>,
    /// Transitions per update.
    pub batch_size: usize,
    pub gamma: f64,
    /// Target update `φ ← βφ + (1 − β)θ`.
    pub polyak: f64,
    pub lr: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; `0` disables it.
    pub clip_norm: f64,
    pub hidden: usize,
    pub state_dim: usize,
    pub context: usize,
    pub seeds: Vec<u64>,
    /// Epochs of uniformly random collection before training.
    pub random_epochs: usize,
    pub train_epochs: usize,
    pub episodes_per_epoch: usize,
    pub updates_per_epoch: usize,
    pub capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of the training epochs over which ε anneals linearly.
    pub epsilon_anneal: f64,
    pub terminal_mask: bool,
    pub next_state: NextStateMode,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Also write each seed's final tape next to its checkpoint.
    pub save_tape: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskName::RepeatPrevious,
            k: 1,
            episode_length: 16,
            num_symbols: 4,
            model: ModelKind::Lru,
            batching: Batching::Tbb,
            segment_length: None,
            batch_size: 256,
            gamma: 0.9,
            polyak: 0.99,
            lr: 1e-3,
            warmup: 200,
            clip_norm: 1.0,
            hidden: 32,
            state_dim: 16,
            context: 4,
            seeds: vec![0],
            random_epochs: 50,
            train_epochs: 2000,
            episodes_per_epoch: 1,
            updates_per_epoch: 1,
            capacity: 20_000,
            eval_interval: 100,
            eval_episodes: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal: 0.5,
            terminal_mask: true,
            next_state: NextStateMode::Literal,
            workers: None,
            output_dir: None,
            save_tape: false,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::invalid(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{v} is outside [0, 1]")))
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn env_spec(&self) -> ToyEnvSpec {
        ToyEnvSpec {
            kind: match self.task {
                TaskName::RepeatPrevious => TaskKind::RepeatPrevious { k: self.k },
                TaskName::RepeatFirst => TaskKind::RepeatFirst,
            },
            episode_length: self.episode_length,
            num_symbols: self.num_symbols,
        }
    }

    pub fn pipeline_spec(&self) -> PipelineSpec {
        let env = self.env_spec();
        PipelineSpec::new(
            env.obs_dim(),
            env.num_actions(),
            self.hidden,
            self.model,
            self.state_dim,
            self.context,
        )
    }

    pub fn options(&self) -> QLearnOptions {
        QLearnOptions {
            gamma: self.gamma,
            polyak: self.polyak,
            terminal_mask: self.terminal_mask,
            next_state: self.next_state,
        }
    }

    pub fn schedule(&self) -> Result<ScanSchedule> {
        match self.workers {
            Some(w) => ScanSchedule::from_env().with_workers(w),
            None => Ok(ScanSchedule::from_env()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env_spec().validate()?;
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("state_dim", self.state_dim),
            ("context", self.context),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("updates_per_epoch", self.updates_per_epoch),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ] {
            positive(field, v)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "need at least one seed"));
        }
        match (self.batching, self.segment_length) {
            (Batching::Sbb, None) => return Err(Error::invalid("segment_length", "required when batching = \"sbb\"")),
            (Batching::Sbb, Some(0)) => return Err(Error::invalid("segment_length", "must be at least 1")),
            (Batching::Sbb, Some(l)) if l > self.batch_size => {
                return Err(Error::invalid("segment_length", "must not exceed batch_size"))
            }
            _ => {}
        }
        let rollout = self.episode_length * self.episodes_per_epoch;
        if self.capacity < rollout {
            return Err(Error::invalid(
                "capacity",
                format!("{} cannot hold one epoch of {rollout} transitions", self.capacity),
            ));
        }
        unit("gamma", self.gamma)?;
        unit("polyak", self.polyak)?;
        unit("epsilon_start", self.epsilon_start)?;
        unit("epsilon_end", self.epsilon_end)?;
        unit("epsilon_anneal", self.epsilon_anneal)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::invalid("clip_norm", "must be non-negative"));
        }
        if let Some(0) = self.workers {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        self.pipeline_spec().validate()
    }

    /// ε at training epoch `epoch` (0-based, after the random epochs).
    pub fn epsilon(&self, epoch: usize) -> f64 {
        let span = (self.epsilon_anneal * self.train_epochs as f64).round();
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let frac = epoch as f64 / span;
        if frac >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// One evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema: u32,
    pub seed: u64,
    pub epoch: usize,
    pub updates: usize,
    pub epsilon: f64,
    /// Mean loss of the updates since the previous record.
    pub loss: Option<f64>,
    /// Mean return of the ε-greedy episodes collected since the previous
    /// record.
    pub behavior_return: Option<f64>,
    /// Mean greedy return over the evaluation episodes.
    pub eval_return: f64,
    pub eval_return_std: f64,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    /// Wall-clock seconds at each record.
    pub elapsed: Vec<f64>,
    pub params: ParamSet,
    pub tape: Tape,
}

impl RunResult {
    pub fn final_return(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.eval_return)
    }

    pub fn best_return(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.eval_return)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs one episode; `epsilon = None` acts greedily.
pub fn rollout(
    spec: &PipelineSpec,
    params: &ParamSet,
    env: ToyEnvSpec,
    epsilon: Option<f64>,
    rng: &mut impl Rng,
) -> Result<(Vec<Transition>, f64)> {
    let (mut env_state, mut obs) = ToyEnv::reset(env, rng)?;
    let mut actor = Actor::new(spec, params)?;
    let mut out = Vec::with_capacity(env.episode_length);
    let mut total = 0.0;
    for t in 0..env.episode_length {
        // the memory must see every observation, explored or not
        let q = actor.q_values(&obs, t == 0)?;
        let explore = matches!(epsilon, Some(e) if rng.gen::<f64>() < e);
        let action = if explore {
            rng.gen_range(0..env.num_actions())
        } else {
            argmax(&q)
        };
        let step = env_state.step(action)?;
        total += step.reward;
        out.push(Transition {
            obs: std::mem::replace(&mut obs, step.next_obs.clone()),
            action,
            reward: step.reward,
            next_obs: step.next_obs,
            begin: t == 0,
            done: step.done,
        });
    }
    Ok((out, total))
}

/// Mean and standard deviation of greedy returns.
pub fn evaluate(
    spec: &PipelineSpec,
    params: &ParamSet,
    env: ToyEnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let returns = (0..episodes)
        .map(|_| rollout(spec, params, env, None, &mut rng).map(|r| r.1))
        .collect::<Result<Vec<f64>>>()?;
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok((mean, var.sqrt()))
}

fn mean_of(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

const EVAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains one seed; `on_record` sees every evaluation as it happens.
pub fn train_seed(cfg: &TrainConfig, seed: u64, mut on_record: impl FnMut(&EpochRecord, f64)) -> Result<RunResult> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let env = cfg.env_spec();
    let spec = cfg.pipeline_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let online = spec.init_params(&mut rng)?;
    let clip = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
    let adam = Adam::new(&online, cfg.lr, cfg.warmup, clip);
    let mut learner = QLearner::new(spec.clone(), online, adam, cfg.options())?;
    let mut tape = Tape::new(cfg.capacity, env.obs_dim())?;
    let eval_seed = seed ^ EVAL_SEED_SALT;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut elapsed = Vec::new();
    let mut losses = Vec::new();
    let mut behavior = Vec::new();
    let mut epsilon = 1.0;
    let total = cfg.random_epochs + cfg.train_epochs;
    for epoch in 0..total {
        let training = epoch >= cfg.random_epochs;
        epsilon = if training {
            cfg.epsilon(epoch - cfg.random_epochs)
        } else {
            1.0
        };
        for _ in 0..cfg.episodes_per_epoch {
            let (episode, ret) = rollout(&spec, &learner.online, env, Some(epsilon), &mut rng)?;
            tape.insert(&episode, false)?;
            if training {
                behavior.push(ret);
            }
        }
        if !training {
            continue;
        }
        for _ in 0..cfg.updates_per_epoch {
            let loss = match (cfg.batching, cfg.segment_length) {
                (Batching::Sbb, Some(len)) => {
                    let batch = sbb_sample_tape(&tape, len, (cfg.batch_size / len).max(1), &mut rng)?;
                    learner.sbb_update(&batch, &sched)?
                }
                _ => {
                    let batch = tape.sample(cfg.batch_size, &mut rng)?;
                    learner.tbb_update(&batch, &sched)?
                }
            };
            losses.push(loss);
        }
        let done = epoch - cfg.random_epochs + 1;
        if done.is_multiple_of(cfg.eval_interval) || epoch + 1 == total {
            let (mean, std) = evaluate(&spec, &learner.online, env, cfg.eval_episodes, eval_seed)?;
            let record = EpochRecord {
                schema: METRICS_SCHEMA,
                seed,
                epoch: done,
                updates: learner.optimizer.steps(),
                epsilon,
                loss: mean_of(&losses),
                behavior_return: mean_of(&behavior),
                eval_return: mean,
                eval_return_std: std,
                eval_episodes: cfg.eval_episodes,
            };
            losses.clear();
            behavior.clear();
            let secs = start.elapsed().as_secs_f64();
            on_record(&record, secs);
            records.push(record);
            elapsed.push(secs);
        }
    }
    if records.is_empty() {
        let (mean, std) = evaluate(&spec, &learner.online, env, cfg.eval_episodes, eval_seed)?;
        let record = EpochRecord {
            schema: METRICS_SCHEMA,
            seed,
            epoch: 0,
            updates: 0,
            epsilon,
            loss: None,
            behavior_return: None,
            eval_return: mean,
            eval_return_std: std,
            eval_episodes: cfg.eval_episodes,
        };
        let secs = start.elapsed().as_secs_f64();
        on_record(&record, secs);
        records.push(record);
        elapsed.push(secs);
    }
    Ok(RunResult {
        seed,
        records,
        elapsed,
        params: learner.online,
        tape,
    })
}

/// Runs every seed of the config, writing the run files when `out_dir` is
/// given.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let mut files = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
            Some((
                BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
                BufWriter::new(File::create(dir.join("timing.jsonl"))?),
            ))
        }
        None => None,
    };
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut io_err = None;
        let result = train_seed(cfg, seed, |rec, secs| {
            if let Some((metrics, timing)) = files.as_mut() {
                let line = serde_json::to_string(rec).expect("record serializes");
                let t = serde_json::json!({"seed": rec.seed, "epoch": rec.epoch, "elapsed_seconds": secs});
                if let Err(e) = writeln!(metrics, "{line}").and_then(|_| writeln!(timing, "{t}")) {
                    io_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        if let Some(dir) = out_dir {
            let meta = serde_json::json!({
                "pipeline": cfg.pipeline_spec().metadata(),
                "task": cfg.env_spec(),
                "seed": seed,
            });
            result
                .params
                .save(dir.join(format!("checkpoint_seed{seed}.bin")), &meta)?;
            if cfg.save_tape {
                result.tape.save(dir.join(format!("tape_seed{seed}.bin")))?;
            }
        }
        results.push(result);
    }
    if let (Some(dir), Some((mut metrics, mut timing))) = (out_dir, files) {
        metrics.flush()?;
        timing.flush()?;
        let mut csv = String::from("seed,final_return,best_return,final_loss\n");
        for r in &results {
            let loss = r
                .records
                .last()
                .and_then(|x| x.loss)
                .map_or(String::new(), |l| format!("{l:.9e}"));
            csv.push_str(&format!(
                "{},{:.9},{:.9},{}\n",
                r.seed,
                r.final_return(),
                r.best_return(),
                loss
            ));
        }
        std::fs::write(dir.join("summary.csv"), csv)?;
    }
    Ok(results)
}

/// Pipeline and task recorded in a checkpoint's metadata.
pub fn checkpoint_specs(meta: &serde_json::Value) -> Result<(PipelineSpec, ToyEnvSpec)> {
    let pipeline = serde_json::from_value(meta["pipeline"].clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata `pipeline`: {e}")))?;
    let task = serde_json::from_value(meta["task"].clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata `task`: {e}")))?;
    Ok((pipeline, task))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            episode_length: 6,
            num_symbols: 2,
            hidden: 8,
            state_dim: 4,
            context: 2,
            batch_size: 24,
            random_epochs: 3,
            train_epochs: 10,
            eval_interval: 5,
            eval_episodes: 4,
            capacity: 200,
            ..Default::default()
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = TrainConfig::from_toml_str("batch_size = 0").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        let err = TrainConfig::from_toml_str("batching = \"sbb\"").unwrap_err();
        assert!(err.to_string().contains("segment_length"), "{err}");
        let err = TrainConfig::from_toml_str("bogus_key = 1").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = TrainConfig::from_toml_str("gamma = \"high\"").unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = tiny();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn epsilon_anneals_over_first_half() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(500) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon(1000), 0.05);
        assert_eq!(cfg.epsilon(1999), 0.05);
    }

    #[test]
    fn runs_are_deterministic() {
        for batching in [Batching::Tbb, Batching::Sbb] {
            let cfg = TrainConfig {
                batching,
                segment_length: Some(3),
                ..tiny()
            };
            let a = train_seed(&cfg, 3, |_, _| {}).unwrap();
            let b = train_seed(&cfg, 3, |_, _| {}).unwrap();
            assert_eq!(a.records, b.records);
            assert_eq!(a.params, b.params);
            assert_eq!(a.records.len(), 2);
        }
    }
}
