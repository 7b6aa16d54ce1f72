//! Toy memory tasks with one-hot observations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum TaskKind {
    /// Output the symbol seen `k` steps ago.
    RepeatPrevious { k: usize },
    /// Output the first symbol of the episode.
    RepeatFirst,
}

impl TaskKind {
    /// First step at which the action is scored.
    pub fn first_scored_step(&self) -> usize {
        match *self {
            TaskKind::RepeatPrevious { k } => k,
            TaskKind::RepeatFirst => 1,
        }
    }

    /// Steps back the task needs to remember.
    pub fn reward_memory_length(&self, episode_length: usize) -> usize {
        match *self {
            TaskKind::RepeatPrevious { k } => k,
            TaskKind::RepeatFirst => episode_length.saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEnvSpec {
    pub kind: TaskKind,
    pub episode_length: usize,
    pub num_symbols: usize,
}

impl ToyEnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_symbols < 2 {
            return Err(Error::invalid("num_symbols", "need at least 2 symbols"));
        }
        if let TaskKind::RepeatPrevious { k } = self.kind {
            if k == 0 {
                return Err(Error::invalid("k", "must be at least 1"));
            }
        }
        if self.episode_length <= self.kind.first_scored_step() {
            return Err(Error::invalid(
                "episode_length",
                format!(
                    "{} leaves no scored step (first scored step is {})",
                    self.episode_length,
                    self.kind.first_scored_step()
                ),
            ));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.num_symbols
    }

    pub fn num_actions(&self) -> usize {
        self.num_symbols
    }

    /// Magnitude of each scored step's reward; a perfect episode sums to 1.
    pub fn step_reward(&self) -> f64 {
        1.0 / (self.episode_length - self.kind.first_scored_step()) as f64
    }

    /// Expected return of a uniformly random policy.
    pub fn random_return(&self) -> f64 {
        2.0 / self.num_symbols as f64 - 1.0
    }
}

pub fn one_hot(symbol: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[symbol] = 1.0;
    v
}

/// One episode in progress.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    spec: ToyEnvSpec,
    symbols: Vec<usize>,
    t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

impl ToyEnv {
    /// Starts an episode and returns the first observation.
    pub fn reset(spec: ToyEnvSpec, rng: &mut impl Rng) -> Result<(Self, Vec<f64>)> {
        spec.validate()?;
        let symbols: Vec<usize> = (0..spec.episode_length)
            .map(|_| rng.gen_range(0..spec.num_symbols))
            .collect();
        let env = Self { spec, symbols, t: 0 };
        let obs = env.observation(0);
        Ok((env, obs))
    }

    fn observation(&self, t: usize) -> Vec<f64> {
        match self.symbols.get(t) {
            Some(&s) => one_hot(s, self.spec.num_symbols),
            None => vec![0.0; self.spec.num_symbols],
        }
    }

    /// Symbol the agent should output at step `t`, if the step is scored.
    pub fn target(&self, t: usize) -> Option<usize> {
        match self.spec.kind {
            TaskKind::RepeatPrevious { k } => t.checked_sub(k).map(|i| self.symbols[i]),
            TaskKind::RepeatFirst => (t >= 1).then(|| self.symbols[0]),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.t >= self.spec.episode_length {
            return Err(Error::Precondition("episode already finished".into()));
        }
        if action >= self.spec.num_actions() {
            return Err(Error::invalid("action", format!("{action} out of range")));
        }
        let reward = match self.target(self.t) {
            Some(s) if s == action => self.spec.step_reward(),
            Some(_) => -self.spec.step_reward(),
            None => 0.0,
        };
        self.t += 1;
        Ok(StepOutcome {
            reward,
            next_obs: self.observation(self.t),
            done: self.t == self.spec.episode_length,
        })
    }
}
